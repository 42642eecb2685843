//! Format loaders. Every loader normalises into [`Example`]s and reports
//! malformed input with a line or record locator; nothing is skipped silently.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::Deserialize;

#[cfg(test)]
use super::Task;
use super::{Example, RTE_LABELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    CanonicalJsonl,
    SquadJson,
    WikiqaTsv,
    SemevalXml,
    SickTsv,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "canonical-jsonl" => DatasetFormat::CanonicalJsonl,
            "squad-json" => DatasetFormat::SquadJson,
            "wikiqa-tsv" => DatasetFormat::WikiqaTsv,
            "semeval-xml" => DatasetFormat::SemevalXml,
            "sick-tsv" => DatasetFormat::SickTsv,
            other => return Err(Error::Usage(format!("unknown dataset format {other:?}"))),
        })
    }
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format, &path.display().to_string())
}

/// Parses `text` in `format`; `source` prefixes error locators.
pub fn parse_dataset(text: &str, format: DatasetFormat, source: &str) -> Result<Vec<Example>> {
    match format {
        DatasetFormat::CanonicalJsonl => parse_canonical(text, source),
        DatasetFormat::SquadJson => parse_squad(text, source),
        DatasetFormat::WikiqaTsv => parse_wikiqa(text, source),
        DatasetFormat::SemevalXml => parse_semeval(text, source),
        DatasetFormat::SickTsv => parse_sick(text, source),
    }
}

pub fn write_canonical<W: Write>(mut out: W, examples: &[Example]) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_canonical(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_canonical(&mut buf, examples).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_canonical(text: &str, source: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source}:{}", n + 1);
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::format(&loc, e.to_string()))?;
        ex.validate(None).map_err(|e| Error::format(&loc, e.to_string()))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::format(source, "no records"));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// SQuAD v1 JSON; the first listed answer is the gold span.
fn parse_squad(text: &str, source: &str) -> Result<Vec<Example>> {
    let file: SquadFile = serde_json::from_str(text).map_err(|e| Error::format(source, e.to_string()))?;
    let mut out = Vec::new();
    for (a, article) in file.data.iter().enumerate() {
        for (p, para) in article.paragraphs.iter().enumerate() {
            for (q, qa) in para.qas.iter().enumerate() {
                let loc = format!("{source}:data[{a}].paragraphs[{p}].qas[{q}] (id {})", qa.id);
                let Some(ans) = qa.answers.first() else {
                    return Err(Error::format(loc, "question has no answers"));
                };
                let ex = Example::span(&qa.id, &qa.question, &para.context, ans.answer_start, &ans.text);
                ex.validate(None).map_err(|e| Error::format(&loc, e.to_string()))?;
                out.push(ex);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::format(source, "no questions"));
    }
    Ok(out)
}

/// Header-driven TSV with line numbers kept for error locators.
struct Tsv<'a> {
    source: &'a str,
    columns: HashMap<String, usize>,
    rows: Vec<(usize, Vec<&'a str>)>,
}

impl<'a> Tsv<'a> {
    fn parse(text: &'a str, source: &'a str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(Error::format(source, "empty file"));
        };
        let names: Vec<&str> = header.split('\t').map(str::trim).collect();
        let columns = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_ascii_lowercase(), i))
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != names.len() {
                return Err(Error::format(
                    format!("{source}:{}", n + 1),
                    format!("expected {} tab-separated fields, found {}", names.len(), fields.len()),
                ));
            }
            rows.push((n + 1, fields));
        }
        if rows.is_empty() {
            return Err(Error::format(source, "no data rows"));
        }
        Ok(Self { source, columns, rows })
    }

    fn column(&self, names: &[&str]) -> Result<usize> {
        names
            .iter()
            .find_map(|n| self.columns.get(&n.to_ascii_lowercase()).copied())
            .ok_or_else(|| {
                Error::format(
                    format!("{}:1", self.source),
                    format!("missing column {}", names.join(" or ")),
                )
            })
    }
}

/// WikiQA TSV: one row per (question, candidate sentence), grouped by question id.
fn parse_wikiqa(text: &str, source: &str) -> Result<Vec<Example>> {
    let tsv = Tsv::parse(text, source)?;
    let qid = tsv.column(&["QuestionID"])?;
    let question = tsv.column(&["Question"])?;
    let sentence = tsv.column(&["Sentence"])?;
    let label = tsv.column(&["Label"])?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (String, Vec<String>, Vec<usize>)> = HashMap::new();
    for (line, fields) in &tsv.rows {
        let loc = format!("{source}:{line}");
        let l = match fields[label].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::format(loc, format!("label must be 0 or 1, got {other:?}"))),
        };
        if fields[sentence].trim().is_empty() {
            return Err(Error::format(loc, "empty candidate sentence"));
        }
        let id = fields[qid].trim().to_string();
        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (fields[question].trim().to_string(), Vec::new(), Vec::new())
        });
        entry.1.push(fields[sentence].trim().to_string());
        entry.2.push(l);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let (q, cands, labels) = groups.remove(&id).expect("grouped");
            Example::select(id, q, cands, labels)
        })
        .collect())
}

fn parse_rte_label(raw: &str) -> Option<usize> {
    let lower = raw.trim().to_ascii_lowercase();
    RTE_LABELS.iter().position(|l| *l == lower)
}

/// SICK TSV: `sentence_A` is the premise, `sentence_B` the hypothesis. Extra
/// columns such as relatedness scores are ignored.
fn parse_sick(text: &str, source: &str) -> Result<Vec<Example>> {
    let tsv = Tsv::parse(text, source)?;
    let id = tsv.column(&["pair_ID", "id"])?;
    let premise = tsv.column(&["sentence_A"])?;
    let hypothesis = tsv.column(&["sentence_B"])?;
    let label = tsv.column(&["entailment_label", "entailment_judgment", "label"])?;
    tsv.rows
        .iter()
        .map(|(line, fields)| {
            let loc = format!("{source}:{line}");
            let class = parse_rte_label(fields[label])
                .ok_or_else(|| Error::format(&loc, format!("unknown entailment label {:?}", fields[label])))?;
            if fields[premise].trim().is_empty() || fields[hypothesis].trim().is_empty() {
                return Err(Error::format(&loc, "empty premise or hypothesis"));
            }
            Ok(Example::classify(
                fields[id].trim(),
                fields[hypothesis].trim(),
                vec![fields[premise].trim().to_string()],
                vec![class],
            ))
        })
        .collect()
}

/// Simplified SemEval-2016 3A XML: `Thread` elements holding one
/// `RelQuestion` (with `RelQSubject` / `RelQBody`) and its `RelComment`s
/// (`RELC_RELEVANCE2RELQ` attribute, `RelCText` body). `Good` is relevant.
fn parse_semeval(text: &str, source: &str) -> Result<Vec<Example>> {
    #[derive(Default)]
    struct Thread {
        id: Option<String>,
        subject: String,
        body: String,
        comments: Vec<String>,
        labels: Vec<usize>,
    }

    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(true);
    let mut out = Vec::new();
    let mut thread: Option<Thread> = None;
    let mut field: Option<&'static str> = None;
    let mut n_threads = 0usize;

    let attr = |e: &BytesStart<'_>, name: &str, loc: &str| -> Result<Option<String>> {
        for a in e.attributes() {
            let a = a.map_err(|err| Error::format(loc, err.to_string()))?;
            if a.key.as_ref() == name.as_bytes() {
                let v = a.unescape_value().map_err(|err| Error::format(loc, err.to_string()))?;
                return Ok(Some(v.into_owned()));
            }
        }
        Ok(None)
    };

    loop {
        let pos = reader.buffer_position();
        let loc = format!("{source}:byte {pos} (thread {n_threads})");
        let event = reader.read_event().map_err(|e| Error::format(&loc, e.to_string()))?;
        match event {
            Event::Start(e) => match e.name().as_ref() {
                b"Thread" => {
                    n_threads += 1;
                    thread = Some(Thread::default());
                }
                b"RelQuestion" => {
                    let t = thread
                        .as_mut()
                        .ok_or_else(|| Error::format(&loc, "RelQuestion outside Thread"))?;
                    t.id = attr(&e, "RELQ_ID", &loc)?;
                }
                b"RelComment" => {
                    let t = thread
                        .as_mut()
                        .ok_or_else(|| Error::format(&loc, "RelComment outside Thread"))?;
                    let rel = attr(&e, "RELC_RELEVANCE2RELQ", &loc)?
                        .ok_or_else(|| Error::format(&loc, "RelComment without RELC_RELEVANCE2RELQ"))?;
                    let label = match rel.as_str() {
                        "Good" => 1,
                        "PotentiallyUseful" | "Bad" => 0,
                        other => return Err(Error::format(&loc, format!("unknown relevance {other:?}"))),
                    };
                    t.labels.push(label);
                    t.comments.push(String::new());
                }
                b"RelQSubject" => field = Some("subject"),
                b"RelQBody" => field = Some("body"),
                b"RelCText" => field = Some("comment"),
                _ => {}
            },
            Event::Text(t) => {
                if let (Some(f), Some(th)) = (field, thread.as_mut()) {
                    let s = t.unescape().map_err(|e| Error::format(&loc, e.to_string()))?;
                    let slot = match f {
                        "subject" => &mut th.subject,
                        "body" => &mut th.body,
                        _ => th
                            .comments
                            .last_mut()
                            .ok_or_else(|| Error::format(&loc, "RelCText outside RelComment"))?,
                    };
                    if !slot.is_empty() {
                        slot.push(' ');
                    }
                    slot.push_str(s.trim());
                }
            }
            Event::End(e) => match e.name().as_ref() {
                b"RelQSubject" | b"RelQBody" | b"RelCText" => field = None,
                b"Thread" => {
                    let t = thread.take().expect("inside thread");
                    let id =
                        t.id.ok_or_else(|| Error::format(&loc, "thread without RelQuestion RELQ_ID"))?;
                    if t.comments.is_empty() {
                        return Err(Error::format(&loc, format!("thread {id} has no comments")));
                    }
                    if let Some(k) = t.comments.iter().position(|c| c.is_empty()) {
                        return Err(Error::format(&loc, format!("thread {id} comment {k} has no text")));
                    }
                    let question = [t.subject, t.body]
                        .into_iter()
                        .filter(|s| !s.is_empty())
                        .collect::<Vec<_>>()
                        .join(" ");
                    if question.is_empty() {
                        return Err(Error::format(&loc, format!("thread {id} has an empty question")));
                    }
                    out.push(Example::select(id, question, t.comments, t.labels));
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }
    if thread.is_some() {
        return Err(Error::format(source, "unterminated Thread"));
    }
    if out.is_empty() {
        return Err(Error::format(source, "no threads"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_roundtrip() {
        let examples = vec![
            Example::span("a", "Who?", "Bob did it.", 0, "Bob"),
            Example::select("b", "What?", vec!["x y".into(), "z".into()], vec![0, 1]),
            Example::classify("c", "H", vec!["P".into()], vec![2]),
        ];
        let mut buf = Vec::new();
        write_canonical(&mut buf, &examples).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            parse_dataset(&text, DatasetFormat::CanonicalJsonl, "mem").unwrap(),
            examples
        );
    }

    #[test]
    fn canonical_error_names_line() {
        let text =
            "{\"id\":\"a\",\"task\":\"select\",\"question\":\"q\",\"candidates\":[\"x\"],\"labels\":[0]}\n{oops\n";
        match parse_dataset(text, DatasetFormat::CanonicalJsonl, "f.jsonl") {
            Err(Error::Format { locator, .. }) => assert_eq!(locator, "f.jsonl:2"),
            other => panic!("unexpected {other:?}"),
        }
        let bad_labels =
            "{\"id\":\"a\",\"task\":\"select\",\"question\":\"q\",\"candidates\":[\"x\"],\"labels\":[0,1]}\n";
        assert!(parse_dataset(bad_labels, DatasetFormat::CanonicalJsonl, "f").is_err());
    }

    #[test]
    fn wikiqa_groups_candidates() {
        let text = "QuestionID\tQuestion\tDocumentID\tDocumentTitle\tSentenceID\tSentence\tLabel\n\
Q1\tWho made airbus\tD1\tAirbus\tD1-0\tAirbus is a company.\t0\n\
Q1\tWho made airbus\tD1\tAirbus\tD1-1\tIt was formed by a consortium.\t1\n\
Q1\tWho made airbus\tD1\tAirbus\tD1-2\tIt builds planes.\t0\n";
        let ex = parse_dataset(text, DatasetFormat::WikiqaTsv, "w").unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].labels(), &[0, 1, 0]);
        assert_eq!(ex[0].question, "Who made airbus");
        assert!(ex[0].is_answerable());
    }

    #[test]
    fn wikiqa_keeps_unanswerable_tagged() {
        let text = "QuestionID\tQuestion\tSentence\tLabel\nQ1\tq\ts1\t0\nQ1\tq\ts2\t0\nQ2\tr\tt1\t1\n";
        let ex = parse_dataset(text, DatasetFormat::WikiqaTsv, "w").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].answerable, Some(false));
        assert!(ex[1].is_answerable());
    }

    #[test]
    fn wikiqa_bad_label_is_located() {
        let text = "QuestionID\tQuestion\tSentence\tLabel\nQ1\tq\ts1\t0\nQ1\tq\ts2\tyes\n";
        match parse_dataset(text, DatasetFormat::WikiqaTsv, "w.tsv") {
            Err(Error::Format { locator, .. }) => assert_eq!(locator, "w.tsv:3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sick_labels_with_relatedness_columns() {
        let text = "pair_ID\tsentence_A\tsentence_B\trelatedness_score\tentailment_judgment\n\
1\tFour kids are doing backbends in the park.\tFour girls are doing backbends and playing outdoors.\t4.1\tENTAILMENT\n\
2\tA man plays.\tNobody plays.\t3.0\tCONTRADICTION\n";
        let ex = parse_dataset(text, DatasetFormat::SickTsv, "s").unwrap();
        assert_eq!(ex[0].labels(), &[0]);
        assert_eq!(ex[1].labels(), &[2]);
        assert_eq!(ex[0].question, "Four girls are doing backbends and playing outdoors.");
        assert_eq!(
            ex[0].candidates(),
            &["Four kids are doing backbends in the park.".to_string()]
        );
        assert_eq!(ex[0].task, Task::Classify);
    }

    #[test]
    fn sick_without_entailment_column_is_rejected() {
        let text = "pair_ID\tsentence_A\tsentence_B\trelatedness_score\n1\ta\tb\t4.0\n";
        assert!(matches!(
            parse_dataset(text, DatasetFormat::SickTsv, "s"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn squad_json() {
        let text = r#"{"version":"1.1","data":[{"title":"t","paragraphs":[{"context":"Bob built it. Alice sold it.","qas":[{"id":"q1","question":"Who sold it?","answers":[{"text":"Alice","answer_start":14}]}]}]}]}"#;
        let ex = parse_dataset(text, DatasetFormat::SquadJson, "sq").unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].answer_text.as_deref(), Some("Alice"));
        let bad = text.replace("\"answer_start\":14", "\"answer_start\":15");
        match parse_dataset(&bad, DatasetFormat::SquadJson, "sq") {
            Err(Error::Format { locator, .. }) => assert!(locator.contains("q1"), "{locator}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_dataset("", DatasetFormat::SquadJson, "sq").is_err());
    }

    #[test]
    fn semeval_xml() {
        let text = r#"<root>
<Thread THREAD_SEQUENCE="Q1_R1">
  <RelQuestion RELQ_ID="Q1_R1"><RelQSubject>Visa help</RelQSubject><RelQBody>How long does it take?</RelQBody></RelQuestion>
  <RelComment RELC_ID="Q1_R1_C1" RELC_RELEVANCE2RELQ="Good"><RelCText>About two weeks.</RelCText></RelComment>
  <RelComment RELC_ID="Q1_R1_C2" RELC_RELEVANCE2RELQ="Bad"><RelCText>SCAM!!!</RelCText></RelComment>
  <RelComment RELC_ID="Q1_R1_C3" RELC_RELEVANCE2RELQ="PotentiallyUseful"><RelCText>Ask the office &amp; wait.</RelCText></RelComment>
</Thread>
</root>"#;
        let ex = parse_dataset(text, DatasetFormat::SemevalXml, "x").unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].id, "Q1_R1");
        assert_eq!(ex[0].question, "Visa help How long does it take?");
        assert_eq!(ex[0].labels(), &[1, 0, 0]);
        assert_eq!(ex[0].candidates()[2], "Ask the office & wait.");

        let missing = text.replace(r#" RELC_RELEVANCE2RELQ="Bad""#, "");
        assert!(matches!(
            parse_dataset(&missing, DatasetFormat::SemevalXml, "x"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn unknown_format_is_usage_error() {
        assert!(matches!("csv".parse::<DatasetFormat>(), Err(Error::Usage(_))));
    }
}
