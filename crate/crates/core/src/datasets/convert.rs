use serde::Serialize;

use super::text::{char_len, char_slice, split_sentences};
use super::{Example, Task};
use crate::{Error, Result};

/// One line of the conversion report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConversionRecord {
    pub id: String,
    pub n_sentences: usize,
    pub n_positive: usize,
    /// The answer overlaps more than one sentence.
    pub boundary_flag: bool,
}

/// Turns a span example into sentence selection: each context sentence is a
/// candidate, labelled 1 iff its char interval intersects the answer interval.
pub fn convert_squad_to_squadt(ex: &Example) -> Result<(Example, ConversionRecord)> {
    if ex.task != Task::Span {
        return Err(Error::CorruptExample {
            id: ex.id.clone(),
            message: format!("expected a span example, got {}", ex.task.as_str()),
        });
    }
    ex.validate(None)?;
    let context = ex.context.as_deref().expect("validated");
    let start = ex.answer_start.expect("validated");
    let end = start + char_len(ex.answer_text.as_deref().expect("validated"));

    let spans = split_sentences(context).map_err(|e| Error::CorruptExample {
        id: ex.id.clone(),
        message: e.to_string(),
    })?;
    let candidates: Vec<String> = spans.iter().map(|s| char_slice(context, s.start, s.end)).collect();
    let labels: Vec<usize> = spans.iter().map(|s| usize::from(s.intersects(start, end))).collect();
    let n_positive = labels.iter().sum();
    if n_positive == 0 {
        return Err(Error::CorruptExample {
            id: ex.id.clone(),
            message: "answer overlaps no sentence".into(),
        });
    }
    let record = ConversionRecord {
        id: ex.id.clone(),
        n_sentences: spans.len(),
        n_positive,
        boundary_flag: n_positive > 1,
    };
    let out = Example::select(ex.id.clone(), ex.question.clone(), candidates, labels);
    Ok((out, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPECTRE: &str = "Spectre (2015) is the 24th James Bond film produced by Eon Productions. It features Daniel Craig in his fourth performance as James Bond.";

    /// Label oracle: interval intersection computed from char positions directly.
    fn oracle(context: &str, start: usize, len: usize, candidates: &[String]) -> Vec<usize> {
        let mut labels = Vec::new();
        let mut cursor = 0;
        let chars: Vec<char> = context.chars().collect();
        for cand in candidates {
            let clen = cand.chars().count();
            while chars[cursor..cursor + clen].iter().collect::<String>() != *cand {
                cursor += 1;
            }
            let (s, e) = (cursor, cursor + clen);
            labels.push(usize::from((start..start + len).any(|p| p >= s && p < e)));
            cursor = e;
        }
        labels
    }

    #[test]
    fn spectre_example() {
        let start = SPECTRE.find("Eon Productions").unwrap();
        let ex = Example::span("s1", "Which company made Spectre?", SPECTRE, start, "Eon Productions");
        let (out, rec) = convert_squad_to_squadt(&ex).unwrap();
        assert_eq!(out.labels(), &[1, 0]);
        assert_eq!(out.labels(), oracle(SPECTRE, start, 15, out.candidates()).as_slice());
        assert_eq!(out.task, Task::Select);
        assert_eq!(out.answerable, Some(true));
        assert!(!rec.boundary_flag);
        assert_eq!((rec.n_sentences, rec.n_positive), (2, 1));
    }

    #[test]
    fn answer_crossing_boundary_is_flagged() {
        let ctx = "The band was called Fire. Water came later.";
        let start = ctx.find("Fire. Water").unwrap();
        let ex = Example::span("s2", "q?", ctx, start, "Fire. Water");
        let (out, rec) = convert_squad_to_squadt(&ex).unwrap();
        assert_eq!(out.labels(), &[1, 1]);
        assert!(rec.boundary_flag);
    }

    #[test]
    fn single_sentence_context() {
        let ex = Example::span("s3", "q?", "Only one sentence here", 5, "one");
        let (out, _) = convert_squad_to_squadt(&ex).unwrap();
        assert_eq!(out.labels(), &[1]);
    }

    #[test]
    fn answer_outside_context_is_corrupt() {
        let ex = Example::span("bad", "q?", "Short.", 4, "long answer");
        assert!(matches!(
            convert_squad_to_squadt(&ex),
            Err(Error::CorruptExample { id, .. }) if id == "bad"
        ));
        let ex = Example::span("bad2", "q?", "Short text.", 0, "Long");
        assert!(convert_squad_to_squadt(&ex).is_err());
    }
}
