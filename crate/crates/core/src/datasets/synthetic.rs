//! Templated entity–relation corpus standing in for a span dataset (source)
//! and a sentence-selection dataset (target) at desk scale.
//!
//! Every context is a handful of fact sentences, exactly one of which answers
//! the question. Distractors deliberately reuse the answer's entities or
//! relation so that picking the right sentence needs both to match. Source
//! and target draw entities from disjoint name pools.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use super::convert::convert_squad_to_squadt;
use super::text::char_len;
use super::Example;
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// `(past tense, base form)`.
const RELATIONS: &[(&str, &str)] = &[
    ("founded", "found"),
    ("acquired", "acquire"),
    ("designed", "design"),
    ("built", "build"),
    ("sold", "sell"),
    ("funded", "fund"),
    ("managed", "manage"),
    ("discovered", "discover"),
    ("painted", "paint"),
    ("wrote", "write"),
    ("directed", "direct"),
    ("produced", "produce"),
];

const FUNCTION_WORDS: &[&str] = &["who", "what", "when", "did", "in", ",", ".", "?"];

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Shape of the generated lexicon.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabSpec {
    /// Distinct entity names in each of the source and target pools.
    pub entities_per_pool: usize,
    /// How many of the built-in relations to use (at most 12).
    pub relations: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub first_year: u32,
    pub n_years: u32,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            entities_per_pool: 120,
            relations: 8,
            min_sentences: 3,
            max_sentences: 6,
            first_year: 1900,
            n_years: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// Span examples over the source pool.
    pub span: Vec<Example>,
    /// Sentence-selection examples over the target pool.
    pub select: Vec<Example>,
    /// Every lowercased token the generator can emit.
    pub lexicon: Vec<String>,
}

impl SyntheticCorpus {
    /// Text embeddings file covering the lexicon; one random vector of norm
    /// about 1 per token.
    pub fn embeddings_file(&self, d_w: usize, seed: u64) -> String {
        synthetic_embeddings(&self.lexicon, d_w, seed)
    }
}

pub fn synthetic_embeddings(tokens: &[String], d_w: usize, seed: u64) -> String {
    let mut rng = rng::stream(seed, "synthetic/embeddings");
    let bound = (3.0 / d_w as f64).sqrt();
    let mut out = String::new();
    for tok in tokens {
        out.push_str(tok);
        for _ in 0..d_w {
            let v: f64 = rng.gen_range(-bound..=bound);
            write!(out, " {v:.6}").expect("string write");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Fact {
    subj: usize,
    rel: usize,
    obj: usize,
    year: u32,
}

#[derive(Debug, Clone, Copy)]
enum Ask {
    Who,
    What,
    When,
}

impl Ask {
    /// Would `other` also answer the question asked about `fact`?
    fn conflicts(self, fact: &Fact, other: &Fact) -> bool {
        match self {
            Ask::Who => other.rel == fact.rel && other.obj == fact.obj,
            Ask::What => other.subj == fact.subj && other.rel == fact.rel,
            Ask::When => other.subj == fact.subj && other.rel == fact.rel && other.obj == fact.obj,
        }
    }
}

struct Generator<'a> {
    names: &'a [String],
    spec: &'a VocabSpec,
    rng: StreamRng,
}

impl Generator<'_> {
    fn random_fact(&mut self) -> Fact {
        let n = self.names.len();
        let subj = self.rng.gen_range(0..n);
        let mut obj = self.rng.gen_range(0..n - 1);
        if obj >= subj {
            obj += 1;
        }
        Fact {
            subj,
            rel: self.rng.gen_range(0..self.spec.relations),
            obj,
            year: self.spec.first_year + self.rng.gen_range(0..self.spec.n_years),
        }
    }

    /// A fact that shares an entity or the relation with `answer`.
    fn near_miss(&mut self, answer: &Fact) -> Fact {
        let mut f = self.random_fact();
        match self.rng.gen_range(0..5) {
            0 => f.subj = answer.subj,
            1 => f.obj = answer.obj,
            2 => f.rel = answer.rel,
            3 => {
                f.subj = answer.obj;
                f.obj = answer.subj;
            }
            _ => {}
        }
        f
    }

    fn render(&mut self, fact: &Fact) -> (String, [usize; 3]) {
        let subj = &self.names[fact.subj];
        let obj = &self.names[fact.obj];
        let verb = RELATIONS[fact.rel].0;
        let year = fact.year.to_string();
        // offsets (chars) of subject, object, year within the sentence
        if self.rng.gen_bool(0.5) {
            let text = format!("{subj} {verb} {obj} in {year}.");
            let s = 0;
            let o = char_len(subj) + 1 + char_len(verb) + 1;
            let y = o + char_len(obj) + 4;
            (text, [s, o, y])
        } else {
            let text = format!("In {year}, {subj} {verb} {obj}.");
            let y = 3;
            let s = y + char_len(&year) + 2;
            let o = s + char_len(subj) + 1 + char_len(verb) + 1;
            (text, [s, o, y])
        }
    }

    fn example(&mut self, id: String) -> Example {
        let ask = match self.rng.gen_range(0..3) {
            0 => Ask::Who,
            1 => Ask::What,
            _ => Ask::When,
        };
        let answer = self.random_fact();
        let n = self.rng.gen_range(self.spec.min_sentences..=self.spec.max_sentences);
        let mut facts = vec![answer];
        let mut used: HashSet<Fact> = facts.iter().copied().collect();
        while facts.len() < n {
            let cand = self.near_miss(&answer);
            if cand.subj == cand.obj || ask.conflicts(&answer, &cand) || !used.insert(cand) {
                continue;
            }
            facts.push(cand);
        }
        facts.shuffle(&mut self.rng);

        let mut context = String::new();
        let mut answer_start = 0;
        let names = self.names;
        let answer_text = match ask {
            Ask::Who => names[answer.subj].clone(),
            Ask::What => names[answer.obj].clone(),
            Ask::When => answer.year.to_string(),
        };
        for f in &facts {
            if !context.is_empty() {
                context.push(' ');
            }
            let (sentence, [s, o, y]) = self.render(f);
            if *f == answer {
                let within = match ask {
                    Ask::Who => s,
                    Ask::What => o,
                    Ask::When => y,
                };
                answer_start = char_len(&context) + within;
            }
            context.push_str(&sentence);
        }
        let (past, base) = RELATIONS[answer.rel];
        let question = match ask {
            Ask::Who => format!("Who {past} {}?", names[answer.obj]),
            Ask::What => format!("What did {} {base}?", names[answer.subj]),
            Ask::When => format!("When did {} {base} {}?", names[answer.subj], names[answer.obj]),
        };
        Example::span(id, question, context, answer_start, answer_text)
    }
}

fn entity_names(rng: &mut StreamRng, count: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut name = String::new();
        for _ in 0..syllables {
            name.push(*CONSONANTS.choose(rng).expect("non-empty"));
            name.push(*VOWELS.choose(rng).expect("non-empty"));
        }
        if seen.insert(name.clone()) {
            let mut chars = name.chars();
            let first = chars.next().expect("non-empty").to_ascii_uppercase();
            out.push(std::iter::once(first).chain(chars).collect());
        }
    }
    out
}

/// `n_span` source span examples and `n_select` target selection examples,
/// fully determined by `seed`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_span: usize,
    n_select: usize,
    spec: &VocabSpec,
) -> Result<SyntheticCorpus> {
    if n_span == 0 || n_select == 0 {
        return Err(Error::Usage("synthetic corpus sizes must be at least 1".into()));
    }
    if spec.relations == 0 || spec.relations > RELATIONS.len() {
        return Err(Error::Usage(format!(
            "relations must lie in 1..={}, got {}",
            RELATIONS.len(),
            spec.relations
        )));
    }
    if spec.entities_per_pool < 4
        || spec.min_sentences < 1
        || spec.min_sentences > spec.max_sentences
        || spec.n_years == 0
    {
        return Err(Error::Usage(format!("invalid synthetic vocabulary spec {spec:?}")));
    }

    let mut name_rng = rng::stream(seed, "synthetic/names");
    let all = entity_names(&mut name_rng, 2 * spec.entities_per_pool);
    let (source_pool, target_pool) = all.split_at(spec.entities_per_pool);

    let mut src = Generator {
        names: source_pool,
        spec,
        rng: rng::stream(seed, "synthetic/span"),
    };
    let span: Vec<Example> = (0..n_span).map(|k| src.example(format!("syn-span-{k}"))).collect();

    let mut tgt = Generator {
        names: target_pool,
        spec,
        rng: rng::stream(seed, "synthetic/select"),
    };
    let select = (0..n_select)
        .map(|k| {
            let ex = tgt.example(format!("syn-sel-{k}"));
            convert_squad_to_squadt(&ex).map(|(sel, _)| sel)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut lexicon: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
    for (past, base) in &RELATIONS[..spec.relations] {
        lexicon.push(past.to_string());
        if base != past {
            lexicon.push(base.to_string());
        }
    }
    for y in 0..spec.n_years {
        lexicon.push((spec.first_year + y).to_string());
    }
    lexicon.extend(all.iter().map(|n| n.to_lowercase()));
    let mut seen = HashSet::new();
    lexicon.retain(|t| seen.insert(t.clone()));

    Ok(SyntheticCorpus { span, select, lexicon })
}
