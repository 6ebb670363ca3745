//! Exact match and retrieval recall.

use std::collections::BTreeMap;

use irag_index::SearchBackend;
use serde::{Deserialize, Serialize};

use crate::compress::KvCompression;
use crate::data::{encode_prompt, Corpus, QaRecord};
use crate::error::Result;
use crate::model::Model;

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lower: String =
        s.to_lowercase().chars().map(|c| if c.is_ascii_punctuation() { ' ' } else { c }).collect();
    lower.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// True when any retrieved passage contains the answer as a substring.
pub fn answer_recalled<'a>(passages: impl IntoIterator<Item = &'a str>, answer: &str) -> bool {
    passages.into_iter().any(|p| p.contains(answer))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub n: usize,
    pub exact_match: f64,
    pub recall_at_k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_match: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub n: usize,
    pub per_task: BTreeMap<String, TaskScore>,
}

/// One example's outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query: String,
    pub answer: String,
    pub task: String,
    pub generated: String,
    pub passage_ids: Vec<u64>,
    pub em: bool,
    pub recalled: bool,
}

impl EvalReport {
    pub fn from_predictions(preds: &[Prediction], k: usize) -> Self {
        let mut per_task: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
        for p in preds {
            let e = per_task.entry(p.task.clone()).or_default();
            e.0 += 1;
            e.1 += p.em as usize;
            e.2 += p.recalled as usize;
        }
        let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
        let n = preds.len();
        Self {
            exact_match: frac(preds.iter().filter(|p| p.em).count(), n),
            recall_at_k: frac(preds.iter().filter(|p| p.recalled).count(), n),
            k,
            n,
            per_task: per_task
                .into_iter()
                .map(|(t, (n, em, rec))| (t, TaskScore { n, exact_match: frac(em, n), recall_at_k: frac(rec, n) }))
                .collect(),
        }
    }
}

pub const MAX_ANSWER_TOKENS: usize = 8;

/// Decode every example with `k` retrieved passages.
pub fn predict(
    model: &Model,
    corpus: &Corpus,
    examples: &[QaRecord],
    backend: &dyn SearchBackend,
    k: usize,
    compression: &KvCompression,
) -> Result<Vec<Prediction>> {
    examples
        .iter()
        .map(|ex| {
            let prompt = encode_prompt(&model.tokenizer, &ex.query);
            let out = model.decode(&prompt, backend, corpus, MAX_ANSWER_TOKENS, k, compression)?;
            let generated = model.tokenizer.decode(&out.tokens);
            let recalled = answer_recalled(out.passage_ids.iter().filter_map(|&id| corpus.text(id)), &ex.answer);
            Ok(Prediction {
                query: ex.query.clone(),
                answer: ex.answer.clone(),
                task: ex.task.clone(),
                em: exact_match(&generated, &ex.answer),
                generated,
                passage_ids: out.passage_ids,
                recalled,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    examples: &[QaRecord],
    backend: &dyn SearchBackend,
    k: usize,
    compression: &KvCompression,
) -> Result<EvalReport> {
    let preds = predict(model, corpus, examples, backend, k, compression)?;
    Ok(EvalReport::from_predictions(&preds, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The Zo-ki!  "), "zo ki");
        assert!(exact_match("an apple.", "Apple"));
        assert!(!exact_match("zoki", "zokira"));
        assert_eq!(normalize_answer("a"), "");
    }

    #[test]
    fn recall_is_substring_containment() {
        assert!(answer_recalled(["the code is zoki", "nothing"], "zoki"));
        assert!(!answer_recalled(["the code is zok"], "zoki"));
        assert!(!answer_recalled(Vec::<&str>::new(), "zoki"));
    }
}
