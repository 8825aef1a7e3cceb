//! Two-option fill-in-the-blank evaluation by cumulative log-likelihood.
//!
//! Each option is scored as the continuation "option + rest of sentence"
//! given the text before the blank. The higher total log-likelihood wins;
//! a tie goes to the first option. No length normalization is applied.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, ScoreRequest, SimBackend};
use crate::exec::Execution;

pub const BLANK: char = '_';

#[derive(Debug, Error)]
pub enum AccuracyError {
    #[error("item {id:?}: {reason}")]
    MalformedItem { id: String, reason: String },
    #[error("items line {line}: {reason}")]
    ItemSyntax { line: usize, reason: String },
    #[error("backend cannot score log-likelihoods: {0}")]
    CapabilityMissing(String),
    #[error("no item could be scored")]
    NothingScored,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCItem {
    pub id: String,
    pub sentence: String,
    pub options: [String; 2],
    pub answer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Realized {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub chosen_index: usize,
    pub option_lls: [f64; 2],
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unscored {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Scored items only.
    pub total: u64,
    pub correct: u64,
    pub accuracy: f64,
    pub per_item: Vec<ItemResult>,
    #[serde(default)]
    pub unscored: Vec<Unscored>,
}

impl MCItem {
    pub fn new(id: &str, sentence: &str, options: [&str; 2], answer_index: usize) -> Result<Self, AccuracyError> {
        let item = MCItem {
            id: id.to_string(),
            sentence: sentence.to_string(),
            options: options.map(String::from),
            answer_index,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<(), AccuracyError> {
        let bad = |reason: &str| {
            Err(AccuracyError::MalformedItem {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        match self.sentence.matches(BLANK).count() {
            1 => {}
            0 => return bad("sentence has no blank"),
            _ => return bad("sentence has more than one blank"),
        }
        if self.options.iter().any(|o| o.trim().is_empty()) {
            return bad("empty option");
        }
        if self.options[0] == self.options[1] {
            return bad("options are identical");
        }
        if self.answer_index > 1 {
            return bad("answer_index must be 0 or 1");
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawItem {
    id: String,
    sentence: String,
    option1: String,
    option2: String,
    answer: String,
}

/// Reads `{"id", "sentence", "option1", "option2", "answer": "1"|"2"}` lines.
pub fn parse_items(reader: impl BufRead) -> Result<Vec<MCItem>, AccuracyError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let syntax = |reason: String| AccuracyError::ItemSyntax { line: i + 1, reason };
        let raw: RawItem = serde_json::from_str(&line).map_err(|e| syntax(e.to_string()))?;
        let answer_index = match raw.answer.trim() {
            "1" => 0,
            "2" => 1,
            other => return Err(syntax(format!("answer must be \"1\" or \"2\", got {other:?}"))),
        };
        out.push(MCItem::new(&raw.id, &raw.sentence, [&raw.option1, &raw.option2], answer_index)?);
    }
    Ok(out)
}

pub fn load_items(path: impl AsRef<Path>) -> Result<Vec<MCItem>, AccuracyError> {
    parse_items(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Splits the sentence at the blank: context is everything before it,
/// continuation is the option followed by everything after it.
pub fn realize_option(item: &MCItem, option_index: usize) -> Result<Realized, AccuracyError> {
    let mut parts = item.sentence.split(BLANK);
    let (before, after) = match (parts.next(), parts.next(), parts.next()) {
        (Some(b), Some(a), None) => (b, a),
        _ => {
            return Err(AccuracyError::MalformedItem {
                id: item.id.clone(),
                reason: "sentence must contain exactly one blank".into(),
            })
        }
    };
    let option = item.options.get(option_index).ok_or_else(|| AccuracyError::MalformedItem {
        id: item.id.clone(),
        reason: format!("no option {option_index}"),
    })?;
    Ok(Realized {
        context: before.to_string(),
        continuation: format!("{option}{after}"),
    })
}

/// Index of the larger log-likelihood, the first on a tie.
pub fn choose(lls: [f64; 2]) -> usize {
    usize::from(lls[1] > lls[0])
}

enum Scored {
    Done(ItemResult),
    Skipped(Unscored),
    Abort(String),
}

fn judge(item: &MCItem, lls: [Result<f64, BackendError>; 2]) -> Scored {
    let mut out = [0.0; 2];
    for (i, r) in lls.into_iter().enumerate() {
        match r {
            Ok(v) if v.is_finite() => out[i] = v,
            Ok(v) => {
                return Scored::Skipped(Unscored {
                    id: item.id.clone(),
                    reason: format!("option {} scored {v}", i + 1),
                })
            }
            Err(BackendError::CapabilityMissing(m)) => return Scored::Abort(m),
            Err(e) => {
                return Scored::Skipped(Unscored {
                    id: item.id.clone(),
                    reason: e.to_string(),
                })
            }
        }
    }
    let chosen = choose(out);
    Scored::Done(ItemResult {
        id: item.id.clone(),
        chosen_index: chosen,
        option_lls: out,
        correct: chosen == item.answer_index,
    })
}

fn requests(item: &MCItem) -> Result<[ScoreRequest; 2], AccuracyError> {
    let r = |i| {
        realize_option(item, i).map(|r| ScoreRequest {
            context: r.context,
            continuation: r.continuation,
        })
    };
    Ok([r(0)?, r(1)?])
}

fn assemble(scored: Vec<Scored>) -> Result<EvalResult, AccuracyError> {
    let mut per_item = Vec::new();
    let mut unscored = Vec::new();
    for s in scored {
        match s {
            Scored::Done(r) => per_item.push(r),
            Scored::Skipped(u) => unscored.push(u),
            Scored::Abort(m) => return Err(AccuracyError::CapabilityMissing(m)),
        }
    }
    if per_item.is_empty() {
        return Err(AccuracyError::NothingScored);
    }
    per_item.sort_by(|a, b| a.id.cmp(&b.id));
    unscored.sort_by(|a, b| a.id.cmp(&b.id));
    let total = per_item.len() as u64;
    let correct = per_item.iter().filter(|r| r.correct).count() as u64;
    Ok(EvalResult {
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        per_item,
        unscored,
    })
}

/// Scores every item through `backend`. Simulated backends score in
/// parallel; remote ones item by item.
pub async fn evaluate(items: &[MCItem], backend: &Backend) -> Result<EvalResult, AccuracyError> {
    match backend {
        Backend::Simulated(sim) => evaluate_with(items, sim, Execution::default()),
        Backend::Http(_) => {
            let mut scored = Vec::with_capacity(items.len());
            for item in items {
                let [a, b] = requests(item)?;
                let la = backend.score(&a).await;
                if let Err(BackendError::CapabilityMissing(m)) = &la {
                    return Err(AccuracyError::CapabilityMissing(m.clone()));
                }
                let lb = backend.score(&b).await;
                scored.push(judge(item, [la, lb]));
            }
            assemble(scored)
        }
    }
}

/// Synchronous evaluation against a simulated scorer.
pub fn evaluate_with(items: &[MCItem], sim: &SimBackend, exec: Execution) -> Result<EvalResult, AccuracyError> {
    let scored: Vec<Result<Scored, AccuracyError>> = exec.map(items, |item| {
        let [a, b] = requests(item)?;
        Ok(judge(item, [sim.score(&a), sim.score(&b)]))
    });
    assemble(scored.into_iter().collect::<Result<_, _>>()?)
}
