use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::metrics::{aggregate, MetricsError};
use crate::text::word_count;

/// One dialogue: the user prompts in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub conversation_count: u64,
    pub turn_count: u64,
    pub prompt_word_mean: f64,
    pub prompt_word_std: f64,
    pub prompt_word_min: u64,
    pub prompt_word_max: u64,
}

/// Reads a JSON-Lines dataset: one `{"id", "turns": [..]}` object per line.
/// Blank lines are skipped; other fields are ignored.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Conversation>, BenchError> {
    let f = std::fs::File::open(path)?;
    parse_dataset(std::io::BufReader::new(f))
}

pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<Conversation>, BenchError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation =
            serde_json::from_str(&line).map_err(|e| BenchError::DatasetSyntax {
                line: lineno,
                reason: e.to_string(),
            })?;
        if conv.turns.is_empty() {
            return Err(BenchError::NoTurns(conv.id));
        }
        if let Some(t) = conv.turns.iter().position(|t| t.trim().is_empty()) {
            return Err(BenchError::EmptyPrompt {
                id: conv.id,
                turn: t + 1,
            });
        }
        if !ids.insert(conv.id.clone()) {
            return Err(BenchError::DuplicateConversation(conv.id));
        }
        out.push(conv);
    }
    Ok(out)
}

/// Word-count statistics over every prompt in the dataset.
pub fn dataset_stats(convs: &[Conversation]) -> Result<DatasetStats, BenchError> {
    let words: Vec<f64> = convs
        .iter()
        .flat_map(|c| c.turns.iter().map(|t| word_count(t) as f64))
        .collect();
    if words.is_empty() {
        return Err(MetricsError::EmptySample.into());
    }
    let s = aggregate(&words)?;
    Ok(DatasetStats {
        conversation_count: convs.len() as u64,
        turn_count: words.len() as u64,
        prompt_word_mean: s.mean,
        prompt_word_std: s.std,
        prompt_word_min: s.min as u64,
        prompt_word_max: s.max as u64,
    })
}
