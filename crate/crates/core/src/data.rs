//! Chunks, QA examples and their JSON-lines files.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IntraError, Result};
use crate::io_util::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: u64,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub oracle_chunk_ids: Vec<u64>,
}

impl QAExample {
    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() {
            return Err(IntraError::EmptyInput(format!(
                "question of example {}",
                self.id
            )));
        }
        if self.answer.is_empty() {
            return Err(IntraError::EmptyInput(format!(
                "answer of example {}",
                self.id
            )));
        }
        if self.oracle_chunk_ids.is_empty() {
            return Err(IntraError::EmptyInput(format!(
                "oracle set of example {}",
                self.id
            )));
        }
        Ok(())
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    parse_jsonl(&text)
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| IntraError::Malformed(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items)?.as_bytes())
}

/// Load a dataset and check every example against the set of known chunk ids.
pub fn load_dataset(path: &Path, known_ids: &HashSet<u64>) -> Result<Vec<QAExample>> {
    let examples: Vec<QAExample> = read_jsonl(path)?;
    if examples.is_empty() {
        return Err(IntraError::EmptyInput(format!(
            "dataset {}",
            path.display()
        )));
    }
    for ex in &examples {
        ex.validate()?;
        if let Some(&id) = ex
            .oracle_chunk_ids
            .iter()
            .find(|id| !known_ids.contains(id))
        {
            return Err(IntraError::UnknownChunk(id));
        }
    }
    Ok(examples)
}

pub fn check_unique_ids(chunks: &[Chunk]) -> Result<()> {
    let mut seen = HashSet::with_capacity(chunks.len());
    for c in chunks {
        if !seen.insert(c.chunk_id) {
            return Err(IntraError::DuplicateChunk(c.chunk_id));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let ex = vec![QAExample {
            id: 3,
            question: vec![5, 6],
            answer: vec![7],
            oracle_chunk_ids: vec![1, 2],
        }];
        let text = to_jsonl(&ex).unwrap();
        assert_eq!(
            text,
            "{\"id\":3,\"question\":[5,6],\"answer\":[7],\"oracle_chunk_ids\":[1,2]}\n"
        );
        assert_eq!(parse_jsonl::<QAExample>(&text).unwrap(), ex);
    }

    #[test]
    fn malformed_line_is_reported() {
        let err = parse_jsonl::<Chunk>("{\"chunk_id\":1,\"tokens\":[1]}\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let c = |id| Chunk {
            chunk_id: id,
            tokens: vec![4],
        };
        assert!(check_unique_ids(&[c(1), c(2)]).is_ok());
        assert!(matches!(
            check_unique_ids(&[c(1), c(1)]),
            Err(IntraError::DuplicateChunk(1))
        ));
    }
}
