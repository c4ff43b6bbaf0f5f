//! Tweet examples and the line-delimited corpus format.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id":"t1","text":"...","event_type":"tested_positive",
//!  "chunks":[{"start":0,"end":8}],"gold":{"who":["chunk:0"],"gender_male":["YES"]}}
//! ```
//!
//! Chunk offsets are UTF-8 byte offsets and must fall on token boundaries.
//! Gold labels are `chunk:<i>`, `AUTHOR_OF_TWEET`, `YES` or `NO`; a slot that
//! is absent or has an empty list is missing (binary slots: `NO`).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filler::SlotFiller;
use crate::slots::{EventType, SlotRegistry};
use crate::tokenize::{tokenize, Token};

/// An annotator-provided candidate answer span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub token_start: usize,
    /// Exclusive.
    pub token_end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TweetExample {
    pub id: String,
    pub text: String,
    pub event_type: EventType,
    pub tokens: Vec<Token>,
    pub chunks: Vec<Chunk>,
    /// One filler per registered slot of `event_type`, keyed by slot name.
    pub gold: BTreeMap<String, SlotFiller>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRecord {
    pub start: usize,
    pub end: usize,
}

/// On-disk form of a [`TweetExample`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub event_type: EventType,
    pub chunks: Vec<ChunkRecord>,
    #[serde(default)]
    pub gold: BTreeMap<String, Vec<String>>,
}

impl TweetExample {
    pub fn from_record(record: Record, registry: &SlotRegistry) -> Result<Self> {
        let tokens = tokenize(&record.text);
        let ctx = |msg: String| Error::Validation(format!("tweet `{}`: {msg}", record.id));
        let mut chunks = Vec::with_capacity(record.chunks.len());
        for (i, c) in record.chunks.iter().enumerate() {
            let token_start = tokens.iter().position(|t| t.start == c.start);
            let token_end = tokens.iter().position(|t| t.end == c.end).map(|e| e + 1);
            match (token_start, token_end) {
                (Some(s), Some(e)) if c.start < c.end && s < e => chunks.push(Chunk {
                    start: c.start,
                    end: c.end,
                    token_start: s,
                    token_end: e,
                }),
                _ => {
                    return Err(ctx(format!(
                        "chunk {i} [{}, {}) does not align with token boundaries",
                        c.start, c.end
                    )))
                }
            }
        }
        for name in record.gold.keys() {
            if registry.find(record.event_type, name).is_none() {
                return Err(ctx(format!(
                    "slot `{name}` is not registered for {}",
                    record.event_type
                )));
            }
        }
        let mut gold = BTreeMap::new();
        for spec in registry.for_event(record.event_type) {
            let labels = record.gold.get(&spec.name).map(Vec::as_slice).unwrap_or(&[]);
            let filler = SlotFiller::from_labels(labels, spec.kind, chunks.len(), &spec.name)
                .map_err(|e| ctx(e.to_string()))?;
            gold.insert(spec.name.clone(), filler);
        }
        Ok(Self {
            id: record.id,
            text: record.text,
            event_type: record.event_type,
            tokens,
            chunks,
            gold,
        })
    }

    pub fn to_record(&self) -> Record {
        self.record_with(&self.gold)
    }

    /// Record carrying `fillers` in the gold position, as used for
    /// prediction files.
    pub fn record_with(&self, fillers: &BTreeMap<String, SlotFiller>) -> Record {
        Record {
            id: self.id.clone(),
            text: self.text.clone(),
            event_type: self.event_type,
            chunks: self
                .chunks
                .iter()
                .map(|c| ChunkRecord {
                    start: c.start,
                    end: c.end,
                })
                .collect(),
            gold: fillers.iter().map(|(k, v)| (k.clone(), v.labels())).collect(),
        }
    }

    /// Lowercased tokens of chunk `i`.
    pub fn chunk_tokens(&self, i: usize) -> Vec<String> {
        let c = &self.chunks[i];
        self.tokens[c.token_start..c.token_end]
            .iter()
            .map(Token::normalized)
            .collect()
    }

    pub fn normalized_tokens(&self) -> Vec<String> {
        self.tokens.iter().map(Token::normalized).collect()
    }
}

pub fn parse_corpus(text: &str, registry: &SlotRegistry) -> Result<Vec<TweetExample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Validation(format!(
                "line {}: duplicate tweet id `{}`",
                i + 1,
                record.id
            )));
        }
        let ex = TweetExample::from_record(record, registry).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {}: {msg}", i + 1)),
            other => other,
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, registry: &SlotRegistry) -> Result<Vec<TweetExample>> {
    parse_corpus(&std::fs::read_to_string(path)?, registry)
}

pub fn records_to_jsonl<'r>(records: impl IntoIterator<Item = &'r Record>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn corpus_to_jsonl(examples: &[TweetExample]) -> String {
    let records: Vec<Record> = examples.iter().map(TweetExample::to_record).collect();
    records_to_jsonl(&records)
}

pub fn save_corpus(path: impl AsRef<Path>, examples: &[TweetExample]) -> Result<()> {
    std::fs::write(path, corpus_to_jsonl(examples))?;
    Ok(())
}
