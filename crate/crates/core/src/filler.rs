use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::slots::SlotKind;

pub const AUTHOR_LABEL: &str = "AUTHOR_OF_TWEET";
pub const YES_LABEL: &str = "YES";
pub const NO_LABEL: &str = "NO";
const CHUNK_PREFIX: &str = "chunk:";

/// The answer to one slot question for one tweet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotFiller {
    /// Non-empty, duplicate-free chunk indices.
    Chunks(Vec<usize>),
    AuthorOfTweet,
    Binary(bool),
    Missing,
}

/// Unit of matching for precision and recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FillerItem {
    Chunk(usize),
    Author,
    Yes,
}

impl SlotFiller {
    /// Builds a `Chunks` filler, mapping an empty list to `Missing` and
    /// dropping repeated indices while keeping first-seen order.
    pub fn chunks(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut seen = BTreeSet::new();
        let list: Vec<usize> = indices.into_iter().filter(|i| seen.insert(*i)).collect();
        if list.is_empty() {
            SlotFiller::Missing
        } else {
            SlotFiller::Chunks(list)
        }
    }

    /// Whether the filler marks the event as present: anything except
    /// `Missing` and a binary "no".
    pub fn is_present(&self) -> bool {
        match self {
            SlotFiller::Missing | SlotFiller::Binary(false) => false,
            SlotFiller::Chunks(_) | SlotFiller::AuthorOfTweet | SlotFiller::Binary(true) => true,
        }
    }

    pub fn items(&self) -> BTreeSet<FillerItem> {
        match self {
            SlotFiller::Chunks(c) => c.iter().map(|&i| FillerItem::Chunk(i)).collect(),
            SlotFiller::AuthorOfTweet => [FillerItem::Author].into(),
            SlotFiller::Binary(true) => [FillerItem::Yes].into(),
            SlotFiller::Binary(false) | SlotFiller::Missing => BTreeSet::new(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            SlotFiller::Chunks(c) => c.iter().map(|i| format!("{CHUNK_PREFIX}{i}")).collect(),
            SlotFiller::AuthorOfTweet => vec![AUTHOR_LABEL.into()],
            SlotFiller::Binary(true) => vec![YES_LABEL.into()],
            SlotFiller::Binary(false) => vec![NO_LABEL.into()],
            SlotFiller::Missing => vec![],
        }
    }

    /// Parses file labels for a slot of the given kind. `slot` only feeds
    /// error messages.
    pub fn from_labels(labels: &[String], kind: SlotKind, n_chunks: usize, slot: &str) -> Result<Self> {
        let bad = |msg: String| Error::Validation(format!("slot `{slot}`: {msg}"));
        if kind == SlotKind::Binary {
            return match labels {
                [] => Ok(SlotFiller::Binary(false)),
                [l] if l == YES_LABEL => Ok(SlotFiller::Binary(true)),
                [l] if l == NO_LABEL => Ok(SlotFiller::Binary(false)),
                _ => Err(bad(format!("binary slot needs a single YES or NO, got {labels:?}"))),
            };
        }
        match labels {
            [] => return Ok(SlotFiller::Missing),
            [l] if l == AUTHOR_LABEL => {
                return if kind == SlotKind::SpanOrAuthor {
                    Ok(SlotFiller::AuthorOfTweet)
                } else {
                    Err(bad(format!("{AUTHOR_LABEL} is only valid for author-capable slots")))
                };
            }
            _ => {}
        }
        let mut indices = Vec::with_capacity(labels.len());
        for l in labels {
            let idx: usize = l
                .strip_prefix(CHUNK_PREFIX)
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| bad(format!("expected `chunk:<i>`, got `{l}`")))?;
            if idx >= n_chunks {
                return Err(bad(format!(
                    "references chunk {idx} but the tweet has {n_chunks} chunks"
                )));
            }
            if indices.contains(&idx) {
                return Err(bad(format!("chunk {idx} listed twice")));
            }
            indices.push(idx);
        }
        Ok(SlotFiller::Chunks(indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn label_round_trip_per_kind() {
        let cases = [
            (SlotFiller::Chunks(vec![2, 0]), SlotKind::Span),
            (SlotFiller::Missing, SlotKind::Span),
            (SlotFiller::AuthorOfTweet, SlotKind::SpanOrAuthor),
            (SlotFiller::Binary(true), SlotKind::Binary),
            (SlotFiller::Binary(false), SlotKind::Binary),
        ];
        for (f, kind) in cases {
            assert_eq!(SlotFiller::from_labels(&f.labels(), kind, 3, "s").unwrap(), f);
        }
    }

    #[test]
    fn invalid_labels() {
        let err = SlotFiller::from_labels(&l(&["chunk:3"]), SlotKind::Span, 3, "employer").unwrap_err();
        assert!(err.to_string().contains("employer"));
        assert!(SlotFiller::from_labels(&l(&[AUTHOR_LABEL]), SlotKind::Span, 3, "s").is_err());
        assert!(SlotFiller::from_labels(&l(&["YES"]), SlotKind::Span, 3, "s").is_err());
        assert!(SlotFiller::from_labels(&l(&["chunk:1", "chunk:1"]), SlotKind::Span, 3, "s").is_err());
        assert!(SlotFiller::from_labels(&l(&["chunk:1"]), SlotKind::Binary, 3, "s").is_err());
        assert_eq!(
            SlotFiller::from_labels(&[], SlotKind::Binary, 0, "s").unwrap(),
            SlotFiller::Binary(false)
        );
    }

    #[test]
    fn chunks_constructor_dedups() {
        assert_eq!(SlotFiller::chunks([3, 1, 3]), SlotFiller::Chunks(vec![3, 1]));
        assert_eq!(SlotFiller::chunks([]), SlotFiller::Missing);
    }
}
