//! Slot-level orchestration: input construction, decoding and the
//! post-processing rules that turn a decoded span into a slot filler.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::TweetExample;
use crate::error::{Error, Result};
use crate::filler::SlotFiller;
use crate::model::{Inference, ModelInput, ModelParams};
use crate::slots::{SlotKind, SlotRegistry, SlotSpec};
use crate::span_head::{decode_span, SpanPrediction};
use crate::tokenize::normalized_tokens;
use crate::vocab::{Vocab, CLS, SEP};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Spans with more tokens than this become `AUTHOR_OF_TWEET`.
    pub author_token_threshold: usize,
    /// Lowercased tokens that separate the items of a list answer.
    pub split_delimiters: Vec<String>,
    /// When false, a span with no chunk overlap still snaps to the best chunk.
    pub require_overlap: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            author_token_threshold: 8,
            split_delimiters: vec![",".into(), "and".into(), "or".into()],
            require_overlap: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.author_token_threshold == 0 {
            return Err(Error::Config("author_token_threshold must be at least 1".into()));
        }
        Ok(())
    }
}

/// Lays out `[CLS] Q [SEP] T [SEP]` for one slot question and tweet.
/// `max_len` is the room left after the prompt prefix.
pub fn build_input(slot: &SlotSpec, tweet: &TweetExample, vocab: &Vocab, max_len: usize) -> Result<ModelInput> {
    let question = normalized_tokens(&slot.question);
    let len = 3 + question.len() + tweet.tokens.len();
    if len > max_len {
        return Err(Error::Length {
            context: format!("tweet `{}` with slot {}", tweet.id, slot.id()),
            len,
            max: max_len,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend(question.iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    let tweet_offset = ids.len();
    ids.extend(tweet.tokens.iter().map(|t| vocab.id(&t.normalized())));
    ids.push(SEP);
    let tweet_len = tweet.tokens.len();
    let answer_mask = (0..len)
        .map(|i| i == 0 || (i >= tweet_offset && i < tweet_offset + tweet_len))
        .collect();
    Ok(ModelInput {
        ids,
        attn_mask: vec![true; len],
        answer_mask,
        tweet_offset,
        tweet_len,
    })
}

/// `|a ∩ b| / |a ∪ b|`, and 0 when both sets are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A candidate chunk as seen by the aligner.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkCandidate {
    /// Byte offset of the chunk in the tweet; used for tie-breaking.
    pub start: usize,
    pub tokens: BTreeSet<String>,
}

pub fn chunk_candidates(tweet: &TweetExample) -> Vec<ChunkCandidate> {
    (0..tweet.chunks.len())
        .map(|i| ChunkCandidate {
            start: tweet.chunks[i].start,
            tokens: tweet.chunk_tokens(i).into_iter().collect(),
        })
        .collect()
}

/// Index of the chunk with the highest Jaccard similarity to `pred_tokens`.
/// Ties go to the chunk starting earliest, then to the lower index. Returns
/// `None` when there are no chunks, or when nothing overlaps and
/// `require_overlap` is set.
pub fn align_to_chunks(pred_tokens: &[String], chunks: &[ChunkCandidate], require_overlap: bool) -> Option<usize> {
    let pred: BTreeSet<String> = pred_tokens.iter().map(|t| t.to_lowercase()).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in chunks.iter().enumerate() {
        let j = jaccard(&pred, &c.tokens);
        let better = match best {
            None => true,
            Some((b, bj)) => j > bj || (j == bj && c.start < chunks[b].start),
        };
        if better {
            best = Some((i, j));
        }
    }
    match best {
        Some((_, j)) if j == 0.0 && require_overlap => None,
        Some((i, _)) => Some(i),
        None => None,
    }
}

/// Outcome of the author rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpanOrAuthor {
    Span(SpanPrediction),
    Author,
}

/// Replaces spans longer than the threshold by the author label. Only valid
/// for `span_or_author` slots.
pub fn apply_author_rule(
    kind: SlotKind,
    pred: SpanPrediction,
    span_token_count: usize,
    config: &PipelineConfig,
) -> Result<SpanOrAuthor> {
    if kind != SlotKind::SpanOrAuthor {
        return Err(Error::Contract(format!(
            "author rule applied to a {kind:?} slot"
        )));
    }
    if span_token_count > config.author_token_threshold {
        Ok(SpanOrAuthor::Author)
    } else {
        Ok(SpanOrAuthor::Span(pred))
    }
}

/// Ranges of the non-empty segments between delimiter tokens.
pub fn split_ranges(tokens: &[String], config: &PipelineConfig) -> Vec<Range<usize>> {
    let is_delim = |t: &String| {
        config
            .split_delimiters
            .iter()
            .any(|d| d.eq_ignore_ascii_case(t))
    };
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if is_delim(t) {
            if start < i {
                out.push(start..i);
            }
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(start..tokens.len());
    }
    out
}

/// Splits a list answer at commas and conjunctions, dropping the delimiters
/// and any empty segments.
pub fn split_multi_span(tokens: &[String], config: &PipelineConfig) -> Vec<Vec<String>> {
    split_ranges(tokens, config)
        .into_iter()
        .map(|r| tokens[r].to_vec())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Unspecified,
}

/// Combines the two binary gender slots. Conflicting answers give
/// `Unspecified`.
pub fn resolve_gender(male: bool, female: bool) -> Gender {
    match (male, female) {
        (true, false) => Gender::Male,
        (false, true) => Gender::Female,
        _ => Gender::Unspecified,
    }
}

/// Turns raw model outputs for one slot into a filler.
pub fn postprocess(
    spec: &SlotSpec,
    tweet: &TweetExample,
    input: &ModelInput,
    inference: &Inference,
    config: &PipelineConfig,
) -> Result<SlotFiller> {
    if spec.kind == SlotKind::Binary {
        let [no, yes] = inference.binary_logits;
        return Ok(SlotFiller::Binary(yes > no));
    }
    let pred = decode_span(&inference.start_logits, &inference.end_logits, &input.answer_mask);
    if pred.is_missing() {
        return Ok(SlotFiller::Missing);
    }
    let (first, last) = match (input.tweet_token_index(pred.start), input.tweet_token_index(pred.end)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Contract(format!(
                "decoded span ({}, {}) lies outside the tweet",
                pred.start, pred.end
            )))
        }
    };
    if spec.kind == SlotKind::SpanOrAuthor {
        if let SpanOrAuthor::Author = apply_author_rule(spec.kind, pred, last - first + 1, config)? {
            return Ok(SlotFiller::AuthorOfTweet);
        }
    }
    let tokens: Vec<String> = tweet.tokens[first..=last].iter().map(|t| t.normalized()).collect();
    let candidates = chunk_candidates(tweet);
    let chunks = split_multi_span(&tokens, config)
        .iter()
        .filter_map(|frag| align_to_chunks(frag, &candidates, config.require_overlap))
        .collect::<Vec<_>>();
    Ok(SlotFiller::chunks(chunks))
}

/// Runs the model for one slot of one tweet.
pub fn predict_slot(
    model: &ModelParams,
    spec: &SlotSpec,
    tweet: &TweetExample,
    config: &PipelineConfig,
) -> Result<SlotFiller> {
    let input = build_input(spec, tweet, &model.vocab, model.config.max_input_len())?;
    let inference = model.infer(&input, &spec.id())?;
    postprocess(spec, tweet, &input, &inference, config)
}

/// Fillers for every registered slot of the tweet's event type.
pub fn predict_example(
    model: &ModelParams,
    registry: &SlotRegistry,
    tweet: &TweetExample,
    config: &PipelineConfig,
) -> Result<BTreeMap<String, SlotFiller>> {
    registry
        .for_event(tweet.event_type)
        .map(|spec| Ok((spec.name.clone(), predict_slot(model, spec, tweet, config)?)))
        .collect()
}

/// Copies of `corpus` whose gold labels are replaced by predictions, in
/// input order. Saved with `save_corpus` this is the predictions file.
pub fn predict_corpus(
    model: &ModelParams,
    registry: &SlotRegistry,
    corpus: &[TweetExample],
    config: &PipelineConfig,
) -> Result<Vec<TweetExample>> {
    corpus
        .iter()
        .map(|tweet| {
            let mut out = tweet.clone();
            out.gold = predict_example(model, registry, tweet, config)?;
            Ok(out)
        })
        .collect()
}

/// An event is identified when any slot has a non-missing filler.
pub fn classify_event(fillers: &BTreeMap<String, SlotFiller>) -> bool {
    fillers.values().any(SlotFiller::is_present)
}

/// Supervision for one training instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Input positions, end inclusive; `(0, 0)` means missing.
    Span { start: usize, end: usize },
    Binary(bool),
}

/// Gold target for `spec` on `tweet`. Multi-chunk gold is supervised with
/// the earliest chunk; the author label covers the whole tweet segment.
pub fn training_target(spec: &SlotSpec, tweet: &TweetExample, input: &ModelInput) -> Result<Target> {
    let gold = tweet
        .gold
        .get(&spec.name)
        .ok_or_else(|| Error::Contract(format!("tweet `{}` has no gold for {}", tweet.id, spec.id())))?;
    let missing = Target::Span { start: 0, end: 0 };
    Ok(match (spec.kind, gold) {
        (SlotKind::Binary, SlotFiller::Binary(b)) => Target::Binary(*b),
        (SlotKind::Binary, _) | (_, SlotFiller::Binary(_)) => {
            return Err(Error::Contract(format!(
                "gold for {} does not match its kind",
                spec.id()
            )))
        }
        (_, SlotFiller::Missing) => missing,
        (_, SlotFiller::AuthorOfTweet) if input.tweet_len == 0 => missing,
        (_, SlotFiller::AuthorOfTweet) => Target::Span {
            start: input.tweet_offset,
            end: input.tweet_offset + input.tweet_len - 1,
        },
        (_, SlotFiller::Chunks(idx)) => {
            let first = idx
                .iter()
                .map(|&i| &tweet.chunks[i])
                .min_by_key(|c| (c.start, c.end))
                .expect("chunk fillers are non-empty");
            Target::Span {
                start: input.tweet_offset + first.token_start,
                end: input.tweet_offset + first.token_end - 1,
            }
        }
    })
}
