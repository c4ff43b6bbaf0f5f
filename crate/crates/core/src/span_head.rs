//! Start/end span scoring and decoding, plus the yes/no head used by binary
//! slots. Position 0 of the input is `[CLS]`; the span `(0, 0)` means the
//! slot is missing.

use rand::Rng;

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{bind_tensor, BindLog};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Start and end projections. There are no biases: a constant added to
/// every start (or end) score changes neither the loss nor the decoded span.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanHeadParams {
    pub w_start: Tensor,
    pub w_end: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SpanHeadVars {
    pub w_start: Var,
    pub w_end: Var,
}

impl SpanHeadParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        Self {
            w_start: Tensor::randn(&[d_model, 1], INIT_STD, rng),
            w_end: Tensor::randn(&[d_model, 1], INIT_STD, rng),
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            w_start: Tensor::zeros(&[d_model, 1]),
            w_end: Tensor::zeros(&[d_model, 1]),
        }
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("span_head.w_start".into(), &self.w_start),
            ("span_head.w_end".into(), &self.w_end),
        ]
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("span_head.w_start".into(), &mut self.w_start),
            ("span_head.w_end".into(), &mut self.w_end),
        ]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool, log: &mut BindLog) -> SpanHeadVars {
        let v: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(n, t)| bind_tensor(tape, t, n, trainable, log))
            .collect();
        SpanHeadVars {
            w_start: v[0],
            w_end: v[1],
        }
    }
}

/// Two-way classifier over the `[CLS]` hidden state (index 1 = yes).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryHeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BinaryHeadVars {
    pub w: Var,
    pub b: Var,
}

impl BinaryHeadParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor::randn(&[d_model, 2], INIT_STD, rng),
            b: Tensor::zeros(&[2]),
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            w: Tensor::zeros(&[d_model, 2]),
            b: Tensor::zeros(&[2]),
        }
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("binary_head.w".into(), &self.w), ("binary_head.b".into(), &self.b)]
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("binary_head.w".into(), &mut self.w),
            ("binary_head.b".into(), &mut self.b),
        ]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool, log: &mut BindLog) -> BinaryHeadVars {
        BinaryHeadVars {
            w: bind_tensor(tape, &self.w, "binary_head.w".into(), trainable, log),
            b: bind_tensor(tape, &self.b, "binary_head.b".into(), trainable, log),
        }
    }
}

/// Start and end scores for every position of `hidden[L × d]`, each `[L]`.
pub fn span_logits(tape: &mut Tape<'_>, hidden: Var, head: &SpanHeadVars) -> Result<(Var, Var)> {
    let len = tape.value(hidden).shape()[0];
    let project = |tape: &mut Tape<'_>, w: Var| -> Result<Var> {
        let s = tape.matmul(hidden, w)?;
        tape.reshape(s, &[len])
    };
    let start = project(tape, head.w_start)?;
    let end = project(tape, head.w_end)?;
    Ok((start, end))
}

/// `CE(start, gold_start) + CE(end, gold_end)`.
pub fn span_loss(
    tape: &mut Tape<'_>,
    start_logits: Var,
    end_logits: Var,
    gold_start: usize,
    gold_end: usize,
) -> Result<Var> {
    if gold_start > gold_end {
        return Err(Error::Index {
            context: "span_loss gold start after end",
            index: gold_start,
            len: gold_end,
        });
    }
    let s = tape.cross_entropy(start_logits, gold_start)?;
    let e = tape.cross_entropy(end_logits, gold_end)?;
    tape.add(s, e)
}

/// Yes/no logits `[1 × 2]` from the `[CLS]` row.
pub fn binary_logits(tape: &mut Tape<'_>, cls: Var, head: &BinaryHeadVars) -> Result<Var> {
    let z = tape.matmul(cls, head.w)?;
    tape.add_bias(z, head.b)
}

/// A decoded answer span over input positions, end inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

impl SpanPrediction {
    pub fn is_missing(&self) -> bool {
        self.start == 0 && self.end == 0
    }

    /// Number of input positions covered, endpoints included.
    pub fn token_count(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Best-scoring span under `start[s] + end[e]`.
///
/// Candidates are `(0, 0)` (missing) and every `(s, e)` with `1 ≤ s ≤ e`
/// and both endpoints answer-valid. Ties go to the lexicographically
/// smallest `(s, e)`. Runs in O(L): for each end position it keeps the
/// earliest best start seen so far.
pub fn decode_span(start_logits: &[f64], end_logits: &[f64], answer_valid: &[bool]) -> SpanPrediction {
    let len = start_logits.len().min(end_logits.len()).min(answer_valid.len());
    let mut best = SpanPrediction {
        start: 0,
        end: 0,
        score: match (start_logits.first(), end_logits.first()) {
            (Some(s), Some(e)) => s + e,
            _ => f64::NEG_INFINITY,
        },
    };
    let mut best_start: Option<usize> = None;
    for e in 1..len {
        if answer_valid[e] && best_start.is_none_or(|b| start_logits[e] > start_logits[b]) {
            best_start = Some(e);
        }
        let Some(s) = best_start else { continue };
        if !answer_valid[e] {
            continue;
        }
        let score = start_logits[s] + end_logits[e];
        if score > best.score || (score == best.score && s < best.start) {
            best = SpanPrediction { start: s, end: e, score };
        }
    }
    best
}
