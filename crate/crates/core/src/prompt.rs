//! Per-slot continuous prompts.
//!
//! Each slot owns a matrix of seed vectors and a two-layer MLP
//! (`d_seed → mlp_hidden → d_model`, GELU in between). The MLP output rows are
//! the virtual-token embeddings that get prepended to the slot's input
//! sequence. Slots share no prompt parameters. Prompts enter at the input
//! embedding layer only; per-layer key/value prefixes are not implemented.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{bind_tensor, BindLog};
use crate::slots::SlotId;
use crate::tape::{Tape, Var, GELU_FORM};
use crate::tensor::Tensor;

/// Standard deviation of the seed initialization.
pub const SEED_INIT_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub enabled: bool,
    pub n_virtual: usize,
    pub d_seed: usize,
    pub mlp_hidden: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_virtual: 8,
            d_seed: 64,
            mlp_hidden: 128,
        }
    }
}

impl PromptConfig {
    /// Number of virtual tokens actually prepended.
    pub fn active_virtual(&self) -> usize {
        if self.enabled {
            self.n_virtual
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && (self.n_virtual == 0 || self.d_seed == 0 || self.mlp_hidden == 0) {
            return Err(Error::Config(
                "n_virtual, d_seed and mlp_hidden must be positive when prompts are enabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEntry {
    pub seed: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const ENTRY_FIELDS: [&str; 5] = ["seed", "w1", "b1", "w2", "b2"];

impl PromptEntry {
    pub fn init<R: Rng + ?Sized>(c: &PromptConfig, d_model: usize, rng: &mut R) -> Self {
        Self {
            seed: Tensor::randn(&[c.n_virtual, c.d_seed], SEED_INIT_STD, rng),
            w1: Tensor::randn(&[c.d_seed, c.mlp_hidden], INIT_STD, rng),
            b1: Tensor::zeros(&[c.mlp_hidden]),
            w2: Tensor::randn(&[c.mlp_hidden, d_model], INIT_STD, rng),
            b2: Tensor::zeros(&[d_model]),
        }
    }

    pub fn zeros(c: &PromptConfig, d_model: usize) -> Self {
        Self {
            seed: Tensor::zeros(&[c.n_virtual, c.d_seed]),
            w1: Tensor::zeros(&[c.d_seed, c.mlp_hidden]),
            b1: Tensor::zeros(&[c.mlp_hidden]),
            w2: Tensor::zeros(&[c.mlp_hidden, d_model]),
            b2: Tensor::zeros(&[d_model]),
        }
    }

    fn fields(&self) -> [&Tensor; 5] {
        [&self.seed, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.seed, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn numel(&self) -> usize {
        self.fields().iter().map(|t| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub seed: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBank {
    pub entries: BTreeMap<SlotId, PromptEntry>,
}

impl PromptBank {
    pub fn get(&self, slot: &SlotId) -> Result<&PromptEntry> {
        self.entries
            .get(slot)
            .ok_or_else(|| Error::UnknownSlot(slot.to_string()))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(PromptEntry::numel).sum()
    }

    pub(crate) fn named(&self) -> Vec<(SlotId, String, &Tensor)> {
        let mut out = Vec::new();
        for (slot, entry) in &self.entries {
            for (field, t) in ENTRY_FIELDS.iter().zip(entry.fields()) {
                out.push((slot.clone(), format!("prompt.{slot}.{field}"), t));
            }
        }
        out
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(SlotId, String, &mut Tensor)> {
        let mut out = Vec::new();
        for (slot, entry) in self.entries.iter_mut() {
            for (field, t) in ENTRY_FIELDS.iter().zip(entry.fields_mut()) {
                out.push((slot.clone(), format!("prompt.{slot}.{field}"), t));
            }
        }
        out
    }

    pub fn bind<'a>(
        &'a self,
        slot: &SlotId,
        tape: &mut Tape<'a>,
        trainable: bool,
        log: &mut BindLog,
    ) -> Result<PromptVars> {
        let entry = self.get(slot)?;
        let mut vars = ENTRY_FIELDS
            .iter()
            .zip(entry.fields())
            .map(|(field, t)| bind_tensor(tape, t, format!("prompt.{slot}.{field}"), trainable, log));
        let mut next = || vars.next().expect("five prompt fields");
        Ok(PromptVars {
            seed: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        })
    }
}

/// `MLP(seed)` row-wise: `[n_virtual × d_model]`.
pub fn materialize_prompts(tape: &mut Tape<'_>, vars: &PromptVars) -> Result<Var> {
    let h = tape.matmul(vars.seed, vars.w1)?;
    let h = tape.add_bias(h, vars.b1)?;
    let h = tape.gelu(h, GELU_FORM);
    let out = tape.matmul(h, vars.w2)?;
    tape.add_bias(out, vars.b2)
}

/// Eager form of [`materialize_prompts`] for one registered slot.
pub fn materialize_prompts_tensor(bank: &PromptBank, slot: &SlotId) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bank.bind(slot, &mut tape, false, &mut BindLog::default())?;
    let out = materialize_prompts(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Input sequence with the prompt prefix attached.
#[derive(Clone, Debug)]
pub struct Prepended {
    pub embeddings: Var,
    pub attn_mask: Vec<bool>,
    pub answer_mask: Vec<bool>,
}

/// Concatenates `prompts` (if any) in front of `input`. Prompt positions may
/// be attended to but can never be part of an answer.
pub fn prepend_prompts(
    tape: &mut Tape<'_>,
    prompts: Option<Var>,
    input: Var,
    attn_mask: &[bool],
    answer_mask: &[bool],
) -> Result<Prepended> {
    let Some(p) = prompts else {
        return Ok(Prepended {
            embeddings: input,
            attn_mask: attn_mask.to_vec(),
            answer_mask: answer_mask.to_vec(),
        });
    };
    let (ps, is) = (tape.value(p).shape().to_vec(), tape.value(input).shape().to_vec());
    if ps.len() != 2 || is.len() != 2 || ps[1] != is[1] {
        return Err(Error::Shape {
            op: "prepend_prompts",
            lhs: ps,
            rhs: is,
        });
    }
    let n = ps[0];
    let embeddings = tape.concat_rows(&[p, input])?;
    let mut attn = vec![true; n];
    attn.extend_from_slice(attn_mask);
    let mut answer = vec![false; n];
    answer.extend_from_slice(answer_mask);
    Ok(Prepended {
        embeddings,
        attn_mask: attn,
        answer_mask: answer,
    })
}
