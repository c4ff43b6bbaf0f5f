//! The complete trainable state and the per-instance forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed_sequence, encode, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::params::{BindLog, ParamGroup};
use crate::prompt::{materialize_prompts, prepend_prompts, PromptBank, PromptConfig, PromptEntry};
use crate::slots::SlotId;
use crate::span_head::{
    binary_logits, span_logits, BinaryHeadParams, BinaryHeadVars, SpanHeadParams, SpanHeadVars,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate()?;
        if self.prompt.active_virtual() >= self.encoder.max_seq_len {
            return Err(Error::Config(format!(
                "n_virtual ({}) leaves no room in max_seq_len ({})",
                self.prompt.n_virtual, self.encoder.max_seq_len
            )));
        }
        Ok(())
    }

    /// Longest `[CLS] Q [SEP] T [SEP]` input that fits next to the prompts.
    pub fn max_input_len(&self) -> usize {
        self.encoder.max_seq_len - self.prompt.active_virtual()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub encoder: EncoderParams,
    pub prompts: PromptBank,
    pub span_head: SpanHeadParams,
    pub binary_head: BinaryHeadParams,
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub prompts: bool,
    pub heads: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        prompts: true,
        heads: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        prompts: false,
        heads: false,
    };

    pub fn allows(&self, group: &ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Prompt(_) => self.prompts,
            ParamGroup::SpanHead | ParamGroup::BinaryHead => self.heads,
        }
    }
}

impl ModelParams {
    /// Fresh parameters. `vocab` fixes `encoder.vocab_size`; one prompt entry
    /// is created per slot when prompts are enabled.
    pub fn init(mut config: ModelConfig, vocab: Vocab, slots: &[SlotId], seed: u64) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&config.encoder, &mut rng);
        let d = config.encoder.d_model;
        let span_head = SpanHeadParams::init(d, &mut rng);
        let binary_head = BinaryHeadParams::init(d, &mut rng);
        let mut prompts = PromptBank::default();
        if config.prompt.enabled {
            let mut ordered: Vec<&SlotId> = slots.iter().collect();
            ordered.sort();
            ordered.dedup();
            for slot in ordered {
                // Each slot draws from its own stream so adding a slot does
                // not perturb the others.
                let mut slot_rng = ChaCha8Rng::seed_from_u64(seed);
                slot_rng.set_stream(stream_for(slot));
                prompts
                    .entries
                    .insert(slot.clone(), PromptEntry::init(&config.prompt, d, &mut slot_rng));
            }
        }
        Ok(Self {
            config,
            vocab,
            encoder,
            prompts,
            span_head,
            binary_head,
        })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(mut config: ModelConfig, vocab: Vocab, slots: &[SlotId]) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.validate()?;
        let mut params = Self::init(config, vocab, slots, 0)?;
        for (_, _, t) in params.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(params)
    }

    pub fn prompt_slots(&self) -> Vec<SlotId> {
        self.prompts.entries.keys().cloned().collect()
    }

    /// Every parameter tensor in a fixed order: encoder, span head, binary
    /// head, then prompt entries by slot.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out: Vec<(String, ParamGroup, &Tensor)> = Vec::new();
        out.extend(self.encoder.named().into_iter().map(|(n, t)| (n, ParamGroup::Encoder, t)));
        out.extend(self.span_head.named().into_iter().map(|(n, t)| (n, ParamGroup::SpanHead, t)));
        out.extend(self.binary_head.named().into_iter().map(|(n, t)| (n, ParamGroup::BinaryHead, t)));
        out.extend(
            self.prompts
                .named()
                .into_iter()
                .map(|(slot, n, t)| (n, ParamGroup::Prompt(slot), t)),
        );
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor)> {
        let mut out: Vec<(String, ParamGroup, &mut Tensor)> = Vec::new();
        out.extend(self.encoder.named_mut().into_iter().map(|(n, t)| (n, ParamGroup::Encoder, t)));
        out.extend(self.span_head.named_mut().into_iter().map(|(n, t)| (n, ParamGroup::SpanHead, t)));
        out.extend(
            self.binary_head
                .named_mut()
                .into_iter()
                .map(|(n, t)| (n, ParamGroup::BinaryHead, t)),
        );
        out.extend(
            self.prompts
                .named_mut()
                .into_iter()
                .map(|(slot, n, t)| (n, ParamGroup::Prompt(slot), t)),
        );
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.numel()).sum()
    }

    /// Puts the shared parameters and the prompt entries of `slots` on
    /// `tape`. Only groups allowed by `trainable` record gradients.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, slots: &[&SlotId], trainable: Trainable) -> Result<BoundModel> {
        let mut log = BindLog::default();
        let encoder = self.encoder.bind(tape, trainable.encoder, &mut log);
        let span_head = self.span_head.bind(tape, trainable.heads, &mut log);
        let binary_head = self.binary_head.bind(tape, trainable.heads, &mut log);
        let mut prompts = BTreeMap::new();
        if self.config.prompt.enabled {
            for &slot in slots {
                if !prompts.contains_key(slot) {
                    let vars = self.prompts.bind(slot, tape, trainable.prompts, &mut log)?;
                    prompts.insert(slot.clone(), vars);
                }
            }
        }
        Ok(BoundModel {
            encoder,
            span_head,
            binary_head,
            prompts,
            log,
        })
    }

    /// Runs the model without recording gradients.
    pub fn infer(&self, input: &ModelInput, slot: &SlotId) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &[slot], Trainable::NONE)?;
        let out = forward(&mut tape, &bound, &self.config, input, slot)?;
        let b = tape.value(out.binary_logits).data();
        Ok(Inference {
            start_logits: tape.value(out.start_logits).data().to_vec(),
            end_logits: tape.value(out.end_logits).data().to_vec(),
            binary_logits: [b[0], b[1]],
        })
    }
}

fn stream_for(slot: &SlotId) -> u64 {
    // FNV-1a over the slot id; only needs to be stable and well spread.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in slot.to_string().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub struct BoundModel {
    pub encoder: EncoderVars,
    pub span_head: SpanHeadVars,
    pub binary_head: BinaryHeadVars,
    pub prompts: BTreeMap<SlotId, crate::prompt::PromptVars>,
    /// Trainable parameters that were bound, by name.
    pub log: BindLog,
}

/// A `[CLS] Q [SEP] T [SEP]` input ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub attn_mask: Vec<bool>,
    /// True at `[CLS]` and at tweet-token positions only.
    pub answer_mask: Vec<bool>,
    /// Input position of the first tweet token.
    pub tweet_offset: usize,
    pub tweet_len: usize,
}

impl ModelInput {
    /// Tweet-token index of an input position, if it lies in the tweet.
    pub fn tweet_token_index(&self, pos: usize) -> Option<usize> {
        (pos >= self.tweet_offset && pos < self.tweet_offset + self.tweet_len)
            .then(|| pos - self.tweet_offset)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct ForwardOut {
    /// `[L]` over input positions (prompt positions stripped).
    pub start_logits: Var,
    pub end_logits: Var,
    /// `[1 × 2]`.
    pub binary_logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    pub binary_logits: [f64; 2],
}

/// Prompts → encoder → heads for one `(slot, tweet)` input.
pub fn forward(
    tape: &mut Tape<'_>,
    model: &BoundModel,
    config: &ModelConfig,
    input: &ModelInput,
    slot: &SlotId,
) -> Result<ForwardOut> {
    let n_virtual = config.prompt.active_virtual();
    let embs = embed_sequence(tape, &model.encoder, &config.encoder, &input.ids, n_virtual)?;
    let prompts = if n_virtual > 0 {
        let vars = model
            .prompts
            .get(slot)
            .ok_or_else(|| Error::UnknownSlot(slot.to_string()))?;
        Some(materialize_prompts(tape, vars)?)
    } else {
        None
    };
    let pre = prepend_prompts(tape, prompts, embs, &input.attn_mask, &input.answer_mask)?;
    let hidden = encode(tape, pre.embeddings, &pre.attn_mask, &model.encoder, &config.encoder)?;
    let hidden = tape.slice_rows(hidden, n_virtual..n_virtual + input.len())?;
    let (start_logits, end_logits) = span_logits(tape, hidden, &model.span_head)?;
    let cls = tape.slice_rows(hidden, 0..1)?;
    let binary_logits = binary_logits(tape, cls, &model.binary_head)?;
    Ok(ForwardOut {
        start_logits,
        end_logits,
        binary_logits,
    })
}
