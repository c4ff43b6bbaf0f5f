//! Adam fine-tuning over `(tweet, slot)` training instances.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TweetExample;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelInput, ModelParams, Trainable};
use crate::params::{BindLog, ParamGroup};
use crate::pipeline::{build_input, training_target, Target};
use crate::slots::{SlotId, SlotKind, SlotRegistry};
use crate::span_head::{decode_span, span_loss};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenize::normalized_tokens;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; infinite disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 8,
            batch_size: 8,
            seed: 0,
            freeze_encoder: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: f64::INFINITY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            encoder: !self.freeze_encoder,
            prompts: true,
            heads: true,
        }
    }
}

/// First and second moments per parameter name, plus the global step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

/// One bias-corrected Adam update.
///
/// Every trainable parameter needs a gradient in `grads`, except prompt
/// parameters of slots that took no part in the step: those are skipped
/// along with their moments. Frozen groups are never touched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &TrainConfig,
    trainable: Trainable,
) -> Result<()> {
    for (name, group, t) in params.named_tensors() {
        if !trainable.allows(&group) {
            continue;
        }
        match grads.get(&name) {
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                })
            }
            None if !matches!(group, ParamGroup::Prompt(_)) => {
                return Err(Error::Contract(format!("no gradient for trainable parameter `{name}`")))
            }
            _ => {}
        }
    }
    let scale = if config.grad_clip.is_finite() {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > config.grad_clip {
            config.grad_clip / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (name, group, p) in params.named_tensors_mut() {
        if !trainable.allows(&group) {
            continue;
        }
        let Some(g) = grads.get(&name) else { continue };
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = g * scale;
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// One supervised `(tweet, slot)` pair with its precomputed input.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub example: usize,
    pub slot: SlotId,
    pub kind: SlotKind,
    pub input: ModelInput,
    pub target: Target,
}

/// Every `(tweet, slot)` pair of the corpus, in corpus then registry order.
pub fn build_instances(
    corpus: &[TweetExample],
    registry: &SlotRegistry,
    vocab: &Vocab,
    config: &ModelConfig,
) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (example, tweet) in corpus.iter().enumerate() {
        for spec in registry.for_event(tweet.event_type) {
            let input = build_input(spec, tweet, vocab, config.max_input_len())?;
            let target = training_target(spec, tweet, &input)?;
            out.push(Instance {
                example,
                slot: spec.id(),
                kind: spec.kind,
                input,
                target,
            });
        }
    }
    Ok(out)
}

/// Vocabulary over the corpus tokens and every registry question.
pub fn build_vocab(corpus: &[TweetExample], registry: &SlotRegistry) -> Vocab {
    let tweet_tokens = corpus.iter().flat_map(TweetExample::normalized_tokens);
    let question_tokens = registry.slots().iter().flat_map(|s| normalized_tokens(&s.question));
    Vocab::build(tweet_tokens.chain(question_tokens))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub fn loss_log_to_jsonl(log: &[EpochLoss]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("loss record serializes") + "\n")
        .collect()
}

fn build_loss<'a>(
    tape: &mut Tape<'a>,
    params: &'a ModelParams,
    batch: &[&Instance],
    trainable: Trainable,
) -> Result<(Var, BindLog)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut slots: Vec<&SlotId> = batch.iter().map(|i| &i.slot).collect();
    slots.sort();
    slots.dedup();
    let bound = params.bind(tape, &slots, trainable)?;
    let mut total: Option<Var> = None;
    for inst in batch {
        let out = forward(tape, &bound, &params.config, &inst.input, &inst.slot)?;
        let loss = match inst.target {
            Target::Span { start, end } => span_loss(tape, out.start_logits, out.end_logits, start, end)?,
            Target::Binary(yes) => {
                let logits = tape.reshape(out.binary_logits, &[2])?;
                tape.cross_entropy(logits, usize::from(yes))?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    Ok((total.expect("batch is non-empty"), bound.log))
}

/// Summed span and binary losses over `batch`.
pub fn batch_loss(params: &ModelParams, batch: &[&Instance]) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = build_loss(&mut tape, params, batch, Trainable::NONE)?;
    Ok(tape.value(loss).item())
}

/// Loss of each instance on its own, in batch order.
pub fn instance_losses(params: &ModelParams, batch: &[&Instance]) -> Result<Vec<f64>> {
    batch.iter().map(|inst| batch_loss(params, &[inst])).collect()
}

/// [`batch_loss`] and its gradients by parameter name, for the groups
/// allowed by `trainable`. Bound parameters the loss does not reach get
/// zero gradients; prompts of slots outside the batch get none.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[&Instance],
    trainable: Trainable,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let (loss, log) = build_loss(&mut tape, params, batch, trainable)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let named = log
        .entries
        .iter()
        .map(|(name, var)| {
            let g = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(tape.value(*var).shape()));
            (name.clone(), g)
        })
        .collect();
    Ok((value, named))
}

pub struct Trainer {
    pub params: ModelParams,
    pub state: AdamState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params,
            state: AdamState::default(),
            config,
        })
    }

    /// Forward, backward and one Adam update on `batch`; returns the loss.
    pub fn step(&mut self, batch: &[&Instance]) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.params, batch, self.config.trainable())?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                batch: 0,
                loss,
            });
        }
        let trainable = self.config.trainable();
        adam_step(&mut self.params, &grads, &mut self.state, &self.config, trainable)?;
        Ok(loss)
    }

    /// Runs `config.epochs` epochs. `monitor` sees each epoch's record and
    /// the current parameters, and stops training early by returning false.
    pub fn run<F>(&mut self, instances: &[Instance], mut monitor: F) -> Result<Vec<EpochLoss>>
    where
        F: FnMut(&EpochLoss, &ModelParams) -> bool,
    {
        if instances.is_empty() {
            return Err(Error::Validation("no training instances".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut log = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
                let batch: Vec<&Instance> = idx.iter().map(|&i| &instances[i]).collect();
                let loss = self.step(&batch).map_err(|e| match e {
                    Error::Divergence { loss, .. } => Error::Divergence { epoch, batch: b, loss },
                    other => other,
                })?;
                total += loss;
            }
            let record = EpochLoss {
                epoch,
                mean_loss: total / instances.len() as f64,
            };
            let go_on = monitor(&record, &self.params);
            log.push(record);
            if !go_on {
                break;
            }
        }
        Ok(log)
    }
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub losses: Vec<EpochLoss>,
}

/// Trains from `initial` or from a fresh model built on the corpus
/// vocabulary and seeded with `config.seed`.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    corpus: &[TweetExample],
    registry: &SlotRegistry,
    initial: Option<ModelParams>,
) -> Result<TrainOutput> {
    train_with(config, model_config, corpus, registry, initial, |_, _| true)
}

pub fn train_with<F>(
    config: &TrainConfig,
    model_config: &ModelConfig,
    corpus: &[TweetExample],
    registry: &SlotRegistry,
    initial: Option<ModelParams>,
    monitor: F,
) -> Result<TrainOutput>
where
    F: FnMut(&EpochLoss, &ModelParams) -> bool,
{
    if corpus.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let params = match initial {
        Some(p) => {
            crate::checkpoint::check_compatible(&p, model_config)?;
            p
        }
        None => ModelParams::init(
            model_config.clone(),
            build_vocab(corpus, registry),
            &registry.ids(),
            config.seed,
        )?,
    };
    let instances = build_instances(corpus, registry, &params.vocab, &params.config)?;
    let mut trainer = Trainer::new(params, config.clone())?;
    let losses = trainer.run(&instances, monitor)?;
    Ok(TrainOutput {
        params: trainer.params,
        losses,
    })
}

/// Fraction of span-kind instances whose decoded `(start, end)` equals the
/// training target exactly (a missing target counts as `(0, 0)`).
pub fn span_accuracy(params: &ModelParams, instances: &[Instance]) -> Result<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for inst in instances {
        let Target::Span { start, end } = inst.target else { continue };
        let out = params.infer(&inst.input, &inst.slot)?;
        let pred = decode_span(&out.start_logits, &out.end_logits, &inst.input.answer_mask);
        total += 1;
        if (pred.start, pred.end) == (start, end) {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::Validation("no span instances to score".into()));
    }
    Ok(hit as f64 / total as f64)
}
