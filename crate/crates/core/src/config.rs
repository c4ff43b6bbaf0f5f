//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Every key is optional and
//! falls back to the default listed in [`KEYS`]. Unknown and repeated keys
//! are errors. `vocab_size` is not a key: it always comes from the corpus.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, NormOrder};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;
use crate::prompt::PromptConfig;
use crate::trainer::TrainConfig;

/// Accepted keys with their defaults.
pub const KEYS: &[(&str, &str)] = &[
    ("d_model", "64"),
    ("n_layers", "2"),
    ("n_heads", "4"),
    ("d_ff", "256"),
    ("max_seq_len", "128"),
    ("layer_norm_eps", "1e-5"),
    ("norm_order", "post"),
    ("prompts_enabled", "true"),
    ("n_virtual", "8"),
    ("d_seed", "64"),
    ("mlp_hidden", "128"),
    ("lr", "1e-3"),
    ("epochs", "8"),
    ("batch_size", "8"),
    ("seed", "0"),
    ("freeze_encoder", "false"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("eps", "1e-8"),
    ("grad_clip", "inf"),
    ("author_token_threshold", "8"),
    ("split_delimiters", ", and or"),
    ("require_overlap", "true"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value `{value}` for `{key}`"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("`{key}` must be true or false, got `{value}`"),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key `{key}`"),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("`{key}` set twice"),
                });
            }
            config.set(line, key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<()> {
        let e = &mut self.encoder;
        let p = &mut self.prompt;
        let t = &mut self.train;
        match key {
            "d_model" => e.d_model = parse_value(line, key, value)?,
            "n_layers" => e.n_layers = parse_value(line, key, value)?,
            "n_heads" => e.n_heads = parse_value(line, key, value)?,
            "d_ff" => e.d_ff = parse_value(line, key, value)?,
            "max_seq_len" => e.max_seq_len = parse_value(line, key, value)?,
            "layer_norm_eps" => e.layer_norm_eps = parse_value(line, key, value)?,
            "norm_order" => {
                e.norm_order = match value {
                    "post" => NormOrder::Post,
                    "pre" => NormOrder::Pre,
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("`norm_order` must be post or pre, got `{value}`"),
                        })
                    }
                }
            }
            "prompts_enabled" => p.enabled = parse_bool(line, key, value)?,
            "n_virtual" => p.n_virtual = parse_value(line, key, value)?,
            "d_seed" => p.d_seed = parse_value(line, key, value)?,
            "mlp_hidden" => p.mlp_hidden = parse_value(line, key, value)?,
            "lr" => t.lr = parse_value(line, key, value)?,
            "epochs" => t.epochs = parse_value(line, key, value)?,
            "batch_size" => t.batch_size = parse_value(line, key, value)?,
            "seed" => t.seed = parse_value(line, key, value)?,
            "freeze_encoder" => t.freeze_encoder = parse_bool(line, key, value)?,
            "beta1" => t.beta1 = parse_value(line, key, value)?,
            "beta2" => t.beta2 = parse_value(line, key, value)?,
            "eps" => t.eps = parse_value(line, key, value)?,
            "grad_clip" => t.grad_clip = parse_value(line, key, value)?,
            "author_token_threshold" => self.pipeline.author_token_threshold = parse_value(line, key, value)?,
            "split_delimiters" => {
                self.pipeline.split_delimiters = value.split_whitespace().map(str::to_lowercase).collect()
            }
            "require_overlap" => self.pipeline.require_overlap = parse_bool(line, key, value)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.pipeline.validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            prompt: self.prompt.clone(),
        }
    }

    /// Every key, in [`KEYS`] order. Parses back to an equal config.
    pub fn to_text(&self) -> String {
        let (e, p, t, pl) = (&self.encoder, &self.prompt, &self.train, &self.pipeline);
        let norm = match e.norm_order {
            NormOrder::Post => "post",
            NormOrder::Pre => "pre",
        };
        let values = [
            e.d_model.to_string(),
            e.n_layers.to_string(),
            e.n_heads.to_string(),
            e.d_ff.to_string(),
            e.max_seq_len.to_string(),
            format!("{:e}", e.layer_norm_eps),
            norm.to_string(),
            p.enabled.to_string(),
            p.n_virtual.to_string(),
            p.d_seed.to_string(),
            p.mlp_hidden.to_string(),
            format!("{:e}", t.lr),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.freeze_encoder.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            format!("{:e}", t.eps),
            t.grad_clip.to_string(),
            pl.author_token_threshold.to_string(),
            pl.split_delimiters.join(" "),
            pl.require_overlap.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|((k, _), v)| format!("{k} = {v}\n"))
            .collect()
    }
}
