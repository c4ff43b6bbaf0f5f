//! Bidirectional transformer encoder with learned absolute positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{bind_tensor, BindLog};
use crate::tape::{Tape, Var, GELU_FORM};
use crate::tensor::Tensor;

/// Standard deviation for weight and embedding initialization.
pub const INIT_STD: f64 = 0.02;

/// Where layer normalization sits relative to the residual connection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// `LN(x + sublayer(x))`, as in BERT and RoBERTa.
    #[default]
    Post,
    /// `x + sublayer(LN(x))`.
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub norm_order: NormOrder,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 4,
            max_seq_len: 128,
            layer_norm_eps: 1e-5,
            norm_order: NormOrder::Post,
        }
    }
}

impl EncoderConfig {
    /// `n_layers` may be zero (the encoder is then the identity); every other
    /// size must be positive.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    /// The key projection has no bias: it would shift every score of a
    /// query by the same amount and cancel in the softmax.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_FIELDS: [&str; 15] = [
    "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "w_ff1", "b_ff1",
    "w_ff2", "b_ff2", "ln2_gamma", "ln2_beta",
];

impl LayerParams {
    fn init<R: Rng + ?Sized>(c: &EncoderConfig, rng: &mut R) -> Self {
        let d = c.d_model;
        let w = |rng: &mut R, r: usize, cols: usize| Tensor::randn(&[r, cols], INIT_STD, rng);
        Self {
            wq: w(rng, d, d),
            bq: Tensor::zeros(&[d]),
            wk: w(rng, d, d),
            wv: w(rng, d, d),
            bv: Tensor::zeros(&[d]),
            wo: w(rng, d, d),
            bo: Tensor::zeros(&[d]),
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_ff1: w(rng, d, c.d_ff),
            b_ff1: Tensor::zeros(&[c.d_ff]),
            w_ff2: w(rng, c.d_ff, d),
            b_ff2: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [&Tensor; 15] {
        [
            &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gamma, &self.ln1_beta, &self.w_ff1, &self.b_ff1, &self.w_ff2, &self.b_ff2,
            &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(c: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            tok_emb: Tensor::randn(&[c.vocab_size, c.d_model], INIT_STD, rng),
            pos_emb: Tensor::randn(&[c.max_seq_len, c.d_model], INIT_STD, rng),
            layers: (0..c.n_layers).map(|_| LayerParams::init(c, rng)).collect(),
        }
    }

    pub(crate) fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("encoder.tok_emb".to_string(), &self.tok_emb),
            ("encoder.pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("encoder.layer{i}.{field}"), t));
            }
        }
        out
    }

    pub(crate) fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("encoder.tok_emb".to_string(), &mut self.tok_emb),
            ("encoder.pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields_mut()) {
                out.push((format!("encoder.layer{i}.{field}"), t));
            }
        }
        out
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool, log: &mut BindLog) -> EncoderVars {
        let named = self.named();
        let vars: Vec<Var> = named
            .into_iter()
            .map(|(name, t)| bind_tensor(tape, t, name, trainable, log))
            .collect();
        let layers = vars[2..]
            .chunks(LAYER_FIELDS.len())
            .map(|v| LayerVars {
                wq: v[0],
                bq: v[1],
                wk: v[2],
                wv: v[3],
                bv: v[4],
                wo: v[5],
                bo: v[6],
                ln1_gamma: v[7],
                ln1_beta: v[8],
                w_ff1: v[9],
                b_ff1: v[10],
                w_ff2: v[11],
                b_ff2: v[12],
                ln2_gamma: v[13],
                ln2_beta: v[14],
            })
            .collect();
        EncoderVars {
            tok_emb: vars[0],
            pos_emb: vars[1],
            layers,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_ff1: Var,
    pub b_ff1: Var,
    pub w_ff2: Var,
    pub b_ff2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

/// Token plus position embeddings, `[L × d_model]`.
///
/// `reserved` positions (the prompt prefix) count against `max_seq_len`.
pub fn embed_sequence(
    tape: &mut Tape<'_>,
    vars: &EncoderVars,
    config: &EncoderConfig,
    token_ids: &[usize],
    reserved: usize,
) -> Result<Var> {
    if let Some(&id) = token_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::Vocab {
            id,
            size: config.vocab_size,
        });
    }
    let max = config.max_seq_len.saturating_sub(reserved);
    if token_ids.len() > max {
        return Err(Error::Length {
            context: "embedding".into(),
            len: token_ids.len(),
            max,
        });
    }
    let tok = tape.gather_rows(vars.tok_emb, token_ids)?;
    let pos = tape.slice_rows(vars.pos_emb, 0..token_ids.len())?;
    tape.add(tok, pos)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// Multi-head self-attention; also returns each head's `[L × L]` weights.
pub fn self_attention(
    tape: &mut Tape<'_>,
    h: Var,
    attn_mask: &[bool],
    layer: &LayerVars,
    config: &EncoderConfig,
) -> Result<(Var, Vec<Var>)> {
    let len = tape.value(h).shape()[0];
    if attn_mask.len() != len {
        return Err(Error::Shape {
            op: "attention mask",
            lhs: vec![len],
            rhs: vec![attn_mask.len()],
        });
    }
    let q = linear(tape, h, layer.wq, layer.bq)?;
    let k = tape.matmul(h, layer.wk)?;
    let v = linear(tape, h, layer.wv, layer.bv)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.n_heads);
    let mut weights = Vec::with_capacity(config.n_heads);
    for head in 0..config.n_heads {
        let cols = head * dh..(head + 1) * dh;
        let qh = tape.slice_cols(q, cols.clone())?;
        let kh = tape.slice_cols(k, cols.clone())?;
        let vh = tape.slice_cols(v, cols)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let w = tape.masked_softmax(scores, attn_mask)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = tape.concat_cols(&heads)?;
    Ok((linear(tape, merged, layer.wo, layer.bo)?, weights))
}

fn feed_forward(tape: &mut Tape<'_>, h: Var, layer: &LayerVars) -> Result<Var> {
    let hidden = linear(tape, h, layer.w_ff1, layer.b_ff1)?;
    let hidden = tape.gelu(hidden, GELU_FORM);
    linear(tape, hidden, layer.w_ff2, layer.b_ff2)
}

/// One transformer block. Keys at masked positions receive zero attention
/// weight from every query.
pub fn encoder_layer(
    tape: &mut Tape<'_>,
    h: Var,
    attn_mask: &[bool],
    layer: &LayerVars,
    config: &EncoderConfig,
) -> Result<Var> {
    let eps = config.layer_norm_eps;
    match config.norm_order {
        NormOrder::Post => {
            let (attn, _) = self_attention(tape, h, attn_mask, layer, config)?;
            let h1 = tape.add(h, attn)?;
            let h1 = tape.layer_norm(h1, layer.ln1_gamma, layer.ln1_beta, eps)?;
            let ff = feed_forward(tape, h1, layer)?;
            let h2 = tape.add(h1, ff)?;
            tape.layer_norm(h2, layer.ln2_gamma, layer.ln2_beta, eps)
        }
        NormOrder::Pre => {
            let n1 = tape.layer_norm(h, layer.ln1_gamma, layer.ln1_beta, eps)?;
            let (attn, _) = self_attention(tape, n1, attn_mask, layer, config)?;
            let h1 = tape.add(h, attn)?;
            let n2 = tape.layer_norm(h1, layer.ln2_gamma, layer.ln2_beta, eps)?;
            let ff = feed_forward(tape, n2, layer)?;
            tape.add(h1, ff)
        }
    }
}

pub fn encode(
    tape: &mut Tape<'_>,
    input: Var,
    attn_mask: &[bool],
    vars: &EncoderVars,
    config: &EncoderConfig,
) -> Result<Var> {
    let d = tape.value(input).shape().get(1).copied();
    if d != Some(config.d_model) {
        return Err(Error::Shape {
            op: "encode",
            lhs: tape.value(input).shape().to_vec(),
            rhs: vec![config.d_model],
        });
    }
    vars.layers
        .iter()
        .try_fold(input, |h, layer| encoder_layer(tape, h, attn_mask, layer, config))
}

/// Runs [`encode`] on concrete tensors without recording gradients.
pub fn encode_tensor(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: &Tensor,
    attn_mask: &[bool],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false, &mut BindLog::default());
    let x = tape.constant_ref(input);
    let out = encode(&mut tape, x, attn_mask, &vars, config)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 20,
            max_seq_len: 12,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        let bad = EncoderConfig {
            n_heads: 3,
            ..small()
        };
        assert!(bad.validate().is_err());
        let zero = EncoderConfig { d_ff: 0, ..small() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn embed_sequence_examples() {
        let c = small();
        let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false, &mut BindLog::default());
        let empty = embed_sequence(&mut tape, &vars, &c, &[], 0).unwrap();
        assert_eq!(tape.value(empty).shape(), &[0, 16]);

        let one = embed_sequence(&mut tape, &vars, &c, &[7], 0).unwrap();
        let want: Vec<f64> = p.tok_emb.row(7).iter().zip(p.pos_emb.row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(one).data(), want.as_slice());

        let two = embed_sequence(&mut tape, &vars, &c, &[5, 5], 0).unwrap();
        let t = tape.value(two);
        for j in 0..16 {
            let got = t.get2(1, j) - t.get2(0, j);
            let want = p.pos_emb.get2(1, j) - p.pos_emb.get2(0, j);
            assert!((got - want).abs() < 1e-15);
        }

        assert!(matches!(
            embed_sequence(&mut tape, &vars, &c, &[20], 0),
            Err(Error::Vocab { id: 20, size: 20 })
        ));
        assert!(matches!(
            embed_sequence(&mut tape, &vars, &c, &[1; 9], 4),
            Err(Error::Length { len: 9, max: 8, .. })
        ));
    }

    #[test]
    fn zero_layers_is_identity() {
        let c = EncoderConfig { n_layers: 0, ..small() };
        let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::randn(&[5, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(encode_tensor(&p, &c, &x, &[true; 5]).unwrap(), x);
    }

    #[test]
    fn attention_collapses_onto_single_valid_key() {
        let c = small();
        let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(4));
        let x = Tensor::randn(&[4, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false, &mut BindLog::default());
        let xv = tape.constant_ref(&x);
        let mask = [false, false, true, false];
        let (_, weights) = self_attention(&mut tape, xv, &mask, &vars.layers[0], &c).unwrap();
        for w in weights {
            let w = tape.value(w);
            for r in 0..4 {
                assert_eq!(w.row(r), &[0.0, 0.0, 1.0, 0.0]);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = small();
        let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(6));
        let x = Tensor::randn(&[6, 16], 2.0, &mut ChaCha8Rng::seed_from_u64(7));
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false, &mut BindLog::default());
        let xv = tape.constant_ref(&x);
        let mask = [true, false, true, true, false, true];
        let (out, weights) = self_attention(&mut tape, xv, &mask, &vars.layers[1], &c).unwrap();
        assert_eq!(tape.value(out).shape(), &[6, 16]);
        for w in weights {
            let w = tape.value(w);
            for r in 0..6 {
                let s: f64 = w.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(w.row(r).iter().zip(&mask).all(|(v, &ok)| ok || *v == 0.0));
            }
        }
    }

    #[test]
    fn shapes_preserved_and_runs_bit_identical() {
        for order in [NormOrder::Post, NormOrder::Pre] {
            let c = EncoderConfig {
                norm_order: order,
                ..small()
            };
            let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(8));
            let x = Tensor::randn(&[7, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
            let a = encode_tensor(&p, &c, &x, &[true; 7]).unwrap();
            let b = encode_tensor(&p, &c, &x, &[true; 7]).unwrap();
            assert_eq!(a.shape(), x.shape());
            assert!(a.bit_eq(&b));
        }
    }
}
