//! Small post-LN transformer encoder standing in for a pretrained backbone.
//!
//! Parameters live in a [`ParamSet`] under the `enc.` prefix so that the same
//! forward code runs against original, adapted or perturbed copies.

pub mod mlm;
pub mod vocab;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_weight, normal_matrix, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use vocab::{build_vocab, tokenize, TokenSeq, Vocab};

pub const TOKEN_EMBEDDING: &str = "enc.tok_emb";
const POS_EMBEDDING: &str = "enc.pos_emb";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 64,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(8..=512).contains(&self.max_len) {
            return Err(Error::InvalidArgument(format!(
                "max_len {} outside [8, 512]",
                self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

/// Encoder output for one padded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<S> {
    /// `max_len × d_model`
    pub states: Matrix<S>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> HiddenStates<S> {
    /// Vector at the `[CLS]` position.
    pub fn cls(&self) -> &[S] {
        self.states.row(0)
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("enc.l{layer}.{part}")
}

/// Fresh encoder parameters for a vocabulary of `vocab_size` tokens.
pub fn init_encoder_params<S: Scalar>(cfg: &EncoderConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> ParamSet<S> {
    let d = cfg.d_model;
    let mut p = ParamSet::new();
    p.insert(TOKEN_EMBEDDING, normal_matrix(rng, vocab_size, d, 0.1));
    p.insert(POS_EMBEDDING, normal_matrix(rng, cfg.max_len, d, 0.1));
    p.insert("enc.emb_ln.g", Matrix::filled(1, d, S::one()));
    p.insert("enc.emb_ln.b", Matrix::zeros(1, d));
    for l in 0..cfg.n_layers {
        insert_attention(&mut p, &layer_name(l, "attn."), d, rng);
        p.insert(layer_name(l, "ln1.g"), Matrix::filled(1, d, S::one()));
        p.insert(layer_name(l, "ln1.b"), Matrix::zeros(1, d));
        p.insert(layer_name(l, "ffn.w1"), linear_weight(rng, d, cfg.ffn_dim()));
        p.insert(layer_name(l, "ffn.b1"), Matrix::zeros(1, cfg.ffn_dim()));
        p.insert(layer_name(l, "ffn.w2"), linear_weight(rng, cfg.ffn_dim(), d));
        p.insert(layer_name(l, "ffn.b2"), Matrix::zeros(1, d));
        p.insert(layer_name(l, "ln2.g"), Matrix::filled(1, d, S::one()));
        p.insert(layer_name(l, "ln2.b"), Matrix::zeros(1, d));
    }
    p
}

/// Query/key/value/output projections (`d × d`) and biases under `prefix`.
pub(crate) fn insert_attention<S: Scalar, R: Rng + ?Sized>(p: &mut ParamSet<S>, prefix: &str, d: usize, rng: &mut R) {
    for name in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("{prefix}{name}"), linear_weight(rng, d, d));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        p.insert(format!("{prefix}{name}"), Matrix::zeros(1, d));
    }
}

/// Inverted-dropout context for training-mode forwards.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<S: Scalar>(&mut self, tape: &mut Tape<S>, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = tape.value(x).shape();
        let keep = S::lit(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = &mut *self.rng;
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { S::zero() } else { keep });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

pub(crate) fn maybe_dropout<S: Scalar>(tape: &mut Tape<S>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// Multi-head scaled dot-product attention. Queries come from `q_in`, keys
/// from `k_in`, values from `v_in`; key positions with `key_mask == false`
/// get zero weight. Per-head attention matrices are appended to `trace`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    prefix: &str,
    n_heads: usize,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    key_mask: &[bool],
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let proj = |tape: &mut Tape<S>, x: Var, w: &str, b: &str| -> Result<Var> {
        let w = tape.param(params, &format!("{prefix}{w}"))?;
        let b = tape.param(params, &format!("{prefix}{b}"))?;
        let h = tape.matmul(x, w);
        Ok(tape.add_row(h, b))
    };
    let q = proj(tape, q_in, "wq", "bq")?;
    let k = proj(tape, k_in, "wk", "bk")?;
    let v = proj(tape, v_in, "wv", "bv")?;
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, key_mask)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(probs);
        }
        heads.push(tape.matmul(probs, vh));
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    proj(tape, joined, "wo", "bo")
}

/// Tape-level forward pass producing `max_len × d_model` states.
pub fn encode_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    params: &ParamSet<S>,
    seq: &TokenSeq,
    mut dropout: Option<Dropout<'_>>,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if seq.len() != cfg.max_len || seq.mask.len() != cfg.max_len {
        return Err(Error::Shape(format!(
            "sequence of length {} for max_len {}",
            seq.len(),
            cfg.max_len
        )));
    }
    if !seq.mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("sequence has no valid positions".into()));
    }
    let table = tape.param(params, TOKEN_EMBEDDING)?;
    let tok = tape.gather(table, &seq.ids)?;
    let pos_table = tape.param(params, POS_EMBEDDING)?;
    let positions: Vec<usize> = (0..cfg.max_len).collect();
    let pos = tape.gather(pos_table, &positions)?;
    let x = tape.add(tok, pos);
    let g = tape.param(params, "enc.emb_ln.g")?;
    let b = tape.param(params, "enc.emb_ln.b")?;
    let x = tape.layer_norm(x, g, b);
    let mut x = maybe_dropout(tape, x, &mut dropout);
    for l in 0..cfg.n_layers {
        let attn = multi_head_attention(
            tape,
            params,
            &layer_name(l, "attn."),
            cfg.n_heads,
            x,
            x,
            x,
            &seq.mask,
            trace.as_deref_mut(),
        )?;
        let attn = maybe_dropout(tape, attn, &mut dropout);
        let h = tape.add(x, attn);
        let g1 = tape.param(params, &layer_name(l, "ln1.g"))?;
        let b1 = tape.param(params, &layer_name(l, "ln1.b"))?;
        let h = tape.layer_norm(h, g1, b1);
        let w1 = tape.param(params, &layer_name(l, "ffn.w1"))?;
        let c1 = tape.param(params, &layer_name(l, "ffn.b1"))?;
        let w2 = tape.param(params, &layer_name(l, "ffn.w2"))?;
        let c2 = tape.param(params, &layer_name(l, "ffn.b2"))?;
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, c1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, c2);
        let f = maybe_dropout(tape, f, &mut dropout);
        let h2 = tape.add(h, f);
        let g2 = tape.param(params, &layer_name(l, "ln2.g"))?;
        let b2 = tape.param(params, &layer_name(l, "ln2.b"))?;
        x = tape.layer_norm(h2, g2, b2);
    }
    Ok(x)
}

/// Inference-mode encoding (no dropout).
pub fn encode<S: Scalar>(cfg: &EncoderConfig, params: &ParamSet<S>, seq: &TokenSeq) -> Result<HiddenStates<S>> {
    let mut tape = Tape::new();
    let states = encode_on_tape(&mut tape, cfg, params, seq, None, None)?;
    Ok(HiddenStates {
        states: tape.value(states).clone(),
        mask: seq.mask.clone(),
    })
}

/// Inference encoding plus every attention matrix (layer-major, head-minor).
pub fn encode_with_attention<S: Scalar>(
    cfg: &EncoderConfig,
    params: &ParamSet<S>,
    seq: &TokenSeq,
) -> Result<(HiddenStates<S>, Vec<Matrix<S>>)> {
    let mut tape = Tape::new();
    let mut trace = Vec::new();
    let states = encode_on_tape(&mut tape, cfg, params, seq, None, Some(&mut trace))?;
    let maps = trace.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((
        HiddenStates {
            states: tape.value(states).clone(),
            mask: seq.mask.clone(),
        },
        maps,
    ))
}

/// Registers a whole-label token whose embedding starts at the mean of the
/// label's constituent token embeddings. Existing ids are returned unchanged,
/// so identical label strings share one token across domains.
pub fn add_label_token<S: Scalar>(label: &str, vocab: &mut Vocab, params: &mut ParamSet<S>) -> Result<usize> {
    if label.trim().is_empty() {
        return Err(Error::InvalidArgument("label is empty".into()));
    }
    let token = Vocab::label_token(label);
    if let Some(id) = vocab.id(&token) {
        return Ok(id);
    }
    let table = params.get_mut(TOKEN_EMBEDDING)?;
    if table.rows() != vocab.len() {
        return Err(Error::Shape(format!(
            "embedding table has {} rows for a vocabulary of {}",
            table.rows(),
            vocab.len()
        )));
    }
    let parts = vocab::text_ids(label, vocab);
    let mut mean = vec![S::zero(); table.cols()];
    for &id in &parts {
        for (m, &v) in mean.iter_mut().zip(table.row(id)) {
            *m += v;
        }
    }
    let n = S::lit(parts.len() as f64);
    for m in &mut mean {
        *m /= n;
    }
    table.push_row(&mean);
    Ok(vocab.push(token))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> (EncoderConfig, Vocab, ParamSet<f64>) {
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            max_len: 10,
            dropout: 0.0,
            seed: 1,
        };
        let vocab = build_vocab(&["hate speech is bad", "love is good"], 100);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_encoder_params(&cfg, vocab.len(), &mut rng);
        (cfg, vocab, params)
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let short = EncoderConfig {
            max_len: 7,
            ..Default::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn shape_and_determinism() {
        let (cfg, vocab, params) = small();
        let seq = tokenize("hate speech is bad", &vocab, cfg.max_len);
        let a = encode(&cfg, &params, &seq).unwrap();
        let b = encode(&cfg, &params, &seq).unwrap();
        assert_eq!(a.states.shape(), (10, 16));
        assert_eq!(a, b);
        assert_eq!(a.cls(), a.states.row(0));
    }

    #[test]
    fn out_of_vocab_id_is_rejected() {
        let (cfg, vocab, params) = small();
        let mut seq = tokenize("love", &vocab, cfg.max_len);
        seq.ids[1] = vocab.len() + 3;
        assert!(matches!(encode(&cfg, &params, &seq), Err(Error::OutOfVocab { .. })));
    }

    #[test]
    fn pad_content_does_not_leak() {
        let (cfg, vocab, params) = small();
        let seq = tokenize("love is good", &vocab, cfg.max_len);
        let mut garbage = seq.clone();
        for (i, id) in garbage.ids.iter_mut().enumerate() {
            if !seq.mask[i] {
                *id = 5 + i % 4;
            }
        }
        let a = encode(&cfg, &params, &seq).unwrap();
        let b = encode(&cfg, &params, &garbage).unwrap();
        for i in 0..seq.valid_len() {
            assert_eq!(a.states.row(i), b.states.row(i));
        }
    }

    #[test]
    fn label_token_is_mean_and_shared() {
        let (_, mut vocab, mut params) = small();
        let before = params.get(TOKEN_EMBEDDING).unwrap().clone();
        let id = add_label_token("hate speech", &mut vocab, &mut params).unwrap();
        let table = params.get(TOKEN_EMBEDDING).unwrap();
        let e1 = before.row(vocab.id("hate").unwrap());
        let e2 = before.row(vocab.id("speech").unwrap());
        for j in 0..16 {
            assert_eq!(table.get(id, j), (e1[j] + e2[j]) / 2.0);
        }
        assert_eq!(table.slice_rows(0, before.rows()), before);
        assert_eq!(add_label_token("hate speech", &mut vocab, &mut params).unwrap(), id);
        let single = add_label_token("love", &mut vocab, &mut params).unwrap();
        let table = params.get(TOKEN_EMBEDDING).unwrap();
        assert_eq!(table.row(single), before.row(vocab.id("love").unwrap()));
    }
}
