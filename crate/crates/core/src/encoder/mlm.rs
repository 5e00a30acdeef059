//! Masked-language-model pretraining with a tied output embedding.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, TokenSeq, Vocab, MASK_ID};
use super::{encode_on_tape, Dropout, EncoderConfig, TOKEN_EMBEDDING};
use crate::autodiff::Tape;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::params::{linear_weight, AdamW, AdamWConfig, ComponentRates, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    pub epochs: usize,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            mask_rate: 0.15,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmReport {
    pub epoch_losses: Vec<f64>,
    /// Mean masked-token loss over the final epoch.
    pub final_loss: f64,
}

/// Number of positions to mask: `max(1, floor(rate × maskable))`, or 0 when
/// nothing is maskable.
pub fn mask_count(maskable: usize, rate: f64) -> usize {
    if maskable == 0 {
        return 0;
    }
    // epsilon absorbs representation error such as 0.15 * 20 = 3.0000000000000004
    ((rate * maskable as f64 + 1e-9).floor() as usize).clamp(1, maskable)
}

/// A masked copy of `seq` and the `(position, original id)` targets.
pub fn mask_sequence(seq: &TokenSeq, rate: f64, rng: &mut ChaCha8Rng) -> (TokenSeq, Vec<(usize, usize)>) {
    let maskable: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.mask[i] && !Vocab::is_special(seq.ids[i]))
        .collect();
    let n = mask_count(maskable.len(), rate);
    let mut picked: Vec<usize> = maskable.choose_multiple(rng, n).copied().collect();
    picked.sort_unstable();
    let mut masked = seq.clone();
    let targets = picked
        .into_iter()
        .map(|p| {
            masked.ids[p] = MASK_ID;
            (p, seq.ids[p])
        })
        .collect();
    (masked, targets)
}

fn ensure_head<S: Scalar>(cfg: &EncoderConfig, params: &mut ParamSet<S>, rng: &mut ChaCha8Rng) {
    if !params.contains("mlm.w") {
        params.insert("mlm.w", linear_weight(rng, cfg.d_model, cfg.d_model));
        params.insert("mlm.b", Matrix::zeros(1, cfg.d_model));
    }
}

/// Masked-token cross-entropy for a batch of masked sequences; `None` when
/// the batch has no masked position.
fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &EncoderConfig,
    params: &ParamSet<S>,
    batch: &[(TokenSeq, Vec<(usize, usize)>)],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<(crate::autodiff::Var, crate::autodiff::Var, Vec<usize>)>> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut rng = rng;
    for (seq, tgt) in batch {
        if tgt.is_empty() {
            continue;
        }
        let dropout = rng.as_deref_mut().map(|r| Dropout {
            rate: cfg.dropout,
            rng: r,
        });
        let states = encode_on_tape(tape, cfg, params, seq, dropout, None)?;
        let positions: Vec<usize> = tgt.iter().map(|&(p, _)| p).collect();
        rows.push(tape.select_rows(states, &positions));
        targets.extend(tgt.iter().map(|&(_, id)| id));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let h = tape.concat_rows(&rows);
    let w = tape.param(params, "mlm.w")?;
    let b = tape.param(params, "mlm.b")?;
    let h = tape.matmul(h, w);
    let h = tape.add_row(h, b);
    let h = tape.gelu(h);
    let emb = tape.param(params, TOKEN_EMBEDDING)?;
    let logits = tape.matmul_nt(h, emb);
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(Some((loss, logits, targets)))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate {rate} must lie in (0, 1]; at least one maskable position is required per batch"
        )));
    }
    Ok(())
}

/// Self-supervised pretraining on `dataset` texts; updates `params` in place.
pub fn mlm_pretrain<S: Scalar>(
    cfg: &EncoderConfig,
    vocab: &Vocab,
    params: &mut ParamSet<S>,
    dataset: &Dataset,
    mlm: &MlmConfig,
) -> Result<MlmReport> {
    check_rate(mlm.mask_rate)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "MLM pretraining needs a non-empty dataset".into(),
        ));
    }
    let seqs: Vec<TokenSeq> = dataset
        .examples
        .iter()
        .map(|e| tokenize(&e.text, vocab, cfg.max_len))
        .filter(|s| s.ids.iter().zip(&s.mask).any(|(&id, &m)| m && !Vocab::is_special(id)))
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(
            "every text is empty; no maskable position exists".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mlm.seed);
    ensure_head(cfg, params, &mut rng);
    let mut opt = AdamW::new(AdamWConfig::default());
    let rates = ComponentRates::uniform(mlm.lr);
    let mut epoch_losses = Vec::with_capacity(mlm.epochs);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..mlm.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(mlm.batch_size.max(1)) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| mask_sequence(&seqs[i], mlm.mask_rate, &mut rng))
                .collect();
            let mut tape = Tape::new();
            let Some((loss, _, targets)) = batch_loss(&mut tape, cfg, params, &batch, Some(&mut rng))? else {
                continue;
            };
            let value = tape.scalar(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite("MLM loss".into()));
            }
            tape.backward(loss);
            let grads = tape.param_grads();
            opt.step(params, &grads, &rates);
            total += value * targets.len() as f64;
            tokens += targets.len();
        }
        epoch_losses.push(if tokens > 0 { total / tokens as f64 } else { 0.0 });
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(0.0);
    Ok(MlmReport {
        epoch_losses,
        final_loss,
    })
}

/// Fraction of masked positions whose original token is the arg-max
/// prediction, under a masking fixed by `seed`.
pub fn masked_token_accuracy<S: Scalar>(
    cfg: &EncoderConfig,
    vocab: &Vocab,
    params: &ParamSet<S>,
    texts: &[&str],
    mask_rate: f64,
    seed: u64,
) -> Result<f64> {
    check_rate(mask_rate)?;
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ensure_head(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(u64::MAX));
    let batch: Vec<_> = texts
        .iter()
        .map(|t| mask_sequence(&tokenize(t, vocab, cfg.max_len), mask_rate, &mut rng))
        .collect();
    let mut tape = Tape::new();
    let Some((_, logits, targets)) = batch_loss(&mut tape, cfg, &params, &batch, None)? else {
        return Err(Error::InvalidArgument("no maskable position".into()));
    };
    let l = tape.value(logits);
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = l.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count();
    Ok(correct as f64 / targets.len() as f64)
}
