//! K-shot fine-tuning on a target domain and prediction on unlabeled text.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{classifier_logits_on_tape, ensure_hidden, reset_output};
use super::proto::{argmax, compute_prototypes, proto_logits_on_tape, Distance, Prototypes};
use super::schedule::anneal;
use super::{represent_batch_on_tape, BatchItem};
use crate::autodiff::Tape;
use crate::corpus::{Dataset, DomainManifest};
use crate::error::{Error, Result};
use crate::fusion::DefinitionCache;
use crate::model::Model;
use crate::params::{AdamW, AdamWConfig, ComponentRates};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Feed-forward classifier trained with cross-entropy.
    Softmax,
    /// Nearest class prototype of the K-shot representations.
    Prototype,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Prototype => "prototype",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "prototype" => Ok(HeadKind::Prototype),
            other => Err(Error::InvalidArgument(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    /// Peak rate per component; annealed towards `floor`.
    pub rates: ComponentRates,
    pub floor: f64,
    pub batch_size: usize,
    pub distance: Distance,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            rates: ComponentRates::uniform(1e-3),
            floor: 1e-5,
            batch_size: 16,
            distance: Distance::Euclidean,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// A model adapted to one domain, ready to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuned<S> {
    pub model: Model<S>,
    pub head: HeadKind,
    pub manifest: DomainManifest,
    pub distance: Distance,
    /// Present for the prototype head.
    pub prototypes: Option<Prototypes<S>>,
    /// Encoder rate used at each optimiser step.
    pub lr_trace: Vec<f64>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Fine-tunes on a balanced K-shot set. With `epochs = 0` the encoder is
/// left untouched.
pub fn supervised_finetune<S: Scalar>(
    mut model: Model<S>,
    kshot: &Dataset,
    head: HeadKind,
    cfg: &FineTuneConfig,
) -> Result<FineTuned<S>> {
    if kshot.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    model.prepare_labels(&kshot.manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw);
    let manifest = &kshot.manifest;
    let n_classes = kshot.n_classes();
    let total = cfg.epochs * steps_per_epoch(kshot.len(), cfg.batch_size);
    let mut lr_trace = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    match head {
        HeadKind::Softmax => {
            let d = model.d_model();
            ensure_hidden(&mut model.params, d, &mut rng);
            reset_output(&mut model.params, d, n_classes, Some(&mut rng));
            let mut order: Vec<usize> = (0..kshot.len()).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let mut sum = 0.0;
                for batch in order.chunks(cfg.batch_size) {
                    let items: Vec<BatchItem<'_>> =
                        batch.iter().map(|&i| (kshot.examples[i].text.as_str(), None)).collect();
                    let targets: Vec<usize> = batch.iter().map(|&i| kshot.examples[i].label_index).collect();
                    let mut tape = Tape::new();
                    let mut cache = DefinitionCache::new();
                    let reps = represent_batch_on_tape(
                        &mut tape,
                        &model,
                        &model.params,
                        manifest,
                        &items,
                        &mut cache,
                        Some(&mut rng),
                    )?;
                    let logits = classifier_logits_on_tape(&mut tape, &model.params, reps)?;
                    let loss = tape.cross_entropy(logits, &targets)?;
                    sum += tape.scalar(loss).as_f64();
                    tape.backward(loss);
                    let rates = anneal(&cfg.rates, cfg.floor, step, total);
                    lr_trace.push(rates.encoder);
                    opt.step(&mut model.params, &tape.param_grads(), &rates);
                    step += 1;
                }
                epoch_losses.push(sum / steps_per_epoch(kshot.len(), cfg.batch_size) as f64);
            }
        }
        HeadKind::Prototype => {
            let by_class = kshot.indices_by_class();
            let k_min = by_class.iter().map(Vec::len).min().unwrap_or(0);
            if cfg.epochs > 0 && k_min < 2 {
                return Err(Error::InvalidArgument(
                    "prototype fine-tuning needs at least 2 examples per class".into(),
                ));
            }
            // per-class shots on each side of a step's pseudo-episode
            let m = (cfg.batch_size / n_classes).clamp(1, (k_min / 2).max(1));
            let per_epoch = steps_per_epoch(kshot.len(), cfg.batch_size);
            for _ in 0..cfg.epochs {
                let mut sum = 0.0;
                for _ in 0..per_epoch {
                    let mut support = Vec::new();
                    let mut query = Vec::new();
                    for (class, idx) in by_class.iter().enumerate() {
                        let mut idx = idx.clone();
                        idx.shuffle(&mut rng);
                        support.extend(idx[..m].iter().map(|&i| (i, class)));
                        query.extend(idx[m..2 * m].iter().map(|&i| (i, class)));
                    }
                    let s_items: Vec<BatchItem<'_>> = support
                        .iter()
                        .map(|&(i, c)| (kshot.examples[i].text.as_str(), Some(&manifest.labels[c])))
                        .collect();
                    let q_items: Vec<BatchItem<'_>> = query
                        .iter()
                        .map(|&(i, _)| (kshot.examples[i].text.as_str(), None))
                        .collect();
                    let s_classes: Vec<usize> = support.iter().map(|&(_, c)| c).collect();
                    let q_classes: Vec<usize> = query.iter().map(|&(_, c)| c).collect();
                    let mut tape = Tape::new();
                    let mut cache = DefinitionCache::new();
                    let s = represent_batch_on_tape(
                        &mut tape,
                        &model,
                        &model.params,
                        manifest,
                        &s_items,
                        &mut cache,
                        Some(&mut rng),
                    )?;
                    let q = represent_batch_on_tape(
                        &mut tape,
                        &model,
                        &model.params,
                        manifest,
                        &q_items,
                        &mut cache,
                        Some(&mut rng),
                    )?;
                    let logits = proto_logits_on_tape(&mut tape, s, &s_classes, n_classes, q, cfg.distance)?;
                    let loss = tape.cross_entropy(logits, &q_classes)?;
                    sum += tape.scalar(loss).as_f64();
                    tape.backward(loss);
                    let rates = anneal(&cfg.rates, cfg.floor, step, total);
                    lr_trace.push(rates.encoder);
                    opt.step(&mut model.params, &tape.param_grads(), &rates);
                    step += 1;
                }
                epoch_losses.push(sum / per_epoch as f64);
            }
        }
    }
    if !model.params.is_finite() {
        return Err(Error::NonFinite("parameters after fine-tuning".into()));
    }

    let prototypes = match head {
        HeadKind::Softmax => None,
        HeadKind::Prototype => {
            let inputs: Vec<crate::fusion::FusionInput<'_>> = kshot
                .examples
                .iter()
                .map(|e| crate::fusion::FusionInput {
                    text: &e.text,
                    domain: manifest,
                    label: Some(&manifest.labels[e.label_index]),
                })
                .collect();
            let reps = model.represent_many(&inputs)?;
            Some(compute_prototypes(&reps, &kshot.labels(), n_classes)?)
        }
    };
    Ok(FineTuned {
        model,
        head,
        manifest: manifest.clone(),
        distance: cfg.distance,
        prototypes,
        lr_trace,
        epoch_losses,
    })
}

/// Class index per text, in input order. No label information is fused.
pub fn predict<S: Scalar>(ft: &FineTuned<S>, texts: &[&str]) -> Result<Vec<usize>> {
    let inputs: Vec<crate::fusion::FusionInput<'_>> = texts
        .iter()
        .map(|&text| crate::fusion::FusionInput {
            text,
            domain: &ft.manifest,
            label: None,
        })
        .collect();
    let reps = ft.model.represent_many(&inputs)?;
    match ft.head {
        HeadKind::Prototype => {
            let protos = ft
                .prototypes
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("prototype head without prototypes".into()))?;
            Ok((0..reps.rows())
                .map(|i| protos.nearest(reps.row(i), ft.distance))
                .collect())
        }
        HeadKind::Softmax => {
            let mut tape = Tape::new();
            let r = tape.constant(reps);
            let logits = classifier_logits_on_tape(&mut tape, &ft.model.params, r)?;
            let z = tape.value(logits);
            Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
        }
    }
}

/// Fraction of `d` classified correctly.
pub fn dataset_accuracy<S: Scalar>(ft: &FineTuned<S>, d: &Dataset) -> Result<f64> {
    let preds = predict(ft, &d.texts())?;
    let hits = preds.iter().zip(d.labels()).filter(|(p, g)| **p == *g).count();
    Ok(hits as f64 / d.len().max(1) as f64)
}
