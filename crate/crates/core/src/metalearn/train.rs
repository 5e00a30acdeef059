//! Meta-training loop and resumable learner state.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::{sample_episode, supports_k};
use super::heads::ensure_hidden;
use super::mldg::{mldg_episode_loss, mldg_gradient, MldgHeadConfig};
use super::proto::{proto_episode_loss, Distance};
use super::protomaml::{fo_protomaml_step, ProtoMamlConfig};
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{AdamW, AdamWConfig, ComponentRates, ParamSet};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Protonet,
    Protomaml,
    Mldg,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Protonet => "protonet",
            Algorithm::Protomaml => "protomaml",
            Algorithm::Mldg => "mldg",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protonet" => Ok(Algorithm::Protonet),
            "protomaml" => Ok(Algorithm::Protomaml),
            "mldg" => Ok(Algorithm::Mldg),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm {other:?} (expected protonet, protomaml or mldg)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub meta_epochs: usize,
    pub tasks_per_epoch: usize,
    pub k_choices: Vec<usize>,
    /// α: inner-loop / virtual-step rate.
    pub inner_lr: f64,
    /// γ: outer rate, used for every component without an explicit override.
    pub outer_lr: f64,
    /// β: weight of the meta-test loss.
    pub mldg_beta: f64,
    pub inner_steps: usize,
    pub distance: Distance,
    /// Per-component outer rates overriding `outer_lr`.
    pub rates: Option<ComponentRates>,
    pub mldg_head: MldgHeadConfig,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            meta_epochs: 5,
            tasks_per_epoch: 300,
            k_choices: vec![16, 32, 64, 128],
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            mldg_beta: 1.0,
            inner_steps: 5,
            distance: Distance::Euclidean,
            rates: None,
            mldg_head: MldgHeadConfig::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return bad(format!(
                "rates must be positive (inner {}, outer {})",
                self.inner_lr, self.outer_lr
            ));
        }
        if self.rates.is_some_and(|r| !r.all_positive()) {
            return bad("component rates must be positive".into());
        }
        if self.k_choices.is_empty() || self.k_choices.contains(&0) {
            return bad(format!(
                "k choices must be non-empty and positive: {:?}",
                self.k_choices
            ));
        }
        if !(self.mldg_beta >= 0.0) {
            return bad(format!("mldg beta must be non-negative, got {}", self.mldg_beta));
        }
        Ok(())
    }

    pub fn component_rates(&self) -> ComponentRates {
        self.rates.unwrap_or_else(|| ComponentRates::uniform(self.outer_lr))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub epoch: usize,
    pub task: usize,
    pub loss: f64,
    pub k: usize,
    pub domain_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestParams<S> {
    pub epoch: usize,
    pub loss: f64,
    pub params: ParamSet<S>,
}

/// Everything needed to continue or reproduce a meta-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState<S> {
    pub version: u32,
    pub algorithm: Algorithm,
    pub config: MetaConfig,
    pub model: Model<S>,
    pub optimizer: AdamW<S>,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
    pub episodes_drawn: usize,
    pub skipped: usize,
    pub epoch_losses: Vec<f64>,
    pub epoch_accuracies: Vec<f64>,
    /// Parameters at the epoch with the lowest mean meta-loss.
    pub best: Option<BestParams<S>>,
}

impl<S> LearnerState<S>
where
    S: Scalar + Serialize + for<'de> Deserialize<'de>,
{
    pub fn new(algorithm: Algorithm, mut model: Model<S>, config: MetaConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        if algorithm == Algorithm::Mldg {
            let d = model.d_model();
            ensure_hidden(&mut model.params, d, &mut rng);
        }
        Ok(Self {
            version: CHECKPOINT_VERSION,
            algorithm,
            optimizer: AdamW::new(config.adamw),
            config,
            model,
            rng,
            epochs_done: 0,
            episodes_drawn: 0,
            skipped: 0,
            epoch_losses: Vec::new(),
            epoch_accuracies: Vec::new(),
            best: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self).map_err(|e| Error::json("checkpoint", e))?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: Self = serde_json::from_str(&body).map_err(|e| Error::json(path.display().to_string(), e))?;
        if state.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                state.version
            )));
        }
        Ok(state)
    }

    /// The best-epoch parameters if any epoch completed, else the current ones.
    pub fn best_model(&self) -> Model<S> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.params = b.params.clone();
        }
        m
    }

    /// Runs the remaining epochs on `domains`.
    pub fn train(&mut self, domains: &[Dataset], on_event: &mut dyn FnMut(&TrainEvent)) -> Result<()> {
        if domains.is_empty() {
            return Err(Error::InvalidArgument("meta-training needs at least one domain".into()));
        }
        if self.algorithm == Algorithm::Mldg && domains.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "mldg needs at least 2 training domains, got {}",
                domains.len()
            )));
        }
        for d in domains {
            self.model.prepare_labels(&d.manifest)?;
        }
        let all: Vec<&Dataset> = domains.iter().collect();
        let rates = self.config.component_rates();
        while self.epochs_done < self.config.meta_epochs {
            let epoch = self.epochs_done;
            let (mut loss_sum, mut acc_sum, mut counted) = (0.0, 0.0, 0usize);
            for task in 0..self.config.tasks_per_epoch {
                let Some((loss, acc, grads, k, domain_id)) = self.task(&all)? else {
                    self.skipped += 1;
                    continue;
                };
                self.optimizer.step(&mut self.model.params, &grads, &rates);
                if !self.model.params.is_finite() {
                    return Err(Error::NonFinite(format!("parameters after epoch {epoch} task {task}")));
                }
                loss_sum += loss;
                acc_sum += acc;
                counted += 1;
                on_event(&TrainEvent {
                    epoch,
                    task,
                    loss,
                    k,
                    domain_id,
                });
            }
            let mean = if counted > 0 {
                loss_sum / counted as f64
            } else {
                f64::NAN
            };
            log::info!("epoch {epoch}: mean meta-loss {mean:.4} over {counted} tasks");
            self.epoch_losses.push(mean);
            self.epoch_accuracies
                .push(if counted > 0 { acc_sum / counted as f64 } else { 0.0 });
            if mean.is_finite() && self.best.as_ref().is_none_or(|b| mean < b.loss) {
                self.best = Some(BestParams {
                    epoch,
                    loss: mean,
                    params: self.model.params.clone(),
                });
            }
            self.epochs_done += 1;
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn task(&mut self, domains: &[&Dataset]) -> Result<Option<(f64, f64, ParamSet<S>, usize, String)>> {
        let cfg = &self.config;
        match self.algorithm {
            Algorithm::Protonet => {
                let ep = sample_episode(domains, None, &cfg.k_choices, &mut self.rng)?;
                self.episodes_drawn += 1;
                let out = proto_episode_loss(&self.model, &ep, cfg.distance, Some(&mut self.rng))?;
                Ok(Some((
                    out.loss.as_f64(),
                    out.accuracy,
                    out.grads,
                    ep.k_shot,
                    ep.domain_id,
                )))
            }
            Algorithm::Protomaml => {
                let ep = sample_episode(domains, None, &cfg.k_choices, &mut self.rng)?;
                self.episodes_drawn += 1;
                let inner = ProtoMamlConfig {
                    inner_steps: cfg.inner_steps,
                    inner_lr: cfg.inner_lr,
                };
                Ok(fo_protomaml_step(&self.model, &ep, &inner, Some(&mut self.rng))?
                    .map(|s| (s.query_loss.as_f64(), s.accuracy, s.grads, ep.k_shot, ep.domain_id)))
            }
            Algorithm::Mldg => {
                let usable: Vec<usize> = (0..domains.len())
                    .filter(|&i| cfg.k_choices.iter().any(|&k| supports_k(domains[i], k)))
                    .collect();
                if usable.len() < 2 {
                    return Err(Error::Sampling(
                        "mldg needs two domains that can furnish an episode".into(),
                    ));
                }
                let held = *usable.choose(&mut self.rng).expect("non-empty");
                let meta_train: Vec<&Dataset> = usable.iter().filter(|&&i| i != held).map(|&i| domains[i]).collect();
                let ep_f = sample_episode(&meta_train, None, &cfg.k_choices, &mut self.rng)?;
                let ep_g = sample_episode(&[domains[held]], None, &cfg.k_choices, &mut self.rng)?;
                self.episodes_drawn += 2;
                let mut rng_f = ChaCha8Rng::seed_from_u64(self.rng.random());
                let mut rng_g = ChaCha8Rng::seed_from_u64(self.rng.random());
                let model = &self.model;
                let head = cfg.mldg_head;
                let mut acc = 0.0;
                let step = mldg_gradient(
                    &model.params,
                    cfg.inner_lr,
                    cfg.mldg_beta,
                    |p| {
                        let out = mldg_episode_loss(model, p, &ep_f, &head, Some(&mut rng_f))?;
                        acc = out.accuracy;
                        Ok((out.loss, out.grads))
                    },
                    |p| {
                        let out = mldg_episode_loss(model, p, &ep_g, &head, Some(&mut rng_g))?;
                        Ok((out.loss, out.grads))
                    },
                )?;
                let loss = step.f.as_f64() + cfg.mldg_beta * step.g.as_f64();
                Ok(Some((loss, acc, step.grads, ep_f.k_shot, ep_g.domain_id)))
            }
        }
    }
}

/// Meta-trains `model` on `domains` from scratch.
pub fn meta_train<S>(
    algorithm: Algorithm,
    domains: &[Dataset],
    model: Model<S>,
    config: MetaConfig,
    on_event: &mut dyn FnMut(&TrainEvent),
) -> Result<LearnerState<S>>
where
    S: Scalar + Serialize + for<'de> Deserialize<'de>,
{
    let mut state = LearnerState::new(algorithm, model, config)?;
    state.train(domains, on_event)?;
    Ok(state)
}
