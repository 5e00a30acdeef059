//! Holdout once, then K-shot fine-tune and score every `(k, seed)` cell.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::macro_f1;
use super::report::{Cell, EvaluationReport};
use crate::corpus::{holdout_split, kshot_sample, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub holdout_fraction: f64,
    pub holdout_seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            k_values: vec![16, 32, 64, 128, 256],
            seeds: vec![1, 2, 3, 4, 5],
            holdout_fraction: 0.2,
            holdout_seed: 0,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "protocol needs at least one K and one seed".into(),
            ));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) || self.k_values[0] == 0 {
            return Err(Error::InvalidArgument(format!(
                "K values must be positive and strictly ascending: {:?}",
                self.k_values
            )));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::InvalidArgument(format!(
                "seeds must be distinct: {:?}",
                self.seeds
            )));
        }
        Ok(())
    }
}

/// Turns a K-shot training set into holdout predictions. One call per cell.
pub trait CellRunner: Sync {
    /// Called once with the training side of the holdout split.
    fn prepare(&mut self, _train_side: &Dataset) -> Result<()> {
        Ok(())
    }

    fn run_cell(&self, kshot: &Dataset, holdout: &Dataset, seed: u64) -> Result<Vec<usize>>;
}

/// Holdout split, per-cell sampling and scoring. Failed cells are recorded
/// with their error rather than aborting the run. `jobs > 1` evaluates cells
/// on a thread pool; the report is the same either way.
pub fn run_protocol(
    spec: &ProtocolSpec,
    test_domain: &Dataset,
    runner: &mut dyn CellRunner,
    recipe: &str,
    config: serde_json::Value,
    jobs: usize,
) -> Result<EvaluationReport> {
    spec.validate()?;
    let (train_side, holdout) = holdout_split(test_domain, spec.holdout_fraction, spec.holdout_seed)?;
    runner.prepare(&train_side)?;
    let runner: &dyn CellRunner = runner;
    let grid: Vec<(usize, u64)> = spec
        .k_values
        .iter()
        .flat_map(|&k| spec.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let golds = holdout.labels();
    let eval = |&(k, seed): &(usize, u64)| -> Cell {
        let outcome = kshot_sample(&train_side, k, seed)
            .and_then(|(kshot, _)| runner.run_cell(&kshot, &holdout, seed))
            .and_then(|preds| macro_f1(&preds, &golds, holdout.n_classes()));
        match outcome {
            Ok(f1) => Cell {
                k,
                seed,
                f1: Some(f1),
                error: None,
            },
            Err(e) => {
                log::warn!("cell k={k} seed={seed} failed: {e}");
                Cell {
                    k,
                    seed,
                    f1: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let cells: Vec<Cell> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} worker threads: {e}")))?;
        pool.install(|| grid.par_iter().map(eval).collect())
    } else {
        grid.iter().map(eval).collect()
    };
    Ok(EvaluationReport::new(recipe, test_domain.domain_id(), config, cells))
}
