use super::metrics::macro_f1;
use crate::corpus::{kshot_sample, Dataset};
use crate::error::{Error, Result};

/// Scores of every candidate and the index of the winner.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Fine-tunes each candidate on a K-shot sample of `train_side` and scores it
/// by macro-F1 on a `validation_k`-per-class slice of the leftover examples.
/// Ties go to the earlier candidate.
pub fn select_hyperparams<C>(
    candidates: &[C],
    train_side: &Dataset,
    k: usize,
    validation_k: usize,
    seed: u64,
    run: impl Fn(&C, &Dataset, &Dataset) -> Result<Vec<usize>>,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no hyperparameter candidates".into()));
    }
    let (kshot, rest) = kshot_sample(train_side, k, seed)?;
    let (validation, _) = kshot_sample(&rest, validation_k, seed)?;
    let golds = validation.labels();
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        let preds = run(c, &kshot, &validation)?;
        scores.push(macro_f1(&preds, &golds, validation.n_classes())?);
    }
    let mut index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[index] {
            index = i;
        }
    }
    Ok(Selection { index, scores })
}
