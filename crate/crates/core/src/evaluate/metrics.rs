use num_traits::{FromPrimitive, Num};

use crate::error::{Error, Result};

/// Per-class `(tp, fp, fn)` counts.
pub fn confusion_counts(
    predictions: &[usize],
    golds: &[usize],
    n_classes: usize,
) -> Result<Vec<(usize, usize, usize)>> {
    if predictions.len() != golds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut counts = vec![(0, 0, 0); n_classes];
    for (&p, &g) in predictions.iter().zip(golds) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class index {} outside {n_classes} classes",
                p.max(g)
            )));
        }
        if p == g {
            counts[p].0 += 1;
        } else {
            counts[p].1 += 1;
            counts[g].2 += 1;
        }
    }
    Ok(counts)
}

fn lift<T: FromPrimitive>(n: usize) -> T {
    T::from_usize(n).expect("count representable in the metric type")
}

/// F1 per class as `2tp / (2tp + fp + fn)`, which is `2PR/(P+R)` whenever
/// that is defined and 0 otherwise.
pub fn per_class_f1<T: Num + Clone + FromPrimitive>(
    predictions: &[usize],
    golds: &[usize],
    n_classes: usize,
) -> Result<Vec<T>> {
    Ok(confusion_counts(predictions, golds, n_classes)?
        .into_iter()
        .map(|(tp, fp, fne)| {
            let denom = 2 * tp + fp + fne;
            if tp == 0 {
                T::zero()
            } else {
                lift::<T>(2 * tp) / lift::<T>(denom)
            }
        })
        .collect())
}

/// Unweighted mean of per-class F1 over all `n_classes` classes.
pub fn macro_f1_in<T: Num + Clone + FromPrimitive>(
    predictions: &[usize],
    golds: &[usize],
    n_classes: usize,
) -> Result<T> {
    if n_classes == 0 {
        return Err(Error::InvalidArgument("macro F1 needs at least one class".into()));
    }
    let total = per_class_f1::<T>(predictions, golds, n_classes)?
        .into_iter()
        .fold(T::zero(), |a, b| a + b);
    Ok(total / lift::<T>(n_classes))
}

pub fn macro_f1(predictions: &[usize], golds: &[usize], n_classes: usize) -> Result<f64> {
    macro_f1_in(predictions, golds, n_classes)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let f = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((f - 0.7333).abs() < 1e-4);
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_swapped() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 0, 1], &[0, 1, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        // class 2 never predicted nor present
        let f = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
        assert!(macro_f1(&[2], &[0], 2).is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
        assert!(mean_std(&[]).is_none());
    }
}
