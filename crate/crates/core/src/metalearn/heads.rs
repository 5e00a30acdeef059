//! Feed-forward classification head: a shared `d → d` tanh layer followed by
//! one `d → 1` output column per class.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{linear_weight, normal_matrix, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const HIDDEN_W: &str = "head.hidden_w";
pub const HIDDEN_B: &str = "head.hidden_b";
pub const OUT_W: &str = "head.out_w";
pub const OUT_B: &str = "head.out_b";

/// Adds the hidden layer unless one is already present.
pub fn ensure_hidden<S: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<S>, d_model: usize, rng: &mut R) {
    if !params.contains(HIDDEN_W) {
        params.insert(HIDDEN_W, linear_weight(rng, d_model, d_model));
        params.insert(HIDDEN_B, Matrix::zeros(1, d_model));
    }
}

/// Replaces the output layer with `n_classes` fresh columns: small normal
/// weights when an rng is given, zeros otherwise.
pub fn reset_output<S: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<S>,
    d_model: usize,
    n_classes: usize,
    rng: Option<&mut R>,
) {
    let w = match rng {
        Some(rng) => normal_matrix(rng, d_model, n_classes, 0.02),
        None => Matrix::zeros(d_model, n_classes),
    };
    params.insert(OUT_W, w);
    params.insert(OUT_B, Matrix::zeros(1, n_classes));
}

/// Shared hidden layer plus zeroed per-class output columns, as used for each
/// MLDG episode.
pub fn mldg_head_build<S: Scalar, R: Rng + ?Sized>(
    params: &mut ParamSet<S>,
    n_classes: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "a head needs at least 2 classes, got {n_classes}"
        )));
    }
    ensure_hidden(params, d_model, rng);
    reset_output::<S, R>(params, d_model, n_classes, None);
    Ok(())
}

/// `tanh(reps · W_h + b_h)`.
pub fn hidden_on_tape<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet<S>, reps: Var) -> Result<Var> {
    let w = tape.param(params, HIDDEN_W)?;
    let b = tape.param(params, HIDDEN_B)?;
    let z = tape.matmul(reps, w);
    let z = tape.add_row(z, b);
    Ok(tape.tanh(z))
}

/// `features · W_o + b_o` with the output layer taken from `output`.
pub fn output_on_tape<S: Scalar>(tape: &mut Tape<S>, output: &ParamSet<S>, features: Var) -> Result<Var> {
    let w = tape.param(output, OUT_W)?;
    let b = tape.param(output, OUT_B)?;
    let z = tape.matmul(features, w);
    Ok(tape.add_row(z, b))
}

pub fn classifier_logits_on_tape<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet<S>, reps: Var) -> Result<Var> {
    let h = hidden_on_tape(tape, params, reps)?;
    output_on_tape(tape, params, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_gives_uniform_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        mldg_head_build(&mut p, 3, 8, &mut rng).unwrap();
        assert_eq!(p.get(OUT_W).unwrap().shape(), (8, 3));
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_fn(2, 8, |i, j| (i + j) as f64 * 0.1));
        let z = classifier_logits_on_tape(&mut tape, &p, x).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rebuild_rezeroes_output_and_keeps_hidden() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::<f64>::new();
        mldg_head_build(&mut p, 2, 4, &mut rng).unwrap();
        let hidden = p.get(HIDDEN_W).unwrap().clone();
        p.get_mut(OUT_W).unwrap().set(0, 0, 5.0);
        mldg_head_build(&mut p, 2, 4, &mut rng).unwrap();
        assert_eq!(p.get(OUT_W).unwrap().sum(), 0.0);
        assert_eq!(p.get(HIDDEN_W).unwrap(), &hidden);
        assert!(mldg_head_build(&mut p, 1, 4, &mut rng).is_err());
    }
}
