//! First-order MLDG: the meta-train loss F at θ plus β times the meta-test
//! loss G at the virtually updated θ′ = θ − α∇F.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{hidden_on_tape, output_on_tape, reset_output, OUT_B, OUT_W};
use super::proto::{accuracy, EpisodeLoss};
use super::{represent_batch_on_tape, BatchItem};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{sgd_step, ParamSet};
use crate::scalar::Scalar;

use super::episode::Episode;

/// Loss values and the combined gradient `∇F(θ) + β ∇G(θ′)`.
#[derive(Clone, Debug)]
pub struct MldgGradient<S> {
    pub f: S,
    pub g: S,
    pub grads: ParamSet<S>,
}

pub fn mldg_gradient<S: Scalar>(
    theta: &ParamSet<S>,
    alpha: f64,
    beta: f64,
    mut f_grad: impl FnMut(&ParamSet<S>) -> Result<(S, ParamSet<S>)>,
    mut g_grad: impl FnMut(&ParamSet<S>) -> Result<(S, ParamSet<S>)>,
) -> Result<MldgGradient<S>> {
    let (f, mut grads) = f_grad(theta)?;
    let mut virtual_theta = theta.clone();
    sgd_step(&mut virtual_theta, &grads, S::lit(alpha));
    let (g, g_grads) = g_grad(&virtual_theta)?;
    let g_grads = g_grads.restrict_to(theta);
    // names reached only by G start from zero
    grads.merge_missing(&g_grads.zeros_like());
    grads.axpy(S::lit(beta), &g_grads);
    Ok(MldgGradient { f, g, grads })
}

/// `θ ← θ − γ (∇F(θ) + β ∇G(θ′))` with plain gradient descent.
pub fn mldg_update<S: Scalar>(
    theta: &ParamSet<S>,
    alpha: f64,
    beta: f64,
    gamma: f64,
    f_grad: impl FnMut(&ParamSet<S>) -> Result<(S, ParamSet<S>)>,
    g_grad: impl FnMut(&ParamSet<S>) -> Result<(S, ParamSet<S>)>,
) -> Result<ParamSet<S>> {
    let step = mldg_gradient(theta, alpha, beta, f_grad, g_grad)?;
    let mut out = theta.clone();
    sgd_step(&mut out, &step.grads, S::lit(gamma));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MldgHeadConfig {
    /// Gradient steps fitting the zeroed output columns on the support set.
    pub steps: usize,
    pub lr: f64,
}

impl Default for MldgHeadConfig {
    fn default() -> Self {
        Self { steps: 5, lr: 1.0 }
    }
}

/// Episode loss through the classification head. The per-class output
/// columns start at zero, are fitted on detached support features, and are
/// then held fixed while the query loss is differentiated with respect to
/// the encoder and shared hidden layer in `params`.
pub fn mldg_episode_loss<S: Scalar>(
    model: &Model<S>,
    params: &ParamSet<S>,
    ep: &Episode,
    head: &MldgHeadConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EpisodeLoss<S>> {
    ep.validate()?;
    let d = model.d_model();
    let support: Vec<BatchItem<'_>> = ep.support.iter().map(|(e, _)| (e.text.as_str(), None)).collect();
    let query: Vec<BatchItem<'_>> = ep.query.iter().map(|(e, _)| (e.text.as_str(), None)).collect();
    let support_classes = ep.support_classes();

    let features = {
        let mut tape = Tape::new();
        let mut cache = Default::default();
        let reps = represent_batch_on_tape(
            &mut tape,
            model,
            params,
            &ep.manifest,
            &support,
            &mut cache,
            rng.as_deref_mut(),
        )?;
        let h = hidden_on_tape(&mut tape, params, reps)?;
        tape.value(h).clone()
    };
    let mut output = ParamSet::new();
    reset_output::<S, ChaCha8Rng>(&mut output, d, ep.n_way, None);
    for _ in 0..head.steps {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let z = output_on_tape(&mut tape, &output, f)?;
        let loss = tape.cross_entropy(z, &support_classes)?;
        tape.backward(loss);
        sgd_step(&mut output, &tape.param_grads(), S::lit(head.lr));
    }

    let mut tape = Tape::new();
    let mut cache = Default::default();
    let reps = represent_batch_on_tape(&mut tape, model, params, &ep.manifest, &query, &mut cache, rng)?;
    let h = hidden_on_tape(&mut tape, params, reps)?;
    let w = tape.constant(output.get(OUT_W)?.clone());
    let b = tape.constant(output.get(OUT_B)?.clone());
    let z = tape.matmul(h, w);
    let logits = tape.add_row(z, b);
    let targets = ep.query_classes();
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("episode loss".into()));
    }
    let accuracy = accuracy(tape.value(logits), &targets);
    tape.backward(loss);
    Ok(EpisodeLoss {
        loss: value,
        grads: tape.param_grads().restrict_to(params),
        accuracy,
    })
}
