//! First-order ProtoMAML: a linear head initialised from prototypes, adapted
//! on the support set, with query gradients applied to the original weights.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::proto::{accuracy, compute_prototypes, episode_representations, Prototypes};
use super::{represent_batch_on_tape, BatchItem};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{sgd_step, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::episode::Episode;

pub const HEAD_WEIGHT: &str = "head.proto_w";
pub const HEAD_BIAS: &str = "head.proto_b";

/// `logits = W x + b` with one weight row per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead<S> {
    pub weight: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> LinearHead<S> {
    pub fn logits(&self, x: &[S]) -> Vec<S> {
        (0..self.weight.rows())
            .map(|c| {
                let dot: S = self.weight.row(c).iter().zip(x).map(|(&w, &v)| w * v).sum();
                dot + self.bias.get(0, c)
            })
            .collect()
    }

    pub fn softmax(&self, x: &[S]) -> Vec<S> {
        let z = self.logits(x);
        let m = z.iter().copied().fold(S::neg_infinity(), S::max);
        let e: Vec<S> = z.iter().map(|&v| (v - m).exp()).collect();
        let total: S = e.iter().copied().sum();
        e.into_iter().map(|v| v / total).collect()
    }
}

/// Rows `2 v_c` and biases `-‖v_c‖²`, so that `logit_c(x) = ‖x‖² - ‖x - v_c‖²`.
pub fn protomaml_head_init<S: Scalar>(protos: &Prototypes<S>) -> LinearHead<S> {
    let two = S::lit(2.0);
    let weight = protos.vectors.map(|v| two * v);
    let bias = Matrix::from_fn(1, protos.n_classes(), |_, c| {
        -protos.vectors.row(c).iter().map(|&v| v * v).sum::<S>()
    });
    LinearHead { weight, bias }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoMamlConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
}

impl Default for ProtoMamlConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            inner_lr: 1e-3,
        }
    }
}

/// Runs `steps` plain gradient steps of size `rate` from `params`, asking
/// `loss_grad` for the loss and gradient at each iterate. Nothing is
/// differentiated through the updates.
pub fn first_order_adapt<S: Scalar>(
    params: &ParamSet<S>,
    steps: usize,
    rate: f64,
    mut loss_grad: impl FnMut(&ParamSet<S>) -> Result<(S, ParamSet<S>)>,
) -> Result<ParamSet<S>> {
    let mut adapted = params.clone();
    for step in 0..steps {
        let (loss, grads) = loss_grad(&adapted)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("inner loss at step {step}")));
        }
        sgd_step(&mut adapted, &grads, S::lit(rate));
    }
    Ok(adapted)
}

/// Outcome of one meta-step on an episode.
#[derive(Clone, Debug)]
pub struct MetaStep<S> {
    pub query_loss: S,
    /// Gradients for the model's own parameters.
    pub grads: ParamSet<S>,
    pub accuracy: f64,
}

fn head_logits<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet<S>, reps: Var) -> Result<Var> {
    let w = tape.param(params, HEAD_WEIGHT)?;
    let b = tape.param(params, HEAD_BIAS)?;
    let z = tape.matmul_nt(reps, w);
    Ok(tape.add_row(z, b))
}

/// One first-order ProtoMAML episode. Returns `None` (after logging a
/// warning) when the inner loop or query loss turns non-finite.
pub fn fo_protomaml_step<S: Scalar>(
    model: &Model<S>,
    ep: &Episode,
    cfg: &ProtoMamlConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<MetaStep<S>>> {
    ep.validate()?;
    let labels = &ep.manifest.labels;
    let support: Vec<BatchItem<'_>> = ep
        .support
        .iter()
        .map(|(e, c)| (e.text.as_str(), Some(&labels[*c])))
        .collect();
    let support_classes = ep.support_classes();

    // prototypes are treated as constants: read off a forward pass only
    let protos = {
        let mut tape = Tape::new();
        let (s, _) = episode_representations(&mut tape, model, &model.params, ep, rng.as_deref_mut())?;
        compute_prototypes(tape.value(s), &support_classes, ep.n_way)?
    };
    let head = protomaml_head_init(&protos);
    let mut start = model.params.clone();
    start.insert(HEAD_WEIGHT, head.weight);
    start.insert(HEAD_BIAS, head.bias);

    let adapted = first_order_adapt(&start, cfg.inner_steps, cfg.inner_lr, |p| {
        let mut tape = Tape::new();
        let mut cache = Default::default();
        let reps = represent_batch_on_tape(
            &mut tape,
            model,
            p,
            &ep.manifest,
            &support,
            &mut cache,
            rng.as_deref_mut(),
        )?;
        let logits = head_logits(&mut tape, p, reps)?;
        let loss = tape.cross_entropy(logits, &support_classes)?;
        let value = tape.scalar(loss);
        tape.backward(loss);
        Ok((value, tape.param_grads()))
    });
    let adapted = match adapted {
        Ok(p) => p,
        Err(Error::NonFinite(what)) => {
            log::warn!("skipping episode from {}: non-finite {what}", ep.domain_id);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };

    let query: Vec<BatchItem<'_>> = ep.query.iter().map(|(e, _)| (e.text.as_str(), None)).collect();
    let targets = ep.query_classes();
    let mut tape = Tape::new();
    let mut cache = Default::default();
    let reps = represent_batch_on_tape(&mut tape, model, &adapted, &ep.manifest, &query, &mut cache, rng)?;
    let logits = head_logits(&mut tape, &adapted, reps)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let query_loss = tape.scalar(loss);
    if !query_loss.is_finite() {
        log::warn!("skipping episode from {}: non-finite query loss", ep.domain_id);
        return Ok(None);
    }
    let accuracy = accuracy(tape.value(logits), &targets);
    tape.backward(loss);
    let grads = tape.param_grads().restrict_to(&model.params);
    Ok(Some(MetaStep {
        query_loss,
        grads,
        accuracy,
    }))
}
