//! Prototypical classification: class means and softmax over negative distances.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{represent_batch_on_tape, BatchItem};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{squared_distance, Matrix};

use super::episode::Episode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Euclidean => "euclidean",
            Distance::SquaredEuclidean => "squared_euclidean",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "squared_euclidean" => Ok(Distance::SquaredEuclidean),
            other => Err(Error::InvalidArgument(format!(
                "unknown distance {other:?} (expected euclidean or squared_euclidean)"
            ))),
        }
    }
}

impl Distance {
    pub fn eval<S: Scalar>(self, a: &[S], b: &[S]) -> S {
        let sq = squared_distance(a, b);
        match self {
            Distance::Euclidean => sq.sqrt(),
            Distance::SquaredEuclidean => sq,
        }
    }
}

/// Class centroids; row `c` is the prototype of class `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes<S> {
    pub vectors: Matrix<S>,
}

impl<S: Scalar> Prototypes<S> {
    pub fn n_classes(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn distances(&self, q: &[S], distance: Distance) -> Vec<S> {
        (0..self.n_classes())
            .map(|c| distance.eval(q, self.vectors.row(c)))
            .collect()
    }

    /// Index of the closest prototype; ties go to the lowest index.
    pub fn nearest(&self, q: &[S], distance: Distance) -> usize {
        argmin(&self.distances(q, distance))
    }
}

pub(crate) fn argmin<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Row-wise mean per class. `vectors` row `i` belongs to `classes[i]`.
pub fn compute_prototypes<S: Scalar>(
    vectors: &Matrix<S>,
    classes: &[usize],
    n_classes: usize,
) -> Result<Prototypes<S>> {
    if vectors.rows() != classes.len() {
        return Err(Error::Shape(format!(
            "{} support vectors but {} classes",
            vectors.rows(),
            classes.len()
        )));
    }
    let mut sums = Matrix::zeros(n_classes, vectors.cols());
    let mut counts = vec![0usize; n_classes];
    for (i, &c) in classes.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::InvalidArgument(format!("class {c} outside {n_classes} classes")));
        }
        counts[c] += 1;
        for (s, &v) in sums.row_mut(c).iter_mut().zip(vectors.row(i)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {c} has no support vectors")));
    }
    for (c, &n) in counts.iter().enumerate() {
        let n = S::from_usize(n).expect("count fits the scalar type");
        for s in sums.row_mut(c) {
            *s /= n;
        }
    }
    Ok(Prototypes { vectors: sums })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification<S> {
    pub probs: Vec<S>,
    /// Nearest prototype.
    pub predicted: usize,
}

/// Softmax over negative distances to each prototype.
pub fn proto_classify<S: Scalar>(q: &[S], protos: &Prototypes<S>, distance: Distance) -> Result<Classification<S>> {
    if protos.n_classes() == 0 {
        return Err(Error::InvalidArgument("no prototypes".into()));
    }
    if q.len() != protos.dim() {
        return Err(Error::Shape(format!(
            "query of width {} against prototypes of width {}",
            q.len(),
            protos.dim()
        )));
    }
    let d = protos.distances(q, distance);
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("prototype distance".into()));
    }
    let predicted = argmin(&d);
    let m = d[predicted];
    let e: Vec<S> = d.iter().map(|&x| (m - x).exp()).collect();
    let z: S = e.iter().copied().sum();
    Ok(Classification {
        probs: e.into_iter().map(|x| x / z).collect(),
        predicted,
    })
}

/// `N × n` matrix whose product with the stacked support rows gives the class means.
pub fn averaging_matrix<S: Scalar>(classes: &[usize], n_classes: usize) -> Result<Matrix<S>> {
    let mut counts = vec![0usize; n_classes];
    for &c in classes {
        if c >= n_classes {
            return Err(Error::InvalidArgument(format!("class {c} outside {n_classes} classes")));
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {c} has no support vectors")));
    }
    Ok(Matrix::from_fn(n_classes, classes.len(), |c, i| {
        if classes[i] == c {
            S::one() / S::from_usize(counts[c]).expect("count fits the scalar type")
        } else {
            S::zero()
        }
    }))
}

/// Negative query-to-prototype distances (`n_query × N`), differentiable
/// through the prototypes.
pub fn proto_logits_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    support: Var,
    classes: &[usize],
    n_classes: usize,
    query: Var,
    distance: Distance,
) -> Result<Var> {
    let avg = tape.constant(averaging_matrix(classes, n_classes)?);
    let protos = tape.matmul(avg, support);
    let mut d = tape.sq_dist(query, protos);
    if distance == Distance::Euclidean {
        d = tape.sqrt(d);
    }
    Ok(tape.scale(d, -S::one()))
}

/// Mean query negative log-likelihood for fixed representation vectors.
pub fn proto_loss_from_vectors<S: Scalar>(
    support: &Matrix<S>,
    classes: &[usize],
    query: &Matrix<S>,
    query_classes: &[usize],
    n_classes: usize,
    distance: Distance,
) -> Result<S> {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let q = tape.constant(query.clone());
    let logits = proto_logits_on_tape(&mut tape, s, classes, n_classes, q, distance)?;
    let loss = tape.cross_entropy(logits, query_classes)?;
    Ok(tape.scalar(loss))
}

/// Loss value, parameter gradients and query accuracy of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeLoss<S> {
    pub loss: S,
    pub grads: ParamSet<S>,
    pub accuracy: f64,
}

pub(crate) fn accuracy<S: Scalar>(logits: &Matrix<S>, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = targets
        .iter()
        .enumerate()
        .filter(|(i, &t)| argmax(logits.row(*i)) == t)
        .count();
    hits as f64 / targets.len() as f64
}

/// Stacked support (gold label fused) and query (no label) representations.
pub(crate) fn episode_representations<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    params: &ParamSet<S>,
    ep: &Episode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let labels = &ep.manifest.labels;
    let support: Vec<BatchItem<'_>> = ep
        .support
        .iter()
        .map(|(e, c)| (e.text.as_str(), Some(&labels[*c])))
        .collect();
    let query: Vec<BatchItem<'_>> = ep.query.iter().map(|(e, _)| (e.text.as_str(), None)).collect();
    let mut cache = Default::default();
    let s = represent_batch_on_tape(
        tape,
        model,
        params,
        &ep.manifest,
        &support,
        &mut cache,
        rng.as_deref_mut(),
    )?;
    let q = represent_batch_on_tape(tape, model, params, &ep.manifest, &query, &mut cache, rng)?;
    Ok((s, q))
}

/// Prototypical episode loss with gradients for every model parameter.
/// Passing an rng enables dropout.
pub fn proto_episode_loss<S: Scalar>(
    model: &Model<S>,
    ep: &Episode,
    distance: Distance,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EpisodeLoss<S>> {
    ep.validate()?;
    let mut tape = Tape::new();
    let (s, q) = episode_representations(&mut tape, model, &model.params, ep, rng)?;
    let logits = proto_logits_on_tape(&mut tape, s, &ep.support_classes(), ep.n_way, q, distance)?;
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
        grads: tape.param_grads(),
        accuracy,
    })
}
