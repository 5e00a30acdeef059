//! Named parameter tensors, component groups and the AdamW optimizer.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Learning-rate groups: word embedding / encoder (E), joint attention (A)
/// and classification heads (C). The MLM prediction head trains with the
/// encoder rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Attention,
    Head,
}

impl Component {
    pub fn of(name: &str) -> Self {
        if name.starts_with("joint.") {
            Component::Attention
        } else if name.starts_with("head.") {
            Component::Head
        } else {
            Component::Encoder
        }
    }
}

/// Ordered map from parameter name to tensor. Also used for gradients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<S> {
    tensors: IndexMap<String, Matrix<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix<S>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix<S>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix<S>> {
        self.tensors.shift_remove(name)
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix<S>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.data().len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), Matrix::zeros(m.rows(), m.cols())))
                .collect(),
        }
    }

    /// `self += alpha * other` over names present in both sets.
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        for (name, value) in self.tensors.iter_mut() {
            if let Some(delta) = other.tensors.get(name) {
                value.axpy(alpha, delta);
            }
        }
    }

    /// Copies in every tensor of `other` whose name is not already present.
    pub fn merge_missing(&mut self, other: &Self) {
        for (k, v) in &other.tensors {
            if !self.tensors.contains_key(k) {
                self.tensors.insert(k.clone(), v.clone());
            }
        }
    }

    /// Restricts to the names present in `template`.
    pub fn restrict_to(&self, template: &Self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| template.tensors.contains_key(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Matrix::is_finite)
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

pub(crate) fn normal_matrix<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<S> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| S::lit(normal.sample(rng)))
}

/// LeCun-normal weight of shape `fan_in × fan_out`.
pub(crate) fn linear_weight<S: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix<S> {
    normal_matrix(rng, fan_in, fan_out, (1.0 / fan_in as f64).sqrt())
}

/// Per-component learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentRates {
    pub encoder: f64,
    pub attention: f64,
    pub head: f64,
}

impl ComponentRates {
    pub fn uniform(rate: f64) -> Self {
        Self {
            encoder: rate,
            attention: rate,
            head: rate,
        }
    }

    pub fn rate(&self, component: Component) -> f64 {
        match component {
            Component::Encoder => self.encoder,
            Component::Attention => self.attention,
            Component::Head => self.head,
        }
    }

    pub fn all_positive(&self) -> bool {
        self.encoder > 0.0 && self.attention > 0.0 && self.head > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments<S> {
    m: Matrix<S>,
    v: Matrix<S>,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    moments: IndexMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// whose shape changed since the last step (embedding growth) restart
    /// their moment estimates.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>, rates: &ComponentRates) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bias1 = S::lit(1.0 - b1.powi(t));
        let bias2 = S::lit(1.0 - b2.powi(t));
        let (b1, b2) = (S::lit(b1), S::lit(b2));
        let eps = S::lit(self.config.eps);
        let wd = S::lit(self.config.weight_decay);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.tensors.get(name) else {
                continue;
            };
            let lr = S::lit(rates.rate(Component::of(name)));
            let entry = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Matrix::zeros(param.rows(), param.cols()),
                v: Matrix::zeros(param.rows(), param.cols()),
            });
            if entry.m.shape() != param.shape() {
                entry.m = Matrix::zeros(param.rows(), param.cols());
                entry.v = Matrix::zeros(param.rows(), param.cols());
            }
            let p = param.data_mut();
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        }
    }
}

/// Plain gradient descent `params -= rate * grads` on the names present in both.
pub fn sgd_step<S: Scalar>(params: &mut ParamSet<S>, grads: &ParamSet<S>, rate: S) {
    params.axpy(-rate, grads);
}
