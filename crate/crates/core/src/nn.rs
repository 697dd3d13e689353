//! Layers, parameter registry, optimizers, and learning-rate schedules.

use crate::rng::rng_from;
use crate::scalar::Scalar;
use crate::tensor::{self, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;

/// Kaiming-style init for layers followed by ReLU.
pub fn kaiming_normal<S: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> ArrayD<S> {
    let mut rng = rng_from(seed);
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        S::from_f64(z * std)
    })
}

pub fn uniform_init<S: Scalar>(shape: &[usize], bound: f64, seed: u64) -> ArrayD<S> {
    let mut rng = rng_from(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        S::from_f64(rng.random_range(-bound..bound))
    })
}

#[derive(Clone)]
pub struct Conv2d<S: Scalar> {
    pub weight: Var<S>,
    pub bias: Var<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Var::param(kaiming_normal(&[out_ch, in_ch, kernel, kernel], fan_in, seed)),
            bias: Var::param(ArrayD::zeros(IxDyn(&[out_ch]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Var<S>) -> Var<S> {
        tensor::conv2d(x, &self.weight, &self.bias, self.stride, self.pad)
    }
}

#[derive(Clone)]
pub struct Linear<S: Scalar> {
    pub weight: Var<S>,
    pub bias: Var<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        Linear {
            weight: Var::param(uniform_init(&[out_dim, in_dim], bound, seed)),
            bias: Var::param(ArrayD::zeros(IxDyn(&[out_dim]))),
        }
    }

    pub fn forward(&self, x: &Var<S>) -> Var<S> {
        tensor::linear(x, &self.weight, &self.bias)
    }
}

/// Batch norm over `(n, c)` rows with running statistics for eval mode.
pub struct BatchNorm1d<S: Scalar> {
    pub gamma: Var<S>,
    pub beta: Var<S>,
    pub running_mean: RefCell<Array1<S>>,
    pub running_var: RefCell<Array1<S>>,
    pub eps: S,
    pub momentum: S,
    pub training: Cell<bool>,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Var::param(ArrayD::ones(IxDyn(&[dim]))),
            beta: Var::param(ArrayD::zeros(IxDyn(&[dim]))),
            running_mean: RefCell::new(Array1::zeros(dim)),
            running_var: RefCell::new(Array1::ones(dim)),
            eps: S::from_f64(1e-5),
            momentum: S::from_f64(0.1),
            training: Cell::new(true),
        }
    }

    pub fn forward(&self, x: &Var<S>) -> Var<S> {
        if self.training.get() {
            let (y, mean, var) = tensor::batchnorm1d_train(x, &self.gamma, &self.beta, self.eps);
            let m = self.momentum;
            let one_m = S::one() - m;
            {
                let mut rm = self.running_mean.borrow_mut();
                *rm = &*rm * one_m + &(mean * m);
                let mut rv = self.running_var.borrow_mut();
                *rv = &*rv * one_m + &(var * m);
            }
            y
        } else {
            tensor::batchnorm1d_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            )
        }
    }
}

/// Named parameter collection gathered from a network.
pub struct ParamSet<S: Scalar> {
    pub entries: Vec<(String, Var<S>)>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, var: &Var<S>) {
        self.entries.push((name.into(), var.clone()));
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet<S>) {
        for (name, var) in other.entries {
            self.entries.push((format!("{prefix}.{name}"), var));
        }
    }

    pub fn vars(&self) -> Vec<Var<S>> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn set_trainable(&self, trainable: bool) {
        for (_, v) in &self.entries {
            v.set_trainable(trainable);
        }
    }

    pub fn zero_grads(&self) {
        for (_, v) in &self.entries {
            v.zero_grad();
        }
    }

    /// Order-independent checksum of all parameter bytes; used by the
    /// freeze-contract tests and checkpoint manifests.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut sorted: Vec<&(String, Var<S>)> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, var) in sorted {
            hasher.update(name.as_bytes());
            for x in var.value().iter() {
                hasher.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(&hasher.finalize()[..16])
    }
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer used for the stage-I decoder.
pub struct Adam<S: Scalar> {
    pub lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: u64,
    state: HashMap<u64, (ArrayD<S>, ArrayD<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Adam {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Var<S>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for p in params {
            let Some(g) = p.take_grad() else { continue };
            let (m, v) = self
                .state
                .entry(p.id())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            *m = &*m * self.beta1 + &(&g * (S::one() - self.beta1));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (S::one() - self.beta2));
            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let lr = self.lr;
            let eps = self.eps;
            p.update(|w| {
                ndarray::Zip::from(w)
                    .and(&m_hat)
                    .and(&v_hat)
                    .for_each(|wi, &mi, &vi| {
                        *wi = *wi - lr * mi / (vi.sqrt() + eps);
                    });
            });
        }
    }
}

/// SGD with momentum and weight decay used for the stage-II fine-tune.
pub struct SgdMomentum<S: Scalar> {
    pub lr: S,
    momentum: S,
    weight_decay: S,
    state: HashMap<u64, ArrayD<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(lr: S, momentum: S, weight_decay: S) -> Self {
        SgdMomentum {
            lr,
            momentum,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Var<S>]) {
        for p in params {
            let Some(g) = p.take_grad() else { continue };
            let g = if self.weight_decay > S::zero() {
                &g + &(&*p.value() * self.weight_decay)
            } else {
                g
            };
            let v = self
                .state
                .entry(p.id())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = &*v * self.momentum + &g;
            let lr = self.lr;
            let vref = &*v;
            p.update(|w| {
                ndarray::Zip::from(w).and(vref).for_each(|wi, &vi| {
                    *wi = *wi - lr * vi;
                });
            });
        }
    }
}

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

/// Milestone decay: multiply by `gamma` at each listed epoch.
pub fn multistep_lr(base: f64, epoch: usize, milestones: &[usize], gamma: f64) -> f64 {
    let hits = milestones.iter().filter(|&&m| epoch >= m).count();
    base * gamma.powi(hits as i32)
}

/// Cosine annealing from `base` to zero over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch as f64) / (total as f64);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
