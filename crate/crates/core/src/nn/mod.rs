//! Minimal convolutional layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, so a
//! layer must see `forward` then at most one `backward` per step.

mod batchnorm;
mod conv;
mod stage;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use stage::{Activation, Stage, StageSpec, StageStack};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Forward-pass mode. Batch normalization uses batch statistics in
/// `Train` and running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable array with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub moment1: Vec<T>,
    pub moment2: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>, shape: Vec<usize>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            value,
            grad: vec![T::zero(); n],
            moment1: vec![T::zero(); n],
            moment2: vec![T::zero(); n],
            shape,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(vec![T::zero(); n], shape)
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(vec![v; n], shape)
    }

    /// He-normal initialization for a layer with `fan_in` inputs.
    pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Self::new(value, shape)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor over named parameters and buffers, used by the optimizer and
/// the checkpoint writer.
pub trait Parameters<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Non-trainable state (batch-norm running statistics).
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    /// Applies one update with learning rate `lr` to every parameter of `model`.
    pub fn step<T: Scalar, M: Parameters<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        model.visit_params("", &mut |_, p| {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.moment1[i] = b1 * p.moment1[i] + one_b1 * g;
                p.moment2[i] = b2 * p.moment2[i] + one_b2 * g * g;
                let denom = p.moment2[i].sqrt() / bc2_sqrt + eps;
                p.value[i] -= step_size * p.moment1[i] / denom;
            }
        });
    }
}

/// Cosine annealing from `initial` at step 0 down to 0 at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct CosineAnnealing {
    pub initial: f64,
    pub total_steps: u64,
}

impl CosineAnnealing {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.initial;
        }
        let s = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.initial * (1.0 + (std::f64::consts::PI * s).cos())
    }
}
