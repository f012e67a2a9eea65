//! Patch discriminator and least-squares adversarial losses.

use rand::Rng;

use crate::autoencoder::ArchitectureConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mode, Param, Parameters, StageSpec, StageStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Four stride-2 convolutions ending in a one-channel map of patch scores.
/// A 64x64 frame yields a 4x4 score map.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    pub net: StageStack<T>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    pub fn new(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Self {
        let [d1, d2, d3] = arch.discriminator_channels;
        let act = Activation::LeakyRelu(arch.leaky_slope);
        let stage = |i, o, activation| StageSpec {
            in_channels: i,
            out_channels: o,
            stride: 2,
            upsample: false,
            batch_norm: false,
            activation,
        };
        let specs = [
            stage(3, d1, act),
            stage(d1, d2, act),
            stage(d2, d3, act),
            stage(d3, 1, Activation::Identity),
        ];
        Self {
            net: StageStack::new(&specs, rng),
        }
    }

    pub fn scores(&mut self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        if frames.channels() != 3 || frames.height() % 16 != 0 || frames.width() % 16 != 0 {
            return Err(Error::Shape(format!(
                "discriminator needs [B, 3, 16k, 16k] frames, got {:?}",
                frames.shape()
            )));
        }
        // No batch norm, so the mode only matters for caching.
        Ok(self.net.forward(frames, Mode::Train))
    }

    /// Generator-side loss on `fake` and its gradient with respect to `fake`.
    /// Parameter gradients of the discriminator are touched; callers clear them.
    pub fn generator_loss(&mut self, fake: &Tensor<T>) -> Result<(T, Tensor<T>)> {
        let scores = self.scores(fake)?;
        let (loss, grad) = generator_adv_loss(&scores);
        Ok((loss, self.net.backward(&grad)))
    }

    /// Discriminator loss on one real and one detached fake batch, evaluated
    /// in a single concatenated pass. Accumulates discriminator gradients.
    pub fn discriminator_step(&mut self, real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
        real.ensure_same_shape(fake)?;
        let both = Tensor::stack_batch(&[real.clone(), fake.clone()])?;
        let scores = self.scores(&both)?;
        let b = real.batch();
        let parts: Vec<Tensor<T>> = (0..2 * b).map(|i| scores.sample_tensor(i)).collect();
        let real_scores = Tensor::stack_batch(&parts[..b])?;
        let fake_scores = Tensor::stack_batch(&parts[b..])?;
        let (loss, gr, gf) = discriminator_loss(&real_scores, &fake_scores)?;
        let grad = Tensor::stack_batch(&[gr, gf])?;
        self.net.backward(&grad);
        Ok(loss)
    }
}

impl<T: Scalar> Parameters<T> for PatchDiscriminator<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.net.visit_params(prefix, f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.net.visit_buffers(prefix, f);
    }
}

/// `mean ½ (D(x̂) − 1)²` over all patches of the batch, with its gradient.
pub fn generator_adv_loss<T: Scalar>(fake_scores: &Tensor<T>) -> (T, Tensor<T>) {
    let n = T::from_usize(fake_scores.len()).unwrap();
    let half = T::lit(0.5);
    let loss = fake_scores.data().iter().map(|&d| half * (d - T::one()) * (d - T::one())).sum::<T>() / n;
    let grad = fake_scores.map(|d| (d - T::one()) / n);
    (loss, grad)
}

/// `mean ½ (D(x) − 1)² + mean ½ D(x̂)²` with gradients for both score maps.
pub fn discriminator_loss<T: Scalar>(
    real_scores: &Tensor<T>,
    fake_scores: &Tensor<T>,
) -> Result<(T, Tensor<T>, Tensor<T>)> {
    real_scores.ensure_same_shape(fake_scores)?;
    let (real_loss, grad_real) = generator_adv_loss(real_scores);
    let n = T::from_usize(fake_scores.len()).unwrap();
    let half = T::lit(0.5);
    let fake_loss = fake_scores.data().iter().map(|&d| half * d * d).sum::<T>() / n;
    let grad_fake = fake_scores.map(|d| d / n);
    Ok((real_loss + fake_loss, grad_real, grad_fake))
}
