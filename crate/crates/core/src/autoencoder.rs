//! Appearance and motion autoencoders, the joint prediction decoder, and
//! the two pretraining objectives (denoising for frames, reconstruction for
//! flow).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::add_salt_pepper;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mode, Param, Parameters, StageSpec, StageStack};
use crate::scalar::Scalar;
use crate::tensor::{mse_with_grad, Tensor};

/// Network widths and input geometry shared by every sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Number of input frames per clip.
    #[serde(default = "default_k_in")]
    pub k_in: usize,
    /// `(height, width)` of every frame.
    #[serde(default = "default_resolution")]
    pub resolution: (usize, usize),
    /// Output channels of the five encoder stages; the last is `C`.
    #[serde(default = "default_encoder_channels")]
    pub encoder_channels: [usize; 5],
    #[serde(default = "default_encoder_strides")]
    pub encoder_strides: [usize; 5],
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    /// Hidden widths of the patch discriminator's first three stages.
    #[serde(default = "default_discriminator_channels")]
    pub discriminator_channels: [usize; 3],
}

fn default_k_in() -> usize {
    4
}
fn default_resolution() -> (usize, usize) {
    (64, 64)
}
fn default_encoder_channels() -> [usize; 5] {
    [32, 64, 128, 128, 128]
}
fn default_encoder_strides() -> [usize; 5] {
    [1, 2, 2, 2, 1]
}
fn default_leaky_slope() -> f64 {
    0.2
}
fn default_discriminator_channels() -> [usize; 3] {
    [32, 64, 128]
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            k_in: default_k_in(),
            resolution: default_resolution(),
            encoder_channels: default_encoder_channels(),
            encoder_strides: default_encoder_strides(),
            leaky_slope: default_leaky_slope(),
            discriminator_channels: default_discriminator_channels(),
        }
    }
}

impl ArchitectureConfig {
    pub fn feature_channels(&self) -> usize {
        self.encoder_channels[4]
    }

    pub fn downsampling(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    /// `(H_f, W_f)` of encoder outputs.
    pub fn feature_dims(&self) -> (usize, usize) {
        let f = self.downsampling();
        (self.resolution.0 / f, self.resolution.1 / f)
    }

    /// Queries per clip and stream, `N̂ = H_f · W_f`.
    pub fn n_queries(&self) -> usize {
        let (h, w) = self.feature_dims();
        h * w
    }

    pub fn appearance_channels(&self) -> usize {
        3 * self.k_in
    }

    pub fn motion_channels(&self) -> usize {
        2 * (self.k_in - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_in < 2 {
            return Err(Error::Config("k_in must be at least 2 (motion needs a frame pair)".into()));
        }
        if self.encoder_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("encoder strides must be 1 or 2".into()));
        }
        let halvings = self.encoder_strides.iter().filter(|&&s| s == 2).count();
        if halvings != 3 {
            return Err(Error::Config(format!(
                "encoder must downsample by 8 (three stride-2 stages), got {halvings}"
            )));
        }
        let f = self.downsampling();
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!(
                "resolution {h}x{w} is not divisible by the encoder downsampling factor {f}"
            )));
        }
        if self.encoder_channels.iter().chain(&self.discriminator_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Five conv + batch-norm + leaky-ReLU stages.
    pub fn encoder_specs(&self, in_channels: usize) -> Vec<StageSpec> {
        let mut prev = in_channels;
        self.encoder_channels
            .iter()
            .zip(&self.encoder_strides)
            .map(|(&out, &stride)| {
                let s = StageSpec {
                    in_channels: prev,
                    out_channels: out,
                    stride,
                    upsample: false,
                    batch_norm: true,
                    activation: Activation::LeakyRelu(self.leaky_slope),
                };
                prev = out;
                s
            })
            .collect()
    }

    /// Six stages mirroring the encoder; `output` is the final activation.
    pub fn pretrain_decoder_specs(&self, out_channels: usize, output: Activation) -> Vec<StageSpec> {
        let [c1, c2, c3, c4, c] = self.encoder_channels;
        let hidden = |i, o, up| StageSpec {
            in_channels: i,
            out_channels: o,
            stride: 1,
            upsample: up,
            batch_norm: true,
            activation: Activation::Relu,
        };
        vec![
            hidden(c, c4, false),
            hidden(c4, c3, true),
            hidden(c3, c2, true),
            hidden(c2, c1, true),
            hidden(c1, c1, false),
            StageSpec {
                in_channels: c1,
                out_channels,
                stride: 1,
                upsample: false,
                batch_norm: false,
                activation: output,
            },
        ]
    }

    /// Five stages from the `4C`-channel aggregate to one RGB frame in `[0, 1]`.
    pub fn joint_decoder_specs(&self) -> Vec<StageSpec> {
        let [c1, c2, c3, c4, c] = self.encoder_channels;
        let hidden = |i, o, up| StageSpec {
            in_channels: i,
            out_channels: o,
            stride: 1,
            upsample: up,
            batch_norm: true,
            activation: Activation::Relu,
        };
        vec![
            hidden(4 * c, c4, false),
            hidden(c4, c3, true),
            hidden(c3, c2, true),
            hidden(c2, c1, true),
            StageSpec {
                in_channels: c1,
                out_channels: 3,
                stride: 1,
                upsample: false,
                batch_norm: false,
                activation: Activation::Sigmoid,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Appearance,
    Motion,
}

/// Encoder output, `[B, C, H_f, W_f]`, tagged with its stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub tensor: Tensor<T>,
    pub stream: Stream,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn n_queries(&self) -> usize {
        self.tensor.plane()
    }

    pub fn channels(&self) -> usize {
        self.tensor.channels()
    }
}

/// Encoder/decoder pair of one stream.
#[derive(Debug, Clone)]
pub struct Autoencoder<T> {
    pub stream: Stream,
    pub encoder: StageStack<T>,
    pub decoder: StageStack<T>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn appearance(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Self {
        let ch = arch.appearance_channels();
        Self {
            stream: Stream::Appearance,
            encoder: StageStack::new(&arch.encoder_specs(ch), rng),
            decoder: StageStack::new(&arch.pretrain_decoder_specs(ch, Activation::Sigmoid), rng),
        }
    }

    pub fn motion(arch: &ArchitectureConfig, rng: &mut impl Rng) -> Self {
        let ch = arch.motion_channels();
        Self {
            stream: Stream::Motion,
            encoder: StageStack::new(&arch.encoder_specs(ch), rng),
            decoder: StageStack::new(&arch.pretrain_decoder_specs(ch, Activation::Identity), rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.encoder.stages[0].spec.in_channels
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "{:?} encoder expects {} channels, got {}",
                self.stream,
                self.in_channels(),
                x.channels()
            )));
        }
        if x.height() % 8 != 0 || x.width() % 8 != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by 8",
                x.height(),
                x.width()
            )));
        }
        Ok(())
    }

    pub fn encode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        Ok(FeatureMap {
            tensor: self.encoder.forward(x, mode),
            stream: self.stream,
        })
    }

    /// Mean squared reconstruction error of `target` from `input`;
    /// accumulates gradients into encoder and decoder.
    pub fn reconstruction_step(&mut self, input: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        self.check_input(input)?;
        let z = self.encoder.forward(input, Mode::Train);
        let recon = self.decoder.forward(&z, Mode::Train);
        let (loss, grad) = mse_with_grad(&recon, target)?;
        let gz = self.decoder.backward(&grad);
        self.encoder.backward(&gz);
        Ok(loss)
    }

    /// Reconstruction error without touching gradients.
    pub fn reconstruction_loss(&mut self, input: &Tensor<T>, target: &Tensor<T>, mode: Mode) -> Result<T> {
        self.check_input(input)?;
        let z = self.encoder.forward(input, mode);
        let recon = self.decoder.forward(&z, mode);
        crate::tensor::mse(&recon, target)
    }
}

impl<T: Scalar> Parameters<T> for Autoencoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_params(&format!("{prefix}encoder."), f);
        self.decoder.visit_params(&format!("{prefix}decoder."), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.encoder.visit_buffers(&format!("{prefix}encoder."), f);
        self.decoder.visit_buffers(&format!("{prefix}decoder."), f);
    }
}

/// Denoising objective: reconstruct clean stacked frames from a copy with
/// salt-and-pepper noise. Returns the loss; gradients accumulate in `ae`.
pub fn pretrain_appearance_step<T: Scalar>(
    ae: &mut Autoencoder<T>,
    clean: &Tensor<T>,
    noise_fraction: f64,
    noise_seed: u64,
) -> Result<T> {
    let noisy = add_salt_pepper(clean, noise_fraction, noise_seed)?;
    ae.reconstruction_step(&noisy, clean)
}

/// Flow reconstruction objective on stacked consecutive flows.
pub fn pretrain_motion_step<T: Scalar>(ae: &mut Autoencoder<T>, flows: &Tensor<T>) -> Result<T> {
    ae.reconstruction_step(flows, flows)
}

/// Channel concatenation `[z_a, ẑ_a, z_m, ẑ_m]`, each `C` channels wide.
/// Disabled parts are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatures<T> {
    pub tensor: Tensor<T>,
    pub feature_channels: usize,
}

impl<T: Scalar> AggregatedFeatures<T> {
    pub fn new(shape: [usize; 4], parts: [Option<&Tensor<T>>; 4]) -> Result<Self> {
        let zeros = Tensor::zeros(shape);
        let mut refs = Vec::with_capacity(4);
        for p in parts {
            let t = p.unwrap_or(&zeros);
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "aggregate part {:?} does not match {:?}",
                    t.shape(),
                    shape
                )));
            }
            refs.push(t);
        }
        Ok(Self {
            tensor: Tensor::concat_channels(&refs)?,
            feature_channels: shape[1],
        })
    }

    pub fn split(grad: &Tensor<T>, feature_channels: usize) -> Result<Vec<Tensor<T>>> {
        grad.split_channels(&[feature_channels; 4])
    }
}

/// Runs the joint decoder on aggregated features.
pub fn predict_frame<T: Scalar>(
    decoder: &mut StageStack<T>,
    aggregated: &AggregatedFeatures<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let want = decoder.stages[0].spec.in_channels;
    if aggregated.tensor.channels() != want {
        return Err(Error::Shape(format!(
            "joint decoder expects {want} channels, got {}",
            aggregated.tensor.channels()
        )));
    }
    Ok(decoder.forward(&aggregated.tensor, mode))
}
