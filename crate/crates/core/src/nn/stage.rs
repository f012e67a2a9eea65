use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm2d, Conv2d, Mode, Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if v > T::zero() {
                    v
                } else {
                    v * T::lit(slope)
                }
            }
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Identity => T::one(),
        }
    }
}

/// One layer of a plain stack: optional nearest x2 upsampling, a 3x3
/// convolution, optional batch normalization, then an activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub upsample: bool,
    pub batch_norm: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub spec: StageSpec,
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pre_act: Tensor<T>,
    post_act: Tensor<T>,
}

impl<T: Scalar> Stage<T> {
    pub fn new(spec: StageSpec, rng: &mut impl Rng) -> Self {
        Self {
            spec,
            conv: Conv2d::new(spec.in_channels, spec.out_channels, spec.stride, rng),
            bn: spec.batch_norm.then(|| BatchNorm2d::new(spec.out_channels)),
            pre_act: Tensor::zeros([0, 0, 0, 0]),
            post_act: Tensor::zeros([0, 0, 0, 0]),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let conv_out = if self.spec.upsample {
            self.conv.forward(&upsample2(x))
        } else {
            self.conv.forward(x)
        };
        let pre = match self.bn.as_mut() {
            Some(bn) => bn.forward(&conv_out, mode),
            None => conv_out,
        };
        let act = self.spec.activation;
        let post = pre.map(|v| act.apply(v));
        self.pre_act = pre;
        self.post_act = post.clone();
        post
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let act = self.spec.activation;
        let mut g = grad_out.clone();
        for ((gv, &x), &y) in g
            .data_mut()
            .iter_mut()
            .zip(self.pre_act.data())
            .zip(self.post_act.data())
        {
            *gv *= act.derivative(x, y);
        }
        if let Some(bn) = self.bn.as_mut() {
            g = bn.backward(&g);
        }
        let g = self.conv.backward(&g);
        if self.spec.upsample {
            downsample2_sum(&g)
        } else {
            g
        }
    }
}

impl<T: Scalar> Parameters<T> for Stage<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&format!("{prefix}conv."), f);
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_params(&format!("{prefix}bn."), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        if let Some(bn) = self.bn.as_mut() {
            bn.visit_buffers(&format!("{prefix}bn."), f);
        }
    }
}

/// A plain feed-forward stack of stages without skip connections.
#[derive(Debug, Clone)]
pub struct StageStack<T> {
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> StageStack<T> {
    pub fn new(specs: &[StageSpec], rng: &mut impl Rng) -> Self {
        for pair in specs.windows(2) {
            assert_eq!(
                pair[0].out_channels, pair[1].in_channels,
                "stage channel plan must chain"
            );
        }
        Self {
            stages: specs.iter().map(|s| Stage::new(*s, rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn specs(&self) -> Vec<StageSpec> {
        self.stages.iter().map(|s| s.spec).collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.forward(&h, mode);
        }
        h
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let mut g = grad_out.clone();
        for s in self.stages.iter_mut().rev() {
            g = s.backward(&g);
        }
        g
    }

    /// Net spatial scale factor (output size / input size).
    pub fn scale(&self) -> f64 {
        self.stages.iter().fold(1.0, |acc, s| {
            let up = if s.spec.upsample { 2.0 } else { 1.0 };
            acc * up / s.spec.stride as f64
        })
    }
}

impl<T: Scalar> Parameters<T> for StageStack<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_buffers(&format!("{prefix}{i}."), f);
        }
    }
}

fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for b in 0..n {
        let src = x.sample(b);
        let dst = out.sample_mut(b);
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

fn downsample2_sum<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = g.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        let src = g.sample(b);
        let dst = out.sample_mut(b);
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[(ch * h + y / 2) * w + x / 2] += src[(ch * h2 + y) * w2 + x];
                }
            }
        }
    }
    out
}
