//! Optical-flow providers for the motion stream and the motion loss.
//!
//! Two providers ship: [`FarnebackFlow`], a classical polynomial-expansion
//! dense flow used for motion inputs and reconstruction targets, and
//! [`ProxyFlow`], a differentiable temporal-difference surrogate used where
//! gradients must pass through the flow.

mod cache;
mod farneback;

pub use cache::{cache_flows, flow_cache_paths, load_flow_archive, FlowArchiveMeta};
pub use farneback::{FarnebackFlow, FarnebackParams};

use serde::{Deserialize, Serialize};

use crate::datasets::{Frame, Video};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[B, 2, H, W]` displacement field `(dx, dy)` in pixels per frame.
pub type FlowField<T> = Tensor<T>;

pub trait FlowProvider<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`FlowProvider::flow_vjp`] is available.
    fn differentiable(&self) -> bool;

    /// Flow carrying `frame_a` onto `frame_b` for every sample of the batch.
    fn pairwise_flow(&self, frame_a: &Tensor<T>, frame_b: &Tensor<T>) -> Result<FlowField<T>>;

    /// Gradient with respect to `frame_a` of `<grad, pairwise_flow(frame_a, frame_b)>`.
    fn flow_vjp(&self, frame_a: &Tensor<T>, frame_b: &Tensor<T>, grad: &FlowField<T>) -> Option<Result<Tensor<T>>> {
        let _ = (frame_a, frame_b, grad);
        None
    }
}

pub(crate) fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "flow needs equally shaped frames, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Channel mean of `a - b`, duplicated into both flow channels.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyFlow;

impl<T: Scalar> FlowProvider<T> for ProxyFlow {
    fn name(&self) -> &str {
        "proxy"
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn pairwise_flow(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<FlowField<T>> {
        check_pair(a, b)?;
        let [n, c, h, w] = a.shape();
        let plane = h * w;
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let mut out = Tensor::zeros([n, 2, h, w]);
        for s in 0..n {
            let (sa, sb) = (a.sample(s), b.sample(s));
            let o = out.sample_mut(s);
            for p in 0..plane {
                let mut acc = T::zero();
                for ch in 0..c {
                    acc += sa[ch * plane + p] - sb[ch * plane + p];
                }
                o[p] = acc * inv_c;
                o[plane + p] = acc * inv_c;
            }
        }
        Ok(out)
    }

    fn flow_vjp(&self, a: &Tensor<T>, b: &Tensor<T>, grad: &FlowField<T>) -> Option<Result<Tensor<T>>> {
        let run = || -> Result<Tensor<T>> {
            check_pair(a, b)?;
            let [n, c, h, w] = a.shape();
            if grad.shape() != [n, 2, h, w] {
                return Err(Error::Shape("flow gradient shape".into()));
            }
            let plane = h * w;
            let inv_c = T::one() / T::from_usize(c).unwrap();
            let mut out = Tensor::zeros(a.shape());
            for s in 0..n {
                let g = grad.sample(s);
                let o = out.sample_mut(s);
                for p in 0..plane {
                    let v = (g[p] + g[plane + p]) * inv_c;
                    for ch in 0..c {
                        o[ch * plane + p] = v;
                    }
                }
            }
            Ok(out)
        };
        Some(run())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Farneback,
    Proxy,
}

impl ProviderKind {
    pub fn build<T: Scalar>(self) -> Box<dyn FlowProvider<T>> {
        match self {
            ProviderKind::Farneback => Box::new(FarnebackFlow::default()),
            ProviderKind::Proxy => Box::new(ProxyFlow),
        }
    }
}

/// Consecutive pairwise flows of `frames`, stacked along channels:
/// `[1, 2·(len − 1), H, W]`.
pub fn clip_flow<T: Scalar>(frames: &[Frame<T>], provider: &dyn FlowProvider<T>) -> Result<Tensor<T>> {
    if frames.len() < 2 {
        return Err(Error::Data(format!(
            "clip flow needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let fields = frames
        .windows(2)
        .map(|p| provider.pairwise_flow(&p[0].pixels, &p[1].pixels))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = fields.iter().collect();
    Tensor::concat_channels(&refs)
}

/// All `T − 1` consecutive flows of a video.
pub fn video_flows<T: Scalar>(video: &Video<T>, provider: &dyn FlowProvider<T>) -> Result<Vec<FlowField<T>>> {
    video
        .frames
        .windows(2)
        .map(|p| provider.pairwise_flow(&p[0].pixels, &p[1].pixels))
        .collect()
}
