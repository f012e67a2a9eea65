//! Dataset preparation: rendering or loading videos, precomputing input
//! flows, and assembling clip batches.

use super::config::{DataConfig, RunConfig};
use super::model::ClipBatch;
use super::{derive_seed, fingerprint};
use crate::datasets::{load_dataset, sample_clips, Split, Video};
use crate::error::{Error, Result};
use crate::flow::{cache_flows, load_flow_archive, video_flows, FlowField, FlowProvider};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A video with its `T − 1` consecutive input flows.
#[derive(Debug, Clone)]
pub struct PreparedVideo<T> {
    pub video: Video<T>,
    pub flows: Vec<FlowField<T>>,
}

#[derive(Debug, Clone)]
pub struct PreparedData<T> {
    pub name: String,
    pub train: Vec<PreparedVideo<T>>,
    pub test: Vec<PreparedVideo<T>>,
}

/// Clip position: video index and first input frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRef {
    pub video: usize,
    pub start: usize,
}

pub fn load_videos<T: Scalar>(cfg: &RunConfig) -> Result<(Vec<Video<T>>, Vec<Video<T>>)> {
    let k_in = cfg.architecture.k_in;
    match &cfg.data {
        DataConfig::Synthetic { suite } => suite.build(derive_seed(cfg.seed, "data", &[]), k_in),
        DataConfig::Directory { root, train, test, .. } => {
            let res = cfg.architecture.resolution;
            let tr = load_dataset(root, train, res, Split::Train)?;
            let te = load_dataset(root, test, res, Split::Eval)?;
            if tr.is_empty() || te.is_empty() {
                return Err(Error::Data(format!("{}: no training or test videos", root.display())));
            }
            Ok((tr, te))
        }
    }
}

fn frames_fingerprint<T: Scalar>(video: &Video<T>) -> u64 {
    let mut bytes = Vec::new();
    for f in &video.frames {
        f.pixels.data().iter().for_each(|v| v.write_le(&mut bytes));
    }
    fingerprint(&bytes)
}

/// Input flows of `video`, through the on-disk cache when `cfg` names one.
/// Cache entries are keyed by frame content as well as video id.
pub fn input_flows<T: Scalar>(video: &Video<T>, provider: &dyn FlowProvider<T>, cfg: &RunConfig) -> Result<Vec<FlowField<T>>> {
    match &cfg.flow.cache_dir {
        None => video_flows(video, provider),
        Some(dir) => {
            let mut keyed = video.clone();
            keyed.id = format!("{}-{:016x}", video.id, frames_fingerprint(video));
            let archive = cache_flows(&keyed, provider, dir)?;
            Ok(load_flow_archive(&archive)?.1)
        }
    }
}

pub fn prepare_data<T: Scalar>(cfg: &RunConfig) -> Result<PreparedData<T>> {
    let (train, test) = load_videos::<T>(cfg)?;
    let provider = cfg.flow.input.build::<T>();
    let prep = |videos: Vec<Video<T>>| -> Result<Vec<PreparedVideo<T>>> {
        videos
            .into_iter()
            .map(|video| {
                if video.resolution() != cfg.architecture.resolution {
                    return Err(Error::Data(format!(
                        "video {} is {:?}, expected {:?}",
                        video.id,
                        video.resolution(),
                        cfg.architecture.resolution
                    )));
                }
                let flows = input_flows(&video, provider.as_ref(), cfg)?;
                Ok(PreparedVideo { video, flows })
            })
            .collect()
    };
    Ok(PreparedData {
        name: cfg.data.name().to_string(),
        train: prep(train)?,
        test: prep(test)?,
    })
}

/// Every clip of every video, in order.
pub fn clip_refs<T: Scalar>(videos: &[PreparedVideo<T>], k_in: usize, stride: usize) -> Result<Vec<ClipRef>> {
    let mut out = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        out.extend(sample_clips(&v.video, k_in, stride)?.map(|c| ClipRef { video: vi, start: c.start }));
    }
    Ok(out)
}

/// Stacks the clips named by `refs` into one batch.
pub fn make_batch<T: Scalar>(videos: &[PreparedVideo<T>], refs: &[ClipRef], k_in: usize) -> Result<ClipBatch<T>> {
    if refs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(refs.len());
    let mut flows = Vec::with_capacity(refs.len());
    let mut target = Vec::with_capacity(refs.len());
    let mut previous = Vec::with_capacity(refs.len());
    for r in refs {
        let v = &videos[r.video];
        let end = r.start + k_in;
        if end >= v.video.len() {
            return Err(Error::Data(format!("clip at {} overruns video {}", r.start, v.video.id)));
        }
        let frames: Vec<&Tensor<T>> = v.video.frames[r.start..end].iter().map(|f| &f.pixels).collect();
        inputs.push(Tensor::concat_channels(&frames)?);
        let fl: Vec<&Tensor<T>> = v.flows[r.start..end - 1].iter().collect();
        flows.push(Tensor::concat_channels(&fl)?);
        target.push(v.video.frames[end].pixels.clone());
        previous.push(v.video.frames[end - 1].pixels.clone());
    }
    Ok(ClipBatch {
        inputs: Tensor::stack_batch(&inputs)?,
        flows: Tensor::stack_batch(&flows)?,
        target: Tensor::stack_batch(&target)?,
        previous: Tensor::stack_batch(&previous)?,
    })
}
