//! Frames, videos and clip sampling, plus loading of frame-directory
//! datasets and the synthetic scene generator.

mod loader;
mod noise;
mod synthetic;

pub use loader::{load_dataset, read_labels, write_labels, write_rgb_png, write_video_frames, DatasetLayout, Split};
pub use noise::add_salt_pepper;
pub use synthetic::{
    generate_synthetic, render_scene, AnomalyKind, AnomalyScript, RenderedScene, Shape, Sprite,
    SyntheticScene, SyntheticSuite, SuiteVideo,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    /// `[1, 3, H, W]`.
    pub pixels: Tensor<T>,
    pub index: usize,
    /// `(width, height)` before resizing.
    pub source_size: (usize, usize),
}

impl<T: Scalar> Frame<T> {
    /// Builds a 3-channel frame from a grayscale raster by broadcasting.
    pub fn from_gray(gray: &[T], width: usize, height: usize, index: usize) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::Shape(format!(
                "gray raster of {} values is not {width}x{height}",
                gray.len()
            )));
        }
        let mut data = Vec::with_capacity(3 * gray.len());
        for _ in 0..3 {
            data.extend_from_slice(gray);
        }
        Ok(Self {
            pixels: Tensor::from_vec([1, 3, height, width], data)?,
            index,
            source_size: (width, height),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video<T> {
    pub id: String,
    pub frames: Vec<Frame<T>>,
    /// Per-frame 0/1 anomaly labels; absent for training videos.
    pub labels: Option<Vec<u8>>,
}

impl<T: Scalar> Video<T> {
    pub fn new(id: impl Into<String>, frames: Vec<Frame<T>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &labels {
            if l.len() != frames.len() {
                return Err(Error::Data(format!(
                    "video {id}: {} labels for {} frames",
                    l.len(),
                    frames.len()
                )));
            }
        }
        if let Some(first) = frames.first() {
            let shape = first.pixels.shape();
            if frames.iter().any(|f| f.pixels.shape() != shape) {
                return Err(Error::Shape(format!("video {id}: frames differ in shape")));
            }
        }
        Ok(Self { id, frames, labels })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.height(), f.width()))
            .unwrap_or((0, 0))
    }
}

/// `k_in` consecutive input frames followed by the frame to predict.
#[derive(Debug, Clone, Copy)]
pub struct VideoClip<'a, T> {
    pub video: &'a Video<T>,
    pub start: usize,
    pub k_in: usize,
}

impl<'a, T: Scalar> VideoClip<'a, T> {
    pub fn video_id(&self) -> &'a str {
        &self.video.id
    }

    pub fn frames(&self) -> &'a [Frame<T>] {
        &self.video.frames[self.start..=self.start + self.k_in]
    }

    pub fn inputs(&self) -> &'a [Frame<T>] {
        &self.video.frames[self.start..self.start + self.k_in]
    }

    pub fn target(&self) -> &'a Frame<T> {
        &self.video.frames[self.start + self.k_in]
    }

    /// Frame immediately before the target.
    pub fn previous(&self) -> &'a Frame<T> {
        &self.video.frames[self.start + self.k_in - 1]
    }

    pub fn target_index(&self) -> usize {
        self.start + self.k_in
    }

    pub fn labels(&self) -> Option<&'a [u8]> {
        self.video
            .labels
            .as_deref()
            .map(|l| &l[self.start..=self.start + self.k_in])
    }

    pub fn target_label(&self) -> Option<u8> {
        self.video.labels.as_ref().map(|l| l[self.target_index()])
    }

    /// Input frames stacked along channels: `[1, 3·k_in, H, W]`.
    pub fn input_tensor(&self) -> Tensor<T> {
        let parts: Vec<&Tensor<T>> = self.inputs().iter().map(|f| &f.pixels).collect();
        Tensor::concat_channels(&parts).expect("frames of a video share a shape")
    }
}

/// Clips over `video` with `k_in` inputs each, starting every `stride`
/// frames. With stride 1 every frame from `k_in` on is a target.
pub fn sample_clips<T: Scalar>(
    video: &Video<T>,
    k_in: usize,
    stride: usize,
) -> Result<impl Iterator<Item = VideoClip<'_, T>>> {
    if k_in == 0 || stride == 0 {
        return Err(Error::Config("k_in and stride must be positive".into()));
    }
    if video.len() < k_in + 1 {
        return Err(Error::Data(format!(
            "video {} has {} frames; clips need at least {}",
            video.id,
            video.len(),
            k_in + 1
        )));
    }
    let last_start = video.len() - k_in - 1;
    Ok((0..=last_start)
        .step_by(stride)
        .map(move |start| VideoClip { video, start, k_in }))
}
