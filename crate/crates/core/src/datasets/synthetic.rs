//! Scripted surveillance-like scenes: textured static background, sprites
//! moving at constant velocity, and anomaly scripts that change a sprite's
//! speed, position or shape over a frame interval.
//!
//! Sprites leaving the canvas wrap around to the opposite edge.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loader::{write_labels, write_video_frames};
use super::{Frame, Video};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
    Cross,
    Ring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub shape: Shape,
    /// Extent in pixels.
    pub size: f64,
    /// Gray level in `[0, 1]`.
    pub intensity: f64,
    /// Center at frame 0, `(x, y)` in pixels.
    pub start: [f64; 2],
    /// Pixels per frame, `(dx, dy)`.
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Velocity multiplied by `factor` while active.
    SpeedUp { factor: f64 },
    /// Sprite drawn at a fresh random location every active frame.
    Teleport,
    /// Sprite drawn with a shape, scale and gray level never seen in training.
    UnseenShape { shape: Shape, scale: f64, intensity: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScript {
    pub sprite: usize,
    /// First anomalous frame.
    pub onset: usize,
    /// Last anomalous frame (inclusive).
    pub offset: usize,
    pub kind: AnomalyKind,
}

impl AnomalyScript {
    pub fn active(&self, t: usize) -> bool {
        (self.onset..=self.offset).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub width: usize,
    pub height: usize,
    pub background_seed: u64,
    #[serde(default = "default_background_level")]
    pub background_level: f64,
    #[serde(default = "default_background_amplitude")]
    pub background_amplitude: f64,
    pub sprites: Vec<Sprite>,
    #[serde(default)]
    pub anomalies: Vec<AnomalyScript>,
}

fn default_background_level() -> f64 {
    0.3
}

fn default_background_amplitude() -> f64 {
    0.1
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            if !(s.size > 0.0) || !(0.0..=1.0).contains(&s.intensity) {
                return Err(Error::Config(format!("sprite {i}: bad size or intensity")));
            }
        }
        for a in &self.anomalies {
            if a.sprite >= self.sprites.len() {
                return Err(Error::Config(format!(
                    "anomaly refers to sprite {} but scene has {}",
                    a.sprite,
                    self.sprites.len()
                )));
            }
            if a.onset > a.offset {
                return Err(Error::Config(format!(
                    "anomaly onset {} after offset {}",
                    a.onset, a.offset
                )));
            }
        }
        Ok(())
    }

    pub fn is_normal(&self) -> bool {
        self.anomalies.is_empty()
    }

    /// Ground-truth labels: 1 iff some anomaly script is active at that frame.
    pub fn labels(&self, num_frames: usize) -> Vec<u8> {
        (0..num_frames)
            .map(|t| self.anomalies.iter().any(|a| a.active(t)) as u8)
            .collect()
    }

    fn background(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.background_seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w.3).sum();
        let (w, h) = (self.width as f64, self.height as f64);
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| {
                        a * (std::f64::consts::TAU * (fx * x as f64 / w + fy * y as f64 / h) + ph).sin()
                    })
                    .sum::<f64>()
                    / norm;
                out.push((self.background_level + self.background_amplitude * v).clamp(0.0, 1.0));
            }
        }
        out
    }
}

/// Gray frames (quantized to 8 bits) and labels of a rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl RenderedScene {
    pub fn to_video<T: Scalar>(&self, id: &str, with_labels: bool) -> Result<Video<T>> {
        let scale = T::lit(1.0 / 255.0);
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let gray: Vec<T> = f.iter().map(|&v| T::from_u8(v).unwrap() * scale).collect();
                Frame::from_gray(&gray, self.width, self.height, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Video::new(id, frames, with_labels.then(|| self.labels.clone()))
    }
}

/// Renders `num_frames` frames of `scene`. `seed` drives every random choice
/// not fixed by the scene (teleport targets).
pub fn render_scene(scene: &SyntheticScene, num_frames: usize, seed: u64) -> Result<RenderedScene> {
    scene.validate()?;
    let background = scene.background();
    let (w, h) = (scene.width, scene.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Positions integrate per-frame velocity so that speed changes persist.
    let mut positions: Vec<[f64; 2]> = scene.sprites.iter().map(|s| s.start).collect();
    let mut frames = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        if t > 0 {
            for (i, s) in scene.sprites.iter().enumerate() {
                let factor = scene
                    .anomalies
                    .iter()
                    .filter(|a| a.sprite == i && a.active(t))
                    .find_map(|a| match a.kind {
                        AnomalyKind::SpeedUp { factor } => Some(factor),
                        _ => None,
                    })
                    .unwrap_or(1.0);
                let p = &mut positions[i];
                p[0] = (p[0] + s.velocity[0] * factor).rem_euclid(w as f64);
                p[1] = (p[1] + s.velocity[1] * factor).rem_euclid(h as f64);
            }
        }
        let mut canvas = background.clone();
        for (i, s) in scene.sprites.iter().enumerate() {
            let mut center = positions[i];
            let mut shape = s.shape;
            let mut size = s.size;
            let mut intensity = s.intensity;
            for a in scene.anomalies.iter().filter(|a| a.sprite == i && a.active(t)) {
                match a.kind {
                    AnomalyKind::Teleport => {
                        center = [rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)];
                    }
                    AnomalyKind::UnseenShape {
                        shape: sh,
                        scale,
                        intensity: it,
                    } => {
                        shape = sh;
                        size *= scale;
                        intensity = it;
                    }
                    AnomalyKind::SpeedUp { .. } => {}
                }
            }
            draw(&mut canvas, w, h, center, shape, size, intensity);
        }
        frames.push(canvas.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect());
    }
    Ok(RenderedScene {
        width: w,
        height: h,
        frames,
        labels: scene.labels(num_frames),
    })
}

fn wrapped(d: f64, extent: f64) -> f64 {
    let d = d.rem_euclid(extent);
    if d >= extent / 2.0 {
        d - extent
    } else {
        d
    }
}

fn draw(canvas: &mut [f64], w: usize, h: usize, center: [f64; 2], shape: Shape, size: f64, intensity: f64) {
    let r = size / 2.0;
    for y in 0..h {
        let dy = wrapped(y as f64 + 0.5 - center[1], h as f64);
        if dy.abs() > r {
            continue;
        }
        for x in 0..w {
            let dx = wrapped(x as f64 + 0.5 - center[0], w as f64);
            if dx.abs() > r {
                continue;
            }
            let inside = match shape {
                Shape::Square => true,
                Shape::Disc => dx * dx + dy * dy <= r * r,
                Shape::Cross => dx.abs() <= size / 6.0 || dy.abs() <= size / 6.0,
                Shape::Ring => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
                }
            };
            if inside {
                canvas[y * w + x] = intensity;
            }
        }
    }
}

/// Renders `scene` and writes `000000.png`… into `frames_dir` plus the label
/// file at `labels_path` (one 0/1 per line).
pub fn generate_synthetic(
    scene: &SyntheticScene,
    num_frames: usize,
    seed: u64,
    frames_dir: &Path,
    labels_path: &Path,
) -> Result<RenderedScene> {
    let rendered = render_scene(scene, num_frames, seed)?;
    let video: Video<f32> = rendered.to_video("synthetic", true)?;
    write_video_frames(&video, frames_dir)?;
    write_labels(&rendered.labels, labels_path)?;
    Ok(rendered)
}

/// A procedurally scripted benchmark: normal training videos and test
/// videos with one anomaly event each, all sharing one background (a
/// single fixed camera).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub width: usize,
    pub height: usize,
    pub train_videos: usize,
    pub train_frames: usize,
    pub test_videos: usize,
    pub test_frames: usize,
    pub sprites_per_scene: usize,
    pub sprite_size: f64,
    /// Normal speeds in px/frame; each sprite moves along one axis.
    pub speeds: Vec<f64>,
    /// Length of each anomaly interval in frames.
    pub anomaly_length: usize,
    /// Anomaly kinds assigned to test videos round-robin.
    pub anomaly_kinds: Vec<AnomalyKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteVideo {
    pub id: String,
    pub scene: SyntheticScene,
    pub num_frames: usize,
    pub seed: u64,
}

impl SuiteVideo {
    pub fn render(&self) -> Result<RenderedScene> {
        render_scene(&self.scene, self.num_frames, self.seed)
    }
}

impl SyntheticSuite {
    pub fn validate(&self, k_in: usize) -> Result<()> {
        if self.train_videos == 0 || self.test_videos == 0 {
            return Err(Error::Config("suite needs training and test videos".into()));
        }
        if self.train_frames < k_in + 1 || self.test_frames < k_in + 1 {
            return Err(Error::Config("suite videos shorter than one clip".into()));
        }
        if self.speeds.is_empty() || self.anomaly_kinds.is_empty() || self.sprites_per_scene == 0 {
            return Err(Error::Config("suite needs speeds, sprites and anomaly kinds".into()));
        }
        if self.test_frames < self.anomaly_length + 2 * (k_in + 1) {
            return Err(Error::Config("test videos too short for the anomaly interval".into()));
        }
        Ok(())
    }

    fn scene(&self, rng: &mut ChaCha8Rng, background_seed: u64) -> SyntheticScene {
        let sprites = (0..self.sprites_per_scene)
            .map(|_| {
                let speed = self.speeds[rng.gen_range(0..self.speeds.len())];
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let velocity = if rng.gen_bool(0.5) {
                    [sign * speed, 0.0]
                } else {
                    [0.0, sign * speed]
                };
                Sprite {
                    shape: Shape::Square,
                    size: self.sprite_size,
                    intensity: rng.gen_range(0.75..0.95),
                    start: [
                        rng.gen_range(0..self.width) as f64,
                        rng.gen_range(0..self.height) as f64,
                    ],
                    velocity,
                }
            })
            .collect();
        SyntheticScene {
            width: self.width,
            height: self.height,
            background_seed,
            background_level: default_background_level(),
            background_amplitude: default_background_amplitude(),
            sprites,
            anomalies: Vec::new(),
        }
    }

    /// Deterministic `(train, test)` video scripts for `seed`.
    pub fn videos(&self, seed: u64, k_in: usize) -> Result<(Vec<SuiteVideo>, Vec<SuiteVideo>)> {
        self.validate(k_in)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let background_seed = rng.gen();
        let train = (0..self.train_videos)
            .map(|i| SuiteVideo {
                id: format!("train{i:02}"),
                scene: self.scene(&mut rng, background_seed),
                num_frames: self.train_frames,
                seed: rng.gen(),
            })
            .collect();
        let test = (0..self.test_videos)
            .map(|i| {
                let mut scene = self.scene(&mut rng, background_seed);
                let kind = self.anomaly_kinds[i % self.anomaly_kinds.len()].clone();
                let lo = k_in + 1;
                let hi = self.test_frames - self.anomaly_length - k_in;
                let onset = rng.gen_range(lo..=hi);
                scene.anomalies.push(AnomalyScript {
                    sprite: rng.gen_range(0..scene.sprites.len()),
                    onset,
                    offset: onset + self.anomaly_length - 1,
                    kind,
                });
                SuiteVideo {
                    id: format!("test{i:02}"),
                    scene,
                    num_frames: self.test_frames,
                    seed: rng.gen(),
                }
            })
            .collect();
        Ok((train, test))
    }

    /// Renders the suite into `(train, test)` videos; test videos carry labels.
    pub fn build<T: Scalar>(&self, seed: u64, k_in: usize) -> Result<(Vec<Video<T>>, Vec<Video<T>>)> {
        let (train, test) = self.videos(seed, k_in)?;
        let render = |v: &SuiteVideo, labels: bool| v.render()?.to_video(&v.id, labels);
        Ok((
            train.iter().map(|v| render(v, false)).collect::<Result<_>>()?,
            test.iter().map(|v| render(v, true)).collect::<Result<_>>()?,
        ))
    }
}
