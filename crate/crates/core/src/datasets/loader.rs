use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Frame, Video};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Where frames and labels live below a dataset root:
/// `<root>/<frames_dir>/<video>/000000.png` and
/// `<root>/<labels_dir>/<video>.<label_extension>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub frames_dir: String,
    #[serde(default)]
    pub labels_dir: Option<String>,
    #[serde(default = "default_label_extension")]
    pub label_extension: String,
}

fn default_label_extension() -> String {
    "txt".into()
}

impl DatasetLayout {
    pub fn new(frames_dir: impl Into<String>, labels_dir: Option<String>) -> Self {
        Self {
            frames_dir: frames_dir.into(),
            labels_dir,
            label_extension: default_label_extension(),
        }
    }

    pub fn label_path(&self, root: &Path, video_id: &str) -> Option<PathBuf> {
        self.labels_dir
            .as_ref()
            .map(|d| root.join(d).join(format!("{video_id}.{}", self.label_extension)))
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() == want_dirs)
        .collect();
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp" | "tif" | "tiff")
    )
}

/// Loads every video below `root`, resizing frames to `resolution` (height,
/// width) and scaling pixels to `[0, 1]`. Grayscale sources are broadcast to
/// three channels. In [`Split::Eval`] each video must have a label file of
/// matching length.
pub fn load_dataset<T: Scalar>(
    root: &Path,
    layout: &DatasetLayout,
    resolution: (usize, usize),
    split: Split,
) -> Result<Vec<Video<T>>> {
    let frames_root = root.join(&layout.frames_dir);
    if !frames_root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", frames_root.display())));
    }
    let mut videos = Vec::new();
    for dir in sorted_entries(&frames_root, true)? {
        let id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("bad video directory {}", dir.display())))?
            .to_string();
        let files: Vec<PathBuf> = sorted_entries(&dir, false)?
            .into_iter()
            .filter(|p| is_image(p))
            .collect();
        let frames = files
            .iter()
            .enumerate()
            .map(|(i, p)| load_frame(p, i, resolution))
            .collect::<Result<Vec<_>>>()?;
        let labels = match split {
            Split::Train => None,
            Split::Eval => {
                let path = layout
                    .label_path(root, &id)
                    .ok_or_else(|| Error::Data("evaluation layout has no labels_dir".into()))?;
                if !path.is_file() {
                    return Err(Error::Data(format!("missing label file {}", path.display())));
                }
                let labels = read_labels(&path)?;
                if labels.len() != frames.len() {
                    return Err(Error::Data(format!(
                        "video {id}: label file has {} entries for {} frames",
                        labels.len(),
                        frames.len()
                    )));
                }
                Some(labels)
            }
        };
        videos.push(Video::new(id, frames, labels)?);
    }
    Ok(videos)
}

fn load_frame<T: Scalar>(path: &Path, index: usize, (h, w): (usize, usize)) -> Result<Frame<T>> {
    let img = image::open(path)?.to_rgb8();
    let source_size = (img.width() as usize, img.height() as usize);
    let img = if source_size != (w, h) {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    let scale = T::lit(1.0 / 255.0);
    let pixels = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        T::from_u8(img.get_pixel(x as u32, y as u32)[c]).unwrap() * scale
    });
    Ok(Frame {
        pixels,
        index,
        source_size,
    })
}

/// Reads a label array: `.bin` files hold one byte per frame, anything else
/// is parsed as whitespace- or comma-separated 0/1 text.
pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bad = |v: &str| Error::Data(format!("{}: label {v:?} is not 0 or 1", path.display()));
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        let bytes = fs::read(path)?;
        if let Some(b) = bytes.iter().find(|&&b| b > 1) {
            return Err(bad(&b.to_string()));
        }
        return Ok(bytes);
    }
    fs::read_to_string(path)?
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(bad(other)),
        })
        .collect()
}

pub fn write_labels(labels: &[u8], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    if path.extension().and_then(|e| e.to_str()) == Some("bin") {
        fs::write(path, labels)?;
    } else {
        let mut s = String::with_capacity(labels.len() * 2);
        for l in labels {
            s.push_str(if *l == 0 { "0\n" } else { "1\n" });
        }
        fs::write(path, s)?;
    }
    Ok(())
}

/// Writes frames as 8-bit PNGs named `000000.png`, `000001.png`, …
pub fn write_video_frames<T: Scalar>(video: &Video<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in video.frames.iter().enumerate() {
        write_rgb_png(&f.pixels, &dir.join(format!("{i:06}.png")))?;
    }
    Ok(())
}

/// Writes the first sample of a `[_, 3, H, W]` tensor in `[0, 1]` as PNG.
pub fn write_rgb_png<T: Scalar>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let (h, w) = (t.height(), t.width());
    if t.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", t.channels())));
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| to_u8(t.at([0, c, y as usize, x as usize]));
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

pub(crate) fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{render_scene, Shape, Sprite, SyntheticScene};

    fn scene() -> SyntheticScene {
        SyntheticScene {
            width: 16,
            height: 16,
            background_seed: 1,
            background_level: 0.3,
            background_amplitude: 0.1,
            sprites: vec![Sprite {
                shape: Shape::Square,
                size: 4.0,
                intensity: 0.9,
                start: [4.0, 4.0],
                velocity: [1.0, 0.0],
            }],
            anomalies: vec![],
        }
    }

    #[test]
    fn written_frames_load_back_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let rendered = render_scene(&scene(), 6, 0).unwrap();
        let video: Video<f32> = rendered.to_video("v01", true).unwrap();
        write_video_frames(&video, &tmp.path().join("frames/v01")).unwrap();
        write_labels(&rendered.labels, &tmp.path().join("labels/v01.txt")).unwrap();
        assert!(tmp.path().join("frames/v01/000005.png").is_file());
        let layout = DatasetLayout::new("frames", Some("labels".into()));
        let loaded: Vec<Video<f32>> = load_dataset(tmp.path(), &layout, (16, 16), Split::Eval).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], video);
    }

    #[test]
    fn resizes_to_requested_resolution() {
        let tmp = tempfile::tempdir().unwrap();
        let video: Video<f32> = render_scene(&scene(), 2, 0).unwrap().to_video("a", false).unwrap();
        write_video_frames(&video, &tmp.path().join("frames/a")).unwrap();
        let layout = DatasetLayout::new("frames", None);
        let loaded: Vec<Video<f32>> = load_dataset(tmp.path(), &layout, (8, 8), Split::Train).unwrap();
        let f = &loaded[0].frames[0];
        assert_eq!(f.pixels.shape(), [1, 3, 8, 8]);
        assert_eq!(f.source_size, (16, 16));
        assert!(f.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn eval_split_requires_matching_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let video: Video<f32> = render_scene(&scene(), 3, 0).unwrap().to_video("a", false).unwrap();
        write_video_frames(&video, &tmp.path().join("frames/a")).unwrap();
        let layout = DatasetLayout::new("frames", Some("labels".into()));
        assert!(load_dataset::<f32>(tmp.path(), &layout, (16, 16), Split::Eval).is_err());
        write_labels(&[0, 1], &tmp.path().join("labels/a.txt")).unwrap();
        assert!(load_dataset::<f32>(tmp.path(), &layout, (16, 16), Split::Eval).is_err());
        write_labels(&[0, 1, 1], &tmp.path().join("labels/a.txt")).unwrap();
        assert!(load_dataset::<f32>(tmp.path(), &layout, (16, 16), Split::Eval).is_ok());
    }

    #[test]
    fn binary_and_text_labels() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("l.bin");
        write_labels(&[0, 1, 1, 0], &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![0, 1, 1, 0]);
        let t = tmp.path().join("l.txt");
        fs::write(&t, "0 1,1\n0").unwrap();
        assert_eq!(read_labels(&t).unwrap(), vec![0, 1, 1, 0]);
        fs::write(&t, "0 2").unwrap();
        assert!(read_labels(&t).is_err());
    }
}
