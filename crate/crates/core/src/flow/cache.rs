//! On-disk flow archives: one little-endian f32 array of shape
//! `(T − 1, H, W, 2)` per video plus a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{video_flows, FlowField, FlowProvider};
use crate::datasets::Video;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArchiveMeta {
    pub video_id: String,
    pub provider: String,
    pub height: usize,
    pub width: usize,
    /// Number of flow fields (`T − 1`).
    pub fields: usize,
    pub dtype: String,
    pub layout: String,
}

/// `(archive, sidecar)` paths for a cache key.
pub fn flow_cache_paths(dir: &Path, video_id: &str, provider: &str, (h, w): (usize, usize)) -> (PathBuf, PathBuf) {
    let stem = format!("{video_id}__{provider}__{h}x{w}");
    (dir.join(format!("{stem}.flow")), dir.join(format!("{stem}.json")))
}

/// Computes and stores the consecutive flows of `video`. Returns the archive
/// path; an existing archive with a matching sidecar is reused untouched.
pub fn cache_flows<T: Scalar>(video: &Video<T>, provider: &dyn FlowProvider<T>, dir: &Path) -> Result<PathBuf> {
    let (h, w) = video.resolution();
    let (archive, sidecar) = flow_cache_paths(dir, &video.id, provider.name(), (h, w));
    let meta = FlowArchiveMeta {
        video_id: video.id.clone(),
        provider: provider.name().to_string(),
        height: h,
        width: w,
        fields: video.len().saturating_sub(1),
        dtype: "<f4".into(),
        layout: "T-1,H,W,2".into(),
    };
    if archive.is_file() && sidecar.is_file() {
        let existing: FlowArchiveMeta = serde_json::from_slice(&fs::read(&sidecar)?)?;
        let expected_len = (meta.fields * h * w * 2 * 4) as u64;
        if existing == meta && fs::metadata(&archive)?.len() == expected_len {
            return Ok(archive);
        }
    }
    fs::create_dir_all(dir)?;
    let flows = video_flows(video, provider)?;
    let mut bytes = Vec::with_capacity(meta.fields * h * w * 2 * 4);
    for f in &flows {
        for y in 0..h {
            for x in 0..w {
                for c in 0..2 {
                    bytes.extend_from_slice(&(f.at([0, c, y, x]).as_f64() as f32).to_le_bytes());
                }
            }
        }
    }
    // Write-then-rename keeps concurrent readers from seeing partial files.
    let tmp = archive.with_extension("flow.partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, &archive)?;
    fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?)?;
    Ok(archive)
}

/// Reads an archive written by [`cache_flows`] back into `[1, 2, H, W]` fields.
pub fn load_flow_archive<T: Scalar>(archive: &Path) -> Result<(FlowArchiveMeta, Vec<FlowField<T>>)> {
    let sidecar = archive.with_extension("json");
    let meta: FlowArchiveMeta = serde_json::from_slice(&fs::read(&sidecar)?)?;
    let bytes = fs::read(archive)?;
    let (h, w) = (meta.height, meta.width);
    let per = h * w * 2 * 4;
    if bytes.len() != per * meta.fields {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {}",
            archive.display(),
            bytes.len(),
            per * meta.fields
        )));
    }
    let fields = bytes
        .chunks_exact(per)
        .map(|chunk| {
            Tensor::from_fn([1, 2, h, w], |[_, c, y, x]| {
                let o = ((y * w + x) * 2 + c) * 4;
                T::lit(f32::from_le_bytes(chunk[o..o + 4].try_into().unwrap()) as f64)
            })
        })
        .collect();
    Ok((meta, fields))
}
