//! PSNR-based regularity scores, frame-level ROC AUC and error-map export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::datasets::write_rgb_png;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound on the mean squared error, in 0–255 units.
pub const MSE_FLOOR: f64 = 1e-10;

/// `10·log10(255² / MSE₂₅₅)` with `MSE₂₅₅` the mean squared error after
/// scaling `[0, 1]` pixels to `[0, 255]`.
pub fn psnr_error<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    if pred.is_empty() {
        return Err(Error::Shape("PSNR of empty frames".into()));
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = (p.as_f64() - t.as_f64()) * 255.0;
            d * d
        })
        .sum();
    let mse = (sse / pred.len() as f64).max(MSE_FLOOR);
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Min-max normalization; all-equal inputs map to 0.5.
pub fn normalize_scores(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Data("cannot normalize an empty error list".into()));
    }
    if let Some(bad) = errors.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite error value {bad}")));
    }
    let (lo, hi) = errors
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Ok(vec![0.5; errors.len()]);
    }
    Ok(errors.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    #[default]
    PerVideo,
    Global,
}

/// Scores of one test video. Only frames with a prediction appear, so the
/// first `k_in` frames are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    /// PSNR in dB.
    pub errors: Vec<f64>,
    /// Regularity in `[0, 1]`; high means normal.
    pub regularity: Vec<f64>,
    /// `1 − regularity`.
    pub anomaly: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    frame_index: usize,
    psnr: f64,
    regularity: f64,
    anomaly: f64,
    label: u8,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for i in 0..self.len() {
            w.serialize(ScoreRow {
                frame_index: self.frame_indices[i],
                psnr: self.errors[i],
                regularity: self.regularity[i],
                anomaly: self.anomaly[i],
                label: self.labels[i],
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Raw per-frame PSNR of one video before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoErrors {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub errors: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Normalizes errors into score series, per video or over all videos at once.
pub fn build_score_series(videos: Vec<VideoErrors>, scope: NormalizationScope) -> Result<Vec<ScoreSeries>> {
    for v in &videos {
        if v.errors.len() != v.labels.len() || v.errors.len() != v.frame_indices.len() {
            return Err(Error::Data(format!("video {}: errors and labels differ in length", v.video_id)));
        }
    }
    let global = match scope {
        NormalizationScope::Global => {
            let all: Vec<f64> = videos.iter().flat_map(|v| v.errors.iter().copied()).collect();
            Some(normalize_scores(&all)?)
        }
        NormalizationScope::PerVideo => None,
    };
    let mut offset = 0;
    videos
        .into_iter()
        .map(|v| {
            let regularity = match &global {
                Some(all) => all[offset..offset + v.errors.len()].to_vec(),
                None if v.errors.is_empty() => Vec::new(),
                None => normalize_scores(&v.errors)?,
            };
            offset += v.errors.len();
            Ok(ScoreSeries {
                anomaly: regularity.iter().map(|s| 1.0 - s).collect(),
                video_id: v.video_id,
                frame_indices: v.frame_indices,
                errors: v.errors,
                regularity,
                labels: v.labels,
            })
        })
        .collect()
}

/// ROC AUC of `scores` against binary `labels`; ties count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN anomaly score".into()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(format!(
            "AUC needs both classes, got {positives} anomalous and {negatives} normal frames"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Frame-level AUC of the anomaly scores over the concatenated test set.
pub fn frame_auc(series: &[ScoreSeries]) -> Result<f64> {
    let scores: Vec<f64> = series.iter().flat_map(|s| s.anomaly.iter().copied()).collect();
    let labels: Vec<u8> = series.iter().flat_map(|s| s.labels.iter().copied()).collect();
    roc_auc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub dataset: String,
    pub auc: f64,
    pub normalization: NormalizationScope,
    /// `None` where a video holds a single class.
    pub per_video_auc: BTreeMap<String, Option<f64>>,
    pub scored_frames: usize,
    pub anomalous_frames: usize,
    pub unscored_frames: usize,
}

impl AucReport {
    pub fn new(dataset: &str, series: &[ScoreSeries], scope: NormalizationScope, unscored_frames: usize) -> Result<Self> {
        Ok(Self {
            dataset: dataset.to_string(),
            auc: frame_auc(series)?,
            normalization: scope,
            per_video_auc: series
                .iter()
                .map(|s| (s.video_id.clone(), roc_auc(&s.anomaly, &s.labels).ok()))
                .collect(),
            scored_frames: series.iter().map(ScoreSeries::len).sum(),
            anomalous_frames: series.iter().flat_map(|s| &s.labels).filter(|&&l| l != 0).count(),
            unscored_frames,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Per-pixel squared error averaged over channels, min-max scaled to `[0, 1]`.
pub fn error_map<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<f64>> {
    pred.ensure_same_shape(target)?;
    let [_, c, h, w] = pred.shape();
    let plane = h * w;
    let (p, t) = (pred.sample(0), target.sample(0));
    let mut map = vec![0.0; plane];
    for ch in 0..c {
        for (i, m) in map.iter_mut().enumerate() {
            let d = p[ch * plane + i].as_f64() - t[ch * plane + i].as_f64();
            *m += d * d / c as f64;
        }
    }
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    map.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    Ok(map)
}

/// Blue → cyan → yellow → red.
fn heat(v: f64) -> Rgb<u8> {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.5]),
        (1.0 / 3.0, [0.0, 0.8, 1.0]),
        (2.0 / 3.0, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    let k = STOPS.iter().rposition(|s| s.0 <= v).unwrap().min(STOPS.len() - 2);
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    let f = (v - a.0) / (b.0 - a.0);
    let mix = |i: usize| ((a.1[i] + f * (b.1[i] - a.1[i])) * 255.0).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

/// Writes the heat map to `out_path` and the frames beside it as
/// `<stem>_pred.png` and `<stem>_target.png`. Returns all three paths.
pub fn export_error_map<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, out_path: &Path) -> Result<[PathBuf; 3]> {
    let map = error_map(pred, target)?;
    let (h, w) = (pred.height(), pred.width());
    if let Some(parent) = out_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| heat(map[y as usize * w + x as usize]));
    img.save(out_path)?;
    let stem = out_path.file_stem().and_then(|s| s.to_str()).unwrap_or("error");
    let sibling = |suffix: &str| out_path.with_file_name(format!("{stem}_{suffix}.png"));
    let (pred_path, target_path) = (sibling("pred"), sibling("target"));
    write_rgb_png(pred, &pred_path)?;
    write_rgb_png(target, &target_path)?;
    Ok([out_path.to_path_buf(), pred_path, target_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames(offset: f64) -> (Tensor<f64>, Tensor<f64>) {
        let t = Tensor::from_fn([1, 3, 8, 8], |[_, c, y, x]| 0.3 + 0.01 * (c + y + x) as f64);
        (t.map(|v| v + offset), t)
    }

    #[test]
    fn psnr_examples() {
        let (p, t) = frames(16.0 / 255.0);
        let e16 = psnr_error(&p, &t).unwrap();
        assert!((e16 - 10.0 * (65025.0f64 / 256.0).log10()).abs() < 1e-9);
        assert!((e16 - 24.05).abs() < 0.01);
        let (p, t) = frames(32.0 / 255.0);
        let e32 = psnr_error(&p, &t).unwrap();
        assert!((e16 - e32 - 20.0 * 2.0f64.log10()).abs() < 1e-9);
        let same = psnr_error(&t, &t).unwrap();
        assert!((same - 10.0 * (65025.0f64 / 1e-10).log10()).abs() < 1e-9);
        assert!(psnr_error(&t, &Tensor::zeros([1, 3, 8, 4])).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_scores(&[20.0, 30.0, 25.0]).unwrap(), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_scores(&[7.0]).unwrap(), vec![0.5]);
        assert_eq!(normalize_scores(&[3.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        assert!(normalize_scores(&[]).is_err());
    }

    #[test]
    fn normalization_is_affine_invariant() {
        let e = [21.5, 19.0, 33.2, 27.7];
        let a = normalize_scores(&e).unwrap();
        let b = normalize_scores(&e.map(|v| 3.5 * v - 40.0)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn auc_of_independent_labels_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..10_000).map(|_| rng.gen_bool(0.3) as u8).collect();
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..300).map(|_| (rng.gen::<f64>() * 10.0).round() / 10.0).collect();
        let labels: Vec<u8> = (0..300).map(|i| (i % 3 == 0) as u8).collect();
        let t: Vec<f64> = scores.iter().map(|v| v.exp() * 2.0 + 1.0).collect();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&t, &labels).unwrap());
    }

    #[test]
    fn per_video_and_global_scopes() {
        let v = |id: &str, e: Vec<f64>, l: Vec<u8>| VideoErrors {
            video_id: id.into(),
            frame_indices: (4..4 + e.len()).collect(),
            errors: e,
            labels: l,
        };
        let vids = vec![v("a", vec![30.0, 20.0], vec![0, 1]), v("b", vec![40.0, 35.0], vec![0, 1])];
        let per = build_score_series(vids.clone(), NormalizationScope::PerVideo).unwrap();
        assert_eq!(per[1].regularity, vec![1.0, 0.0]);
        assert_eq!(per[1].anomaly, vec![0.0, 1.0]);
        let global = build_score_series(vids, NormalizationScope::Global).unwrap();
        assert_eq!(global[1].regularity, vec![1.0, 0.75]);
        assert_eq!(frame_auc(&per).unwrap(), 1.0);
    }

    #[test]
    fn error_map_export() {
        let tmp = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::full([1, 3, 8, 8], 0.5);
        let mut p = t.clone();
        *p.at_mut([0, 0, 2, 3]) = 1.0;
        let map = error_map(&p, &t).unwrap();
        assert_eq!(map[2 * 8 + 3], 1.0);
        assert_eq!(map.iter().filter(|&&v| v == 0.0).count(), 63);
        let paths = export_error_map(&p, &t, &tmp.path().join("maps/f10.png")).unwrap();
        assert!(paths.iter().all(|p| p.is_file()));
        assert!(paths[1].ends_with("f10_pred.png"));
    }

    #[test]
    fn csv_and_report() {
        let tmp = tempfile::tempdir().unwrap();
        let s = build_score_series(
            vec![VideoErrors {
                video_id: "v".into(),
                frame_indices: vec![4, 5, 6],
                errors: vec![30.0, 20.0, 25.0],
                labels: vec![0, 1, 0],
            }],
            NormalizationScope::PerVideo,
        )
        .unwrap();
        let path = tmp.path().join("v.csv");
        s[0].write_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "frame_index,psnr,regularity,anomaly,label");
        assert_eq!(text.lines().count(), 4);
        let report = AucReport::new("synthetic", &s, NormalizationScope::PerVideo, 4).unwrap();
        assert_eq!(report.auc, 1.0);
        assert_eq!(report.anomalous_frames, 1);
    }
}
