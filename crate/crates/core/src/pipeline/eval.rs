//! Inference-mode scoring of test videos.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{AblationConfig, ScoringConfig};
use super::data::{make_batch, ClipRef, PreparedData, PreparedVideo};
use super::model::StmAe;
use crate::datasets::sample_clips;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::scoring::{build_score_series, export_error_map, psnr_error, AucReport, ScoreSeries, VideoErrors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub frames: usize,
    pub seconds: f64,
    pub ms_per_frame: f64,
    pub fps: f64,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: AucReport,
    pub series: Vec<ScoreSeries>,
    pub timing: Timing,
}

fn predict_video<T: Scalar>(
    model: &mut StmAe<T>,
    ablation: &AblationConfig,
    video: &PreparedVideo<T>,
    batch_size: usize,
) -> Result<VideoErrors> {
    let k_in = model.arch.k_in;
    let refs: Vec<ClipRef> = sample_clips(&video.video, k_in, 1)?
        .map(|c| ClipRef { video: 0, start: c.start })
        .collect();
    let labels = video
        .video
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("test video {} has no labels", video.video.id)))?;
    let one = std::slice::from_ref(video);
    let mut out = VideoErrors {
        video_id: video.video.id.clone(),
        frame_indices: Vec::with_capacity(refs.len()),
        errors: Vec::with_capacity(refs.len()),
        labels: Vec::with_capacity(refs.len()),
    };
    for chunk in refs.chunks(batch_size) {
        let batch = make_batch(one, chunk, k_in)?;
        let fwd = model.forward(&batch, ablation, Mode::Eval)?;
        for (i, r) in chunk.iter().enumerate() {
            let t = r.start + k_in;
            let e = psnr_error(&fwd.prediction.sample_tensor(i), &batch.target.sample_tensor(i))?;
            out.frame_indices.push(t);
            out.errors.push(e);
            out.labels.push(labels[t]);
        }
    }
    Ok(out)
}

/// Scores every test video in inference mode. Pools are only read. With
/// `out_dir`, writes `scores/<video>.csv`, `auc.json`, `timing.json` and
/// error maps under `maps/`.
pub fn evaluate<T: Scalar>(
    model: &mut StmAe<T>,
    ablation: &AblationConfig,
    data: &PreparedData<T>,
    scoring: &ScoringConfig,
    batch_size: usize,
    out_dir: Option<&Path>,
) -> Result<EvalOutcome> {
    let started = Instant::now();
    let mut errors = Vec::with_capacity(data.test.len());
    for v in &data.test {
        errors.push(predict_video(model, ablation, v, batch_size)?);
    }
    let seconds = started.elapsed().as_secs_f64();
    let frames: usize = errors.iter().map(|e| e.errors.len()).sum();
    let timing = Timing {
        frames,
        seconds,
        ms_per_frame: 1e3 * seconds / frames.max(1) as f64,
        fps: frames as f64 / seconds.max(1e-12),
    };
    let unscored = data.test.iter().map(|v| v.video.len()).sum::<usize>() - frames;
    let series = build_score_series(errors, scoring.normalization)?;
    let report = AucReport::new(&data.name, &series, scoring.normalization, unscored)?;
    if let Some(dir) = out_dir {
        let scores = dir.join("scores");
        fs::create_dir_all(&scores)?;
        for s in &series {
            s.write_csv(&scores.join(format!("{}.csv", s.video_id)))?;
        }
        report.write_json(&dir.join("auc.json"))?;
        fs::write(dir.join("timing.json"), serde_json::to_vec_pretty(&timing)?)?;
        export_maps(model, ablation, data, &series, scoring.error_maps, &dir.join("maps"))?;
    }
    log::info!(
        "{}: AUC {:.4} over {frames} frames ({:.1} fps)",
        data.name,
        report.auc,
        timing.fps
    );
    Ok(EvalOutcome { report, series, timing })
}

/// Error maps for the most anomalous labeled-anomalous frame of each video
/// (highest scores first) plus the most regular normal frame.
fn export_maps<T: Scalar>(
    model: &mut StmAe<T>,
    ablation: &AblationConfig,
    data: &PreparedData<T>,
    series: &[ScoreSeries],
    count: usize,
    dir: &Path,
) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    let best = |vi: usize, anomalous: bool| {
        let s = &series[vi];
        (0..s.len())
            .filter(|&i| (s.labels[i] != 0) == anomalous)
            .max_by(|&a, &b| {
                let (x, y) = if anomalous {
                    (s.anomaly[a], s.anomaly[b])
                } else {
                    (s.regularity[a], s.regularity[b])
                };
                x.total_cmp(&y).then(b.cmp(&a))
            })
            .map(|i| (s.anomaly[i], vi, s.frame_indices[i]))
    };
    let mut picks: Vec<(f64, usize, usize)> = (0..series.len()).filter_map(|vi| best(vi, true)).collect();
    picks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    picks.truncate(count.saturating_sub(1).max(1).min(count));
    if picks.len() < count {
        if let Some(p) = (0..series.len()).find_map(|vi| best(vi, false)) {
            picks.push(p);
        }
    }
    let k_in = model.arch.k_in;
    for (_, vi, frame) in picks {
        let v = &data.test[vi];
        let batch = make_batch(
            std::slice::from_ref(v),
            &[ClipRef {
                video: 0,
                start: frame - k_in,
            }],
            k_in,
        )?;
        let fwd = model.forward(&batch, ablation, Mode::Eval)?;
        export_error_map(
            &fwd.prediction,
            &batch.target,
            &dir.join(format!("{}_{frame:06}.png", v.video.id)),
        )?;
    }
    Ok(())
}
