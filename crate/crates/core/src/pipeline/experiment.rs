//! End-to-end runs: pretrain (cached across runs sharing data and
//! autoencoders), main phase, evaluation; plus ablation and N/k sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::config::{AblationConfig, RunConfig, TopK, Unconstrained};
use super::data::{prepare_data, PreparedData};
use super::eval::{evaluate, EvalOutcome};
use super::fingerprint;
use super::model::StmAe;
use super::train::{load_checkpoint, load_pretrained, pretrain, train_main, Phase, TrainOptions};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fixed file names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.0.join("pretrain.ckpt")
    }
    pub fn pretrain_metrics(&self) -> PathBuf {
        self.0.join("pretrain_metrics.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.0.join("model.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }
    pub fn scores(&self) -> PathBuf {
        self.0.join("scores")
    }
    pub fn report(&self) -> PathBuf {
        self.0.join("auc.json")
    }
}

/// Identifies a pretraining result: everything it depends on.
pub fn pretrain_key(cfg: &RunConfig) -> String {
    let v = json!({
        "seed": cfg.seed,
        "data": cfg.data,
        "architecture": cfg.architecture,
        "batch_size": cfg.schedule.batch_size,
        "learning_rate": cfg.schedule.learning_rate,
        "pretrain_epochs": cfg.schedule.pretrain_epochs,
        "pretrain_noise": cfg.schedule.pretrain_noise,
        "clip_stride": cfg.schedule.clip_stride,
        "input_flow": cfg.flow.input,
    });
    format!("{:016x}", fingerprint(v.to_string().as_bytes()))
}

pub fn write_config(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    fs::create_dir_all(&dir.0)?;
    fs::write(dir.config(), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

/// Runs (or resumes) pretraining and returns the checkpoint path. With a
/// cache directory, the checkpoint is shared by every run with the same
/// [`pretrain_key`].
pub fn run_pretrain<T: Scalar>(
    cfg: &RunConfig,
    data: &PreparedData<T>,
    model: &mut StmAe<T>,
    dir: &RunDir,
    cache: Option<&Path>,
    opts: &TrainOptions,
) -> Result<PathBuf> {
    let (ckpt, metrics) = match cache {
        Some(c) => {
            let key = pretrain_key(cfg);
            (c.join(format!("pretrain-{key}.ckpt")), c.join(format!("pretrain-{key}.csv")))
        }
        None => (dir.pretrain_checkpoint(), dir.pretrain_metrics()),
    };
    if ckpt.is_file() {
        let (_, m) = load_checkpoint::<T>(&ckpt)?;
        if m.phase == Phase::Pretrain && m.complete() {
            load_pretrained(model, &ckpt)?;
            log::info!("reusing pretrained autoencoders from {}", ckpt.display());
            return Ok(ckpt);
        }
    }
    let resume = TrainOptions {
        resume: true,
        ..opts.clone()
    };
    pretrain(cfg, data, model, &ckpt, &metrics, &resume)?;
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: RunDir,
    pub pretrain_checkpoint: PathBuf,
    pub eval: EvalOutcome,
}

impl ExperimentOutcome {
    pub fn auc(&self) -> f64 {
        self.eval.report.auc
    }
}

/// Pretrain, main phase and evaluation of one configuration in `dir`.
pub fn run_experiment<T: Scalar>(cfg: &RunConfig, dir: &Path, pretrain_cache: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = RunDir(dir.to_path_buf());
    write_config(cfg, &dir)?;
    let data = prepare_data::<T>(cfg)?;
    let mut model = StmAe::<T>::new(&cfg.architecture, &cfg.memory, cfg.seed)?;
    let pre = run_pretrain(cfg, &data, &mut model, &dir, pretrain_cache, &TrainOptions::default())?;
    train_main(cfg, &data, &mut model, &dir.checkpoint(), &dir.metrics(), &TrainOptions::default())?;
    let eval = evaluate(
        &mut model,
        &cfg.ablation,
        &data,
        &cfg.scoring,
        cfg.schedule.batch_size,
        Some(&dir.0),
    )?;
    Ok(ExperimentOutcome {
        dir,
        pretrain_checkpoint: pre,
        eval,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub row: usize,
    pub ablation: AblationConfig,
    pub auc: f64,
}

#[derive(Serialize)]
struct AblationCsvRow {
    row: usize,
    appearance_stream: bool,
    spatial_memory: bool,
    motion_stream: bool,
    temporal_memory: bool,
    l_a: bool,
    l_m: bool,
    l_r: bool,
    l_adv: bool,
    auc: f64,
}

/// Trains and evaluates the given ablation-table rows on one seed and
/// dataset. Writes `ablation.csv` and `ablation.md` into `out`.
pub fn run_ablate<T: Scalar>(cfg: &RunConfig, rows: &[usize], out: &Path) -> Result<Vec<AblationRow>> {
    let cache = out.join("pretrain");
    let mut results = Vec::new();
    for &row in rows {
        let mut c = cfg.clone();
        c.ablation = AblationConfig::table_row(row)?;
        let o = run_experiment::<T>(&c, &out.join(format!("row{row}")), Some(&cache))?;
        results.push(AblationRow {
            row,
            ablation: c.ablation,
            auc: o.auc(),
        });
    }
    let flat: Vec<AblationCsvRow> = results
        .iter()
        .map(|r| AblationCsvRow {
            row: r.row,
            appearance_stream: r.ablation.use_appearance_stream,
            spatial_memory: r.ablation.use_spatial_memory,
            motion_stream: r.ablation.use_motion_stream,
            temporal_memory: r.ablation.use_temporal_memory,
            l_a: r.ablation.use_l_a,
            l_m: r.ablation.use_l_m,
            l_r: r.ablation.use_l_r,
            l_adv: r.ablation.use_l_adv,
            auc: r.auc,
        })
        .collect();
    write_rows(&flat, &out.join("ablation.csv"))?;
    let mark = |b: bool| if b { "✓" } else { "" };
    let mut md = String::from("| Model | AE_a | M_s | AE_m | M_t | L_a | L_m | L_r | L_adv | AUC |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &results {
        let a = &r.ablation;
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.4} |\n",
            r.row,
            mark(a.use_appearance_stream),
            mark(a.use_spatial_memory),
            mark(a.use_motion_stream),
            mark(a.use_temporal_memory),
            mark(a.use_l_a),
            mark(a.use_l_m),
            mark(a.use_l_r),
            mark(a.use_l_adv),
            r.auc
        ));
    }
    fs::write(out.join("ablation.md"), md)?;
    Ok(results)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n_items: usize,
    pub k_top: String,
    pub k_effective: usize,
    pub auc: f64,
}

/// The sweep grid: every `(N, k)` pair, then one unconstrained row per `N`.
pub fn sweep_grid(n_values: &[usize], k_values: &[usize]) -> Vec<(usize, TopK)> {
    let mut grid: Vec<(usize, TopK)> = n_values
        .iter()
        .flat_map(|&n| k_values.iter().map(move |&k| (n, TopK::Fixed(k))))
        .collect();
    grid.extend(n_values.iter().map(|&n| (n, TopK::Keyword(Unconstrained::All))));
    grid
}

/// Trains and evaluates each `(N, k)` cell of [`sweep_grid`]. Writes
/// `sweep.csv` into `out`.
pub fn run_sweep<T: Scalar>(cfg: &RunConfig, n_values: &[usize], k_values: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    if n_values.is_empty() || k_values.is_empty() {
        return Err(Error::Config("sweep needs at least one N and one k".into()));
    }
    let cache = out.join("pretrain");
    let mut results = Vec::new();
    for (n, k) in sweep_grid(n_values, k_values) {
        let mut c = cfg.clone();
        c.memory.n_items = n;
        c.memory.k_top = k;
        let o = run_experiment::<T>(&c, &out.join(format!("n{n}_k{k}")), Some(&cache))?;
        results.push(SweepRow {
            n_items: n,
            k_top: k.to_string(),
            k_effective: k.resolve().min(c.schedule.batch_size * c.architecture.n_queries()),
            auc: o.auc(),
        });
    }
    write_rows(&results, &out.join("sweep.csv"))?;
    Ok(results)
}

fn write_rows<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("csv: {e}")))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
