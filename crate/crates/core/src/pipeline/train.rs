//! The two training phases: autoencoder pretraining, then the adversarial
//! main phase. Both checkpoint after every epoch and can resume.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AblationConfig, LossWeights, MemoryConfig, RunConfig};
use super::data::{clip_refs, make_batch, ClipRef, PreparedData};
use super::derive_seed;
use super::model::StmAe;
use crate::autoencoder::{pretrain_appearance_step, pretrain_motion_step, ArchitectureConfig};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::memory::{MemoryPool, PoolRole};
use crate::nn::{Adam, CosineAnnealing, Mode, Parameters};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub phase: Phase,
    pub epochs_completed: usize,
    pub total_epochs: usize,
    pub step: u64,
    pub seed: u64,
    pub architecture: ArchitectureConfig,
    pub memory: MemoryConfig,
    /// Effective write sparsity of both pools.
    pub k_top: usize,
    pub ablation: Option<AblationConfig>,
    pub weights: Option<LossWeights>,
    /// Parameter groups that must not change after this checkpoint.
    pub frozen: Vec<String>,
    pub optimizer_steps: BTreeMap<String, u64>,
}

impl CheckpointManifest {
    pub fn complete(&self) -> bool {
        self.epochs_completed >= self.total_epochs
    }
}

pub const FROZEN_GROUPS: [&str; 2] = ["appearance.decoder", "motion.decoder"];

/// Saves the full model (all networks, optimizer moments, batch-norm
/// buffers and both pools).
pub fn save_checkpoint<T: Scalar>(model: &mut StmAe<T>, manifest: &CheckpointManifest, path: &Path) -> Result<()> {
    let mut ar = Archive::new(serde_json::to_value(manifest)?);
    ar.store_model("", model);
    ar.put("memory.spatial", model.spatial.items());
    ar.put("memory.temporal", model.temporal.items());
    ar.save(path)
}

/// Rebuilds a model from a main-phase or pretrain checkpoint. Pretrain
/// checkpoints restore only the autoencoders; every other part keeps its
/// seeded initialization.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(StmAe<T>, CheckpointManifest)> {
    let ar = Archive::load(path)?;
    let manifest: CheckpointManifest = serde_json::from_value(ar.manifest.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
    }
    let mut model = StmAe::new(&manifest.architecture, &manifest.memory, manifest.seed)?;
    restore_into(&ar, &manifest, &mut model)?;
    Ok((model, manifest))
}

fn restore_into<T: Scalar>(ar: &Archive, manifest: &CheckpointManifest, model: &mut StmAe<T>) -> Result<()> {
    ar.load_model("appearance.", &mut model.appearance)?;
    ar.load_model("motion.", &mut model.motion)?;
    if manifest.phase == Phase::Main {
        ar.load_model("predictor.", &mut model.predictor)?;
        ar.load_model("discriminator.", &mut model.discriminator)?;
        let dim = model.arch.feature_channels();
        model.spatial = MemoryPool::from_items(PoolRole::Spatial, ar.get("memory.spatial")?, dim, manifest.k_top)?;
        model.temporal = MemoryPool::from_items(PoolRole::Temporal, ar.get("memory.temporal")?, dim, manifest.k_top)?;
        if model.spatial.n_items() != manifest.memory.n_items {
            return Err(Error::Checkpoint("pool size disagrees with the manifest".into()));
        }
    }
    Ok(())
}

/// Loads only the pretrained autoencoders of `path` into `model`.
pub fn load_pretrained<T: Scalar>(model: &mut StmAe<T>, path: &Path) -> Result<CheckpointManifest> {
    let ar = Archive::load(path)?;
    let manifest: CheckpointManifest = serde_json::from_value(ar.manifest.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.architecture != model.arch {
        return Err(Error::Checkpoint("pretrained architecture differs from the run configuration".into()));
    }
    ar.load_model("appearance.", &mut model.appearance)?;
    ar.load_model("motion.", &mut model.motion)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the phase checkpoint if one exists.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub epochs_completed: usize,
    pub steps: u64,
    /// Loss of every step run by this call, in order.
    pub losses: Vec<f64>,
    pub complete: bool,
}

#[derive(Debug, Serialize)]
struct PretrainRow {
    epoch: usize,
    step: u64,
    lr: f64,
    loss_appearance: f64,
    loss_motion: f64,
}

#[derive(Debug, Serialize)]
struct MainRow {
    epoch: usize,
    step: u64,
    lr: f64,
    l_a: f64,
    l_m: f64,
    l_r: f64,
    l_adv: f64,
    l_g: f64,
    l_d: f64,
}

/// Append-only CSV; the header is written once.
struct MetricsLog {
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            writer: csv::WriterBuilder::new().has_headers(fresh).from_writer(file),
        })
    }

    fn row(&mut self, row: impl Serialize) -> Result<()> {
        self.writer
            .serialize(row)
            .map_err(|e| Error::Data(format!("metrics: {e}")))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

fn epoch_order(refs: &[ClipRef], seed: u64, tag: &str, epoch: usize) -> Vec<ClipRef> {
    let mut order = refs.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, &[epoch as u64])));
    order
}

fn steps_per_epoch(n_clips: usize, batch: usize) -> usize {
    n_clips.div_ceil(batch)
}

fn read_manifest(path: &Path, phase: Phase) -> Result<Option<(Archive, CheckpointManifest)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let ar = Archive::load(path)?;
    let m: CheckpointManifest = serde_json::from_value(ar.manifest.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if m.phase != phase {
        return Err(Error::Checkpoint(format!("{} holds a {:?} checkpoint", path.display(), m.phase)));
    }
    Ok(Some((ar, m)))
}

fn check_finite(values: &[(&str, f64)], epoch: usize, step: u64) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} = {v} at epoch {epoch}, step {step}")));
        }
    }
    Ok(())
}

/// Pretrains both autoencoders: denoising on stacked frames and
/// reconstruction on stacked flows. The completed checkpoint marks the
/// two pretraining decoders frozen.
pub fn pretrain<T: Scalar>(
    cfg: &RunConfig,
    data: &PreparedData<T>,
    model: &mut StmAe<T>,
    checkpoint: &Path,
    metrics: &Path,
    opts: &TrainOptions,
) -> Result<PhaseSummary> {
    let sched = &cfg.schedule;
    let k_in = cfg.architecture.k_in;
    let refs = clip_refs(&data.train, k_in, sched.clip_stride)?;
    let spe = steps_per_epoch(refs.len(), sched.batch_size);
    let lr = CosineAnnealing {
        initial: sched.learning_rate,
        total_steps: (spe * sched.pretrain_epochs) as u64,
    };
    let (mut adam_a, mut adam_m) = (Adam::default(), Adam::default());
    let mut start_epoch = 0;
    if opts.resume {
        if let Some((ar, m)) = read_manifest(checkpoint, Phase::Pretrain)? {
            ar.load_model("appearance.", &mut model.appearance)?;
            ar.load_model("motion.", &mut model.motion)?;
            adam_a.step = m.optimizer_steps.get("appearance").copied().unwrap_or(0);
            adam_m.step = m.optimizer_steps.get("motion").copied().unwrap_or(0);
            start_epoch = m.epochs_completed;
            log::info!("resuming pretraining after epoch {start_epoch}");
        }
    }
    let mut log_file = MetricsLog::open(metrics)?;
    let stop = opts.stop_after_epochs.unwrap_or(usize::MAX).min(sched.pretrain_epochs);
    let mut losses = Vec::new();
    let mut step = (start_epoch * spe) as u64;
    for epoch in start_epoch..stop {
        for (bi, chunk) in epoch_order(&refs, cfg.seed, "pretrain.shuffle", epoch)
            .chunks(sched.batch_size)
            .enumerate()
        {
            let rate = lr.lr(step);
            let batch = make_batch(&data.train, chunk, k_in)?;
            model.appearance.zero_grad();
            let noise_seed = derive_seed(cfg.seed, "pretrain.noise", &[epoch as u64, bi as u64]);
            let la = pretrain_appearance_step(&mut model.appearance, &batch.inputs, sched.pretrain_noise, noise_seed)?;
            adam_a.step(&mut model.appearance, rate);
            model.motion.zero_grad();
            let lm = pretrain_motion_step(&mut model.motion, &batch.flows)?;
            adam_m.step(&mut model.motion, rate);
            let (la, lm) = (la.as_f64(), lm.as_f64());
            check_finite(&[("appearance loss", la), ("motion loss", lm)], epoch, step)?;
            log_file.row(PretrainRow {
                epoch,
                step,
                lr: rate,
                loss_appearance: la,
                loss_motion: lm,
            })?;
            losses.push(la + lm);
            step += 1;
        }
        log_file.flush()?;
        let done = epoch + 1;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            phase: Phase::Pretrain,
            epochs_completed: done,
            total_epochs: sched.pretrain_epochs,
            step,
            seed: cfg.seed,
            architecture: cfg.architecture.clone(),
            memory: model.memory_config,
            k_top: model.spatial.k_top(),
            ablation: None,
            weights: None,
            frozen: if done >= sched.pretrain_epochs {
                FROZEN_GROUPS.iter().map(|s| s.to_string()).collect()
            } else {
                Vec::new()
            },
            optimizer_steps: BTreeMap::from([("appearance".into(), adam_a.step), ("motion".into(), adam_m.step)]),
        };
        save_checkpoint(model, &manifest, checkpoint)?;
        log::info!(
            "pretrain epoch {done}/{}: last loss {:.5}",
            sched.pretrain_epochs,
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    let epochs_completed = stop.max(start_epoch);
    Ok(PhaseSummary {
        epochs_completed,
        steps: step,
        losses,
        complete: epochs_completed >= sched.pretrain_epochs,
    })
}

/// Adversarial main phase. Per batch: forward both streams with memory
/// reads, one discriminator step on the detached prediction, one generator
/// step on the weighted loss, then memory writes with the batch's queries.
pub fn train_main<T: Scalar>(
    cfg: &RunConfig,
    data: &PreparedData<T>,
    model: &mut StmAe<T>,
    checkpoint: &Path,
    metrics: &Path,
    opts: &TrainOptions,
) -> Result<PhaseSummary> {
    cfg.ablation.validate()?;
    cfg.weights.validate()?;
    let sched = &cfg.schedule;
    let k_in = cfg.architecture.k_in;
    let ablation = cfg.ablation;
    let weights = cfg.weights;
    let loss_flow = cfg.flow.loss.build::<T>();
    let refs = clip_refs(&data.train, k_in, sched.clip_stride)?;
    let spe = steps_per_epoch(refs.len(), sched.batch_size);
    let lr = CosineAnnealing {
        initial: sched.learning_rate,
        total_steps: (spe * sched.main_epochs) as u64,
    };
    let (mut adam_g, mut adam_d) = (Adam::default(), Adam::default());
    let mut start_epoch = 0;
    if opts.resume {
        if let Some((ar, m)) = read_manifest(checkpoint, Phase::Main)? {
            restore_into(&ar, &m, model)?;
            adam_g.step = m.optimizer_steps.get("generator").copied().unwrap_or(0);
            adam_d.step = m.optimizer_steps.get("discriminator").copied().unwrap_or(0);
            start_epoch = m.epochs_completed;
            log::info!("resuming main phase after epoch {start_epoch}");
        }
    }
    if start_epoch == 0 {
        // Fresh optimizer: drop moments carried over from pretraining.
        model.visit_params("", &mut |_, p| {
            p.moment1.iter_mut().for_each(|v| *v = T::zero());
            p.moment2.iter_mut().for_each(|v| *v = T::zero());
        });
    }
    let mut log_file = MetricsLog::open(metrics)?;
    let stop = opts.stop_after_epochs.unwrap_or(usize::MAX).min(sched.main_epochs);
    let mut losses = Vec::new();
    let mut step = (start_epoch * spe) as u64;
    for epoch in start_epoch..stop {
        for chunk in epoch_order(&refs, cfg.seed, "main.shuffle", epoch).chunks(sched.batch_size) {
            let rate = lr.lr(step);
            let batch = make_batch(&data.train, chunk, k_in)?;
            let fwd = model.forward(&batch, &ablation, Mode::Train)?;
            let l_d = if ablation.use_l_adv {
                let l = model.discriminator_backward(&batch.target, &fwd.prediction)?;
                adam_d.step(&mut model.discriminator, rate);
                l.as_f64()
            } else {
                0.0
            };
            model.generator().zero_grad();
            let l = model.generator_backward(&fwd, &batch, &weights, &ablation, loss_flow.as_ref())?;
            adam_g.step(&mut model.generator(), rate);
            model.write_memories(&fwd)?;
            check_finite(&[("generator loss", l.l_g), ("discriminator loss", l_d)], epoch, step)?;
            log_file.row(MainRow {
                epoch,
                step,
                lr: rate,
                l_a: l.l_a,
                l_m: l.l_m,
                l_r: l.l_r,
                l_adv: l.l_adv,
                l_g: l.l_g,
                l_d,
            })?;
            losses.push(l.l_g);
            step += 1;
        }
        log_file.flush()?;
        let done = epoch + 1;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            phase: Phase::Main,
            epochs_completed: done,
            total_epochs: sched.main_epochs,
            step,
            seed: cfg.seed,
            architecture: cfg.architecture.clone(),
            memory: model.memory_config,
            k_top: model.spatial.k_top(),
            ablation: Some(ablation),
            weights: Some(weights),
            frozen: FROZEN_GROUPS.iter().map(|s| s.to_string()).collect(),
            optimizer_steps: BTreeMap::from([
                ("generator".into(), adam_g.step),
                ("discriminator".into(), adam_d.step),
            ]),
        };
        save_checkpoint(model, &manifest, checkpoint)?;
        log::info!(
            "main epoch {done}/{}: last L_G {:.5}",
            sched.main_epochs,
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    let epochs_completed = stop.max(start_epoch);
    Ok(PhaseSummary {
        epochs_completed,
        steps: step,
        losses,
        complete: epochs_completed >= sched.main_epochs,
    })
}
