//! Two-phase training, evaluation and experiment orchestration.

mod config;
mod data;
mod eval;
mod experiment;
mod model;
mod train;

pub use config::{
    apply_override, AblationConfig, DataConfig, FlowConfig, LossWeights, MemoryConfig, Reduction, RunConfig,
    ScoringConfig, TopK, TrainSchedule, Unconstrained,
};
pub use data::{clip_refs, input_flows, load_videos, make_batch, prepare_data, ClipRef, PreparedData, PreparedVideo};
pub use eval::{evaluate, EvalOutcome, Timing};
pub use experiment::{
    pretrain_key, run_ablate, run_experiment, run_pretrain, run_sweep, sweep_grid, write_config,
    AblationRow, ExperimentOutcome, RunDir, SweepRow,
};
pub use model::{compute_l_a, compute_l_m, ClipBatch, ForwardPass, GeneratorHandle, LossBreakdown, StmAe, StreamPass};
pub use train::{
    load_checkpoint, load_pretrained, pretrain, save_checkpoint, train_main, CheckpointManifest, Phase, PhaseSummary,
    TrainOptions, CHECKPOINT_FORMAT, FROZEN_GROUPS,
};

/// 64-bit FNV-1a.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for `tag` and `indices` from the master seed.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(master ^ fingerprint(tag.as_bytes()));
    for &i in indices {
        h = splitmix(h ^ i);
    }
    h
}
