//! `stmae` command-line driver.
//!
//! Exit codes: 0 on success, 2 on a configuration or input validation
//! error, 3 on a runtime or numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stmae::datasets::{write_labels, write_video_frames};
use stmae::pipeline::{
    evaluate, input_flows, load_checkpoint, load_pretrained, load_videos, prepare_data, run_ablate, run_pretrain,
    run_sweep, train_main, write_config, DataConfig, RunConfig, RunDir, StmAe, TrainOptions,
};
use stmae::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "stmae", version, about = "Two-stream memory-augmented video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Dotted-path override, e.g. `memory.k_top=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output (run) directory.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic suite to frame directories and label files.
    Synth(Common),
    /// Compute and cache input flows for every video.
    CacheFlow(Common),
    /// Pretrain both autoencoders.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from an existing pretrain checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Main-phase training (pretraining first unless given a checkpoint).
    Train {
        #[command(flatten)]
        common: Common,
        /// Completed pretrain checkpoint to start from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Continue from the run directory's main checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs (the run stays resumable).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score the test split with a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate rows of the ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        rows: Vec<usize>,
    },
    /// Memory size and top-k sensitivity grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "n", value_delimiter = ',', default_value = "8,16,32")]
        n_values: Vec<usize>,
        #[arg(long = "k", value_delimiter = ',', default_value = "2,4,8")]
        k_values: Vec<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c) | Command::CacheFlow(c) => c,
            Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Sweep { common, .. } => common,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config, &c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    if !matches!(cfg.data, DataConfig::Synthetic { .. }) {
        return Err(Error::Config("synth needs a synthetic data config".into()));
    }
    let (train, test) = load_videos::<f32>(cfg)?;
    for v in &train {
        write_video_frames(v, &out.join("training/frames").join(&v.id))?;
    }
    for v in &test {
        write_video_frames(v, &out.join("testing/frames").join(&v.id))?;
        if let Some(l) = &v.labels {
            write_labels(l, &out.join("testing/labels").join(format!("{}.txt", v.id)))?;
        }
    }
    let layout = serde_json::json!({
        "source": "directory",
        "name": "synthetic",
        "root": out,
        "train": { "frames_dir": "training/frames" },
        "test": { "frames_dir": "testing/frames", "labels_dir": "testing/labels" },
    });
    fs::write(out.join("data.json"), serde_json::to_vec_pretty(&layout)?)?;
    log::info!("wrote {} training and {} test videos to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn cache_flow<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.flow.cache_dir = Some(out.to_path_buf());
    let (train, test) = load_videos::<T>(&cfg)?;
    let provider = cfg.flow.input.build::<T>();
    for v in train.iter().chain(&test) {
        input_flows(v, provider.as_ref(), &cfg)?;
    }
    log::info!("cached flows for {} videos in {}", train.len() + test.len(), out.display());
    Ok(())
}

fn run<T: Scalar>(cmd: &Command) -> Result<()> {
    let common = cmd.common();
    let cfg = load_config(common)?;
    let out = &common.out;
    match cmd {
        Command::Synth(_) => synth(&cfg, out),
        Command::CacheFlow(_) => cache_flow::<T>(&cfg, out),
        Command::Pretrain { resume, .. } => {
            let dir = RunDir(out.clone());
            write_config(&cfg, &dir)?;
            let data = prepare_data::<T>(&cfg)?;
            let mut model = StmAe::<T>::new(&cfg.architecture, &cfg.memory, cfg.seed)?;
            let opts = TrainOptions {
                resume: *resume,
                ..Default::default()
            };
            let path = run_pretrain(&cfg, &data, &mut model, &dir, None, &opts)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Train {
            pretrained,
            resume,
            stop_after,
            ..
        } => {
            let dir = RunDir(out.clone());
            write_config(&cfg, &dir)?;
            let data = prepare_data::<T>(&cfg)?;
            let mut model = StmAe::<T>::new(&cfg.architecture, &cfg.memory, cfg.seed)?;
            let resuming = *resume && dir.checkpoint().is_file();
            if !resuming {
                match pretrained {
                    Some(p) => {
                        load_pretrained(&mut model, p)?;
                    }
                    None => {
                        let opts = TrainOptions {
                            resume: true,
                            ..Default::default()
                        };
                        run_pretrain(&cfg, &data, &mut model, &dir, None, &opts)?;
                    }
                }
            }
            let opts = TrainOptions {
                resume: resuming,
                stop_after_epochs: *stop_after,
            };
            let s = train_main(&cfg, &data, &mut model, &dir.checkpoint(), &dir.metrics(), &opts)?;
            println!("{}", serde_json::json!({"epochs_completed": s.epochs_completed, "steps": s.steps, "complete": s.complete}));
            Ok(())
        }
        Command::Eval { checkpoint, .. } => {
            let (mut model, manifest) = load_checkpoint::<T>(checkpoint)?;
            if manifest.architecture != cfg.architecture {
                return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            let ablation = manifest.ablation.unwrap_or(cfg.ablation);
            let data = prepare_data::<T>(&cfg)?;
            let o = evaluate(&mut model, &ablation, &data, &cfg.scoring, cfg.schedule.batch_size, Some(out))?;
            println!(
                "{}",
                serde_json::json!({"auc": o.report.auc, "frames": o.timing.frames, "fps": o.timing.fps})
            );
            Ok(())
        }
        Command::Ablate { rows, .. } => {
            for r in run_ablate::<T>(&cfg, rows, out)? {
                println!("row {}: AUC {:.4}", r.row, r.auc);
            }
            Ok(())
        }
        Command::Sweep { n_values, k_values, .. } => {
            for r in run_sweep::<T>(&cfg, n_values, k_values, out)? {
                println!("N={} k={}: AUC {:.4}", r.n_items, r.k_top, r.auc);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command.common().precision {
        Precision::F32 => run::<f32>(&cli.command),
        Precision::F64 => run::<f64>(&cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
