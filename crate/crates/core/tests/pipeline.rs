mod common;

use std::path::Path;

use common::tiny_config;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stmae::autoencoder::{pretrain_appearance_step, ArchitectureConfig, Autoencoder};
use stmae::flow::ProxyFlow;
use stmae::nn::{Adam, CosineAnnealing, Mode, Parameters};
use stmae::pipeline::{
    clip_refs, evaluate, load_pretrained, make_batch, prepare_data, pretrain, train_main, AblationConfig, ClipBatch,
    LossWeights, PreparedData, RunConfig, StmAe, TrainOptions,
};
use stmae::Tensor;

fn values<M: Parameters<f32> + ?Sized>(m: &mut M) -> Vec<(String, Vec<f32>)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
    out
}

fn grads<M: Parameters<f32> + ?Sized>(m: &mut M) -> Vec<f32> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| out.extend_from_slice(&p.grad));
    out
}

fn pretrained(cfg: &RunConfig, dir: &Path) -> (PreparedData<f32>, StmAe<f32>) {
    let data = prepare_data::<f32>(cfg).unwrap();
    let mut model = StmAe::new(&cfg.architecture, &cfg.memory, cfg.seed).unwrap();
    pretrain(
        cfg,
        &data,
        &mut model,
        &dir.join("pre.ckpt"),
        &dir.join("pre.csv"),
        &TrainOptions::default(),
    )
    .unwrap();
    (data, model)
}

fn first_batch(cfg: &RunConfig, data: &PreparedData<f32>) -> ClipBatch<f32> {
    let refs = clip_refs(&data.train, cfg.architecture.k_in, 1).unwrap();
    make_batch(&data.train, &refs[..cfg.schedule.batch_size], cfg.architecture.k_in).unwrap()
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let cfg = tiny_config(3);
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = pretrained(&cfg, dir.path());
    let pre = dir.path().join("pre.ckpt");
    let fresh = || {
        let mut m = StmAe::<f32>::new(&cfg.architecture, &cfg.memory, cfg.seed).unwrap();
        load_pretrained(&mut m, &pre).unwrap();
        m
    };

    let whole = train_main(
        &cfg,
        &data,
        &mut fresh(),
        &dir.path().join("a.ckpt"),
        &dir.path().join("a.csv"),
        &TrainOptions::default(),
    )
    .unwrap();

    let (ckpt, metrics) = (dir.path().join("b.ckpt"), dir.path().join("b.csv"));
    let first = train_main(
        &cfg,
        &data,
        &mut fresh(),
        &ckpt,
        &metrics,
        &TrainOptions {
            resume: false,
            stop_after_epochs: Some(1),
        },
    )
    .unwrap();
    assert!(!first.complete);
    // a model that has not seen pretraining: everything comes from the checkpoint
    let mut blank = StmAe::<f32>::new(&cfg.architecture, &cfg.memory, cfg.seed + 1).unwrap();
    let rest = train_main(
        &cfg,
        &data,
        &mut blank,
        &ckpt,
        &metrics,
        &TrainOptions {
            resume: true,
            stop_after_epochs: None,
        },
    )
    .unwrap();
    assert!(rest.complete);
    let spe = first.losses.len();
    assert_eq!(rest.losses.len(), whole.losses.len() - spe);
    for (a, b) in rest.losses.iter().zip(&whole.losses[spe..]) {
        assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }
    let lines = std::fs::read_to_string(&metrics).unwrap().lines().count();
    assert_eq!(lines, 1 + whole.losses.len());
}

#[test]
fn pretrain_decoders_are_frozen_during_the_main_phase() {
    let cfg = tiny_config(4);
    let dir = tempfile::tempdir().unwrap();
    let (data, mut model) = pretrained(&cfg, dir.path());
    let before = (values(&mut model.appearance.decoder), values(&mut model.motion.decoder));
    let enc_before = values(&mut model.appearance.encoder);
    train_main(
        &cfg,
        &data,
        &mut model,
        &dir.path().join("m.ckpt"),
        &dir.path().join("m.csv"),
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(values(&mut model.appearance.decoder), before.0);
    assert_eq!(values(&mut model.motion.decoder), before.1);
    assert_ne!(values(&mut model.appearance.encoder), enc_before);
}

/// Gradients of one generator backward pass under `ablation` and `weights`.
fn generator_grads(cfg: &RunConfig, data: &PreparedData<f32>, ablation: &AblationConfig, weights: &LossWeights) -> (Vec<f32>, f64, f64) {
    let mut model = StmAe::<f32>::new(&cfg.architecture, &cfg.memory, cfg.seed).unwrap();
    let batch = first_batch(cfg, data);
    let fwd = model.forward(&batch, ablation, Mode::Train).unwrap();
    model.generator().zero_grad();
    let l = model
        .generator_backward(&fwd, &batch, weights, ablation, &ProxyFlow)
        .unwrap();
    (grads(&mut model.generator()), l.l_g, l.l_a)
}

#[test]
fn disabled_terms_contribute_exactly_zero_gradient() {
    let cfg = tiny_config(5);
    let data = prepare_data::<f32>(&cfg).unwrap();
    let full = AblationConfig::full();
    let w = LossWeights::default();

    let mut no_m = full;
    no_m.use_l_m = false;
    let zero_m = LossWeights { motion: 0.0, ..w };
    assert_eq!(generator_grads(&cfg, &data, &no_m, &w).0, generator_grads(&cfg, &data, &full, &zero_m).0);

    let mut no_r = full;
    no_r.use_l_r = false;
    let zero_r = LossWeights { separation: 0.0, ..w };
    assert_eq!(generator_grads(&cfg, &data, &no_r, &w).0, generator_grads(&cfg, &data, &full, &zero_r).0);

    let mut no_adv = full;
    no_adv.use_l_adv = false;
    let zero_adv = LossWeights { adversarial: 0.0, ..w };
    assert_eq!(generator_grads(&cfg, &data, &no_adv, &w).0, generator_grads(&cfg, &data, &full, &zero_adv).0);

    // only L_a switched on is the same step as all weights at zero
    let only_a = AblationConfig {
        use_l_m: false,
        use_l_r: false,
        use_l_adv: false,
        ..full
    };
    let zeros = LossWeights {
        motion: 0.0,
        separation: 0.0,
        adversarial: 0.0,
    };
    let (g1, lg1, la1) = generator_grads(&cfg, &data, &only_a, &w);
    let (g2, lg2, la2) = generator_grads(&cfg, &data, &full, &zeros);
    assert_eq!(g1, g2);
    assert_eq!(lg1, la1);
    assert_eq!(lg2, la2);
}

#[test]
fn alternating_updates_touch_only_their_own_parameters() {
    let cfg = tiny_config(6);
    let data = prepare_data::<f32>(&cfg).unwrap();
    let mut model = StmAe::<f32>::new(&cfg.architecture, &cfg.memory, cfg.seed).unwrap();
    let batch = first_batch(&cfg, &data);
    let full = AblationConfig::full();
    let fwd = model.forward(&batch, &full, Mode::Train).unwrap();

    let g0 = values(&mut model.generator());
    let d0 = values(&mut model.discriminator);
    model.discriminator_backward(&batch.target, &fwd.prediction).unwrap();
    Adam::default().step(&mut model.discriminator, 1e-3);
    assert_eq!(values(&mut model.generator()), g0);
    let d1 = values(&mut model.discriminator);
    assert_ne!(d1, d0);

    model.generator().zero_grad();
    model
        .generator_backward(&fwd, &batch, &cfg.weights, &full, &ProxyFlow)
        .unwrap();
    Adam::default().step(&mut model.generator(), 1e-3);
    assert_eq!(values(&mut model.discriminator), d1);
    assert_ne!(values(&mut model.generator()), g0);
}

#[test]
fn evaluation_never_touches_the_pools() {
    let cfg = tiny_config(7);
    let dir = tempfile::tempdir().unwrap();
    let (data, mut model) = pretrained(&cfg, dir.path());
    train_main(
        &cfg,
        &data,
        &mut model,
        &dir.path().join("m.ckpt"),
        &dir.path().join("m.csv"),
        &TrainOptions::default(),
    )
    .unwrap();
    let pools = (model.spatial.clone(), model.temporal.clone());
    let params = values(&mut model);
    let first = evaluate(&mut model, &cfg.ablation, &data, &cfg.scoring, 4, Some(dir.path())).unwrap();
    let second = evaluate(&mut model, &cfg.ablation, &data, &cfg.scoring, 3, None).unwrap();
    assert_eq!((model.spatial.clone(), model.temporal.clone()), pools);
    assert_eq!(values(&mut model), params);
    // eval batch size does not change scores
    assert_eq!(first.report.auc, second.report.auc);
    for (a, b) in first.series.iter().zip(&second.series) {
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.frame_indices.first(), Some(&cfg.architecture.k_in));
    }
    assert!(dir.path().join("auc.json").is_file());
    assert!(dir.path().join("timing.json").is_file());
    assert_eq!(std::fs::read_dir(dir.path().join("scores")).unwrap().count(), 2);
}

#[test]
fn cosine_schedule_over_a_main_phase() {
    let s = CosineAnnealing {
        initial: 4e-4,
        total_steps: 60 * 8,
    };
    assert_eq!(s.lr(0), 4e-4);
    assert!(s.lr(480) <= 1e-7);
    assert!((1..=480).all(|t| s.lr(t) <= s.lr(t - 1)));
}

#[test]
fn constant_frames_are_learned_within_200_steps() {
    let arch = ArchitectureConfig {
        resolution: (16, 16),
        encoder_channels: [4, 4, 8, 8, 8],
        ..Default::default()
    };
    let mut ae = Autoencoder::<f32>::appearance(&arch, &mut ChaCha8Rng::seed_from_u64(0));
    let clean = Tensor::full([4, arch.appearance_channels(), 16, 16], 0.6f32);
    let mut adam = Adam::default();
    let mut last = f32::INFINITY;
    // at the training rate of 4e-4 this net only gets to about 4e-3 in 200 steps
    for step in 0..200 {
        ae.zero_grad();
        last = pretrain_appearance_step(&mut ae, &clean, 0.2, step).unwrap();
        adam.step(&mut ae, 4e-3);
        if last < 1e-3 {
            break;
        }
    }
    assert!(last < 1e-3, "loss {last}");
}

#[test]
fn invalid_ablations_are_rejected_before_training() {
    let mut cfg = tiny_config(8);
    cfg.ablation.use_appearance_stream = false;
    assert!(cfg.validate().unwrap_err().is_validation());
    let mut cfg = tiny_config(8);
    cfg.ablation.use_motion_stream = false;
    let data = prepare_data::<f32>(&tiny_config(8)).unwrap();
    let mut model = StmAe::<f32>::new(&cfg.architecture, &cfg.memory, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = train_main(
        &cfg,
        &data,
        &mut model,
        &dir.path().join("x.ckpt"),
        &dir.path().join("x.csv"),
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(err.is_validation());
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn full_generator_gradient_matches_finite_differences() {
    let mut cfg = tiny_config(9);
    cfg.architecture.encoder_channels = [2, 2, 3, 3, 3];
    cfg.architecture.discriminator_channels = [2, 2, 2];
    let data = prepare_data::<f64>(&cfg).unwrap();
    let refs = clip_refs(&data.train, cfg.architecture.k_in, 1).unwrap();
    let batch = make_batch(&data.train, &refs[..2], cfg.architecture.k_in).unwrap();
    let full = AblationConfig::full();
    let mut model = StmAe::<f64>::new(&cfg.architecture, &cfg.memory, cfg.seed).unwrap();
    let loss = |m: &mut StmAe<f64>| {
        let fwd = m.forward(&batch, &full, Mode::Train).unwrap();
        m.generator().zero_grad();
        m.generator_backward(&fwd, &batch, &cfg.weights, &full, &ProxyFlow).unwrap().l_g
    };
    loss(&mut model);
    let mut analytic = Vec::new();
    model.generator().visit_params("", &mut |_, p| analytic.extend_from_slice(&p.grad));
    let nudge = |m: &mut StmAe<f64>, index: usize, delta: f64| {
        let mut seen = 0;
        m.generator().visit_params("", &mut |_, p| {
            if index >= seen && index < seen + p.len() {
                p.value[index - seen] += delta;
            }
            seen += p.len();
        });
    };
    let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6);
    let mut bad = Vec::new();
    for i in (0..analytic.len()).step_by(7) {
        let an = analytic[i];
        let h = 1e-5;
        nudge(&mut model, i, h);
        let lp = loss(&mut model);
        nudge(&mut model, i, -2.0 * h);
        let lm = loss(&mut model);
        nudge(&mut model, i, h);
        let fd = (lp - lm) / (2.0 * h);
        if close(fd, an) {
            continue;
        }
        // a leaky-relu kink within h of the current point breaks the central
        // difference; the backward pass must then match one side of it
        let h = 1e-7;
        let l0 = loss(&mut model);
        nudge(&mut model, i, h);
        let right = (loss(&mut model) - l0) / h;
        nudge(&mut model, i, -2.0 * h);
        let left = (l0 - loss(&mut model)) / h;
        nudge(&mut model, i, h);
        if !close(right, an) && !close(left, an) {
            bad.push((i, fd, right, left, an));
        }
    }
    assert!(bad.is_empty(), "{} of {} params off: {:?}", bad.len(), analytic.len() / 7, &bad[..bad.len().min(5)]);
}
