//! The assembled two-stream model: encoders, memory pools, joint predictor
//! and discriminator, with the generator loss and its backward pass.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AblationConfig, LossWeights, MemoryConfig, Reduction};
use super::derive_seed;
use crate::adversarial::PatchDiscriminator;
use crate::autoencoder::{predict_frame, AggregatedFeatures, ArchitectureConfig, Autoencoder, FeatureMap};
use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::memory::{MemoryPool, PoolRole, QueryBatch, ReadOutput};
use crate::nn::{Mode, Param, Parameters, StageStack};
use crate::scalar::Scalar;
use crate::tensor::{mse_with_grad, Tensor};

/// One training or evaluation batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch<T> {
    /// `[B, 3·k_in, H, W]` stacked input frames.
    pub inputs: Tensor<T>,
    /// `[B, 2·(k_in − 1), H, W]` stacked consecutive input flows.
    pub flows: Tensor<T>,
    /// `[B, 3, H, W]` frame to predict.
    pub target: Tensor<T>,
    /// `[B, 3, H, W]` last input frame.
    pub previous: Tensor<T>,
}

impl<T: Scalar> ClipBatch<T> {
    pub fn len(&self) -> usize {
        self.inputs.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward state of one stream.
#[derive(Debug, Clone)]
pub struct StreamPass<T> {
    pub features: FeatureMap<T>,
    /// Queries per sample.
    pub queries: Vec<QueryBatch<T>>,
    /// Memory reads per sample, absent when the stream's memory is disabled.
    pub reads: Option<Vec<ReadOutput<T>>>,
    /// Memory-reconstructed features, `[B, C, H_f, W_f]`.
    pub reconstructed: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub prediction: Tensor<T>,
    pub appearance: Option<StreamPass<T>>,
    pub motion: Option<StreamPass<T>>,
}

/// Generator loss terms of one batch; disabled terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_m: f64,
    pub l_r: f64,
    pub l_adv: f64,
    pub l_g: f64,
}

/// Mean squared error between prediction and target with its gradient.
pub fn compute_l_a<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    mse_with_grad(pred, target)
}

static NON_DIFFERENTIABLE_WARNED: AtomicBool = AtomicBool::new(false);

/// Mean squared difference between `flow(pred, prev)` and
/// `flow(target, prev)`. The gradient with respect to `pred` is `None` when
/// the provider is not differentiable.
pub fn compute_l_m<T: Scalar>(
    pred: &Tensor<T>,
    previous: &Tensor<T>,
    target: &Tensor<T>,
    provider: &dyn FlowProvider<T>,
) -> Result<(T, Option<Tensor<T>>)> {
    let fp = provider.pairwise_flow(pred, previous)?;
    let ft = provider.pairwise_flow(target, previous)?;
    let (loss, grad_flow) = mse_with_grad(&fp, &ft)?;
    match provider.flow_vjp(pred, previous, &grad_flow) {
        Some(g) => Ok((loss, Some(g?))),
        None => {
            if !NON_DIFFERENTIABLE_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!(
                    "flow provider {:?} is not differentiable; the motion loss passes no gradient",
                    provider.name()
                );
            }
            Ok((loss, None))
        }
    }
}

/// Mutable view of the generator's parameters: both encoders and the joint
/// predictor. The pretraining decoders are not part of it.
pub struct GeneratorHandle<'a, T> {
    pub appearance_encoder: &'a mut StageStack<T>,
    pub motion_encoder: &'a mut StageStack<T>,
    pub predictor: &'a mut StageStack<T>,
}

impl<T: Scalar> Parameters<T> for GeneratorHandle<'_, T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.appearance_encoder.visit_params(&format!("{prefix}appearance.encoder."), f);
        self.motion_encoder.visit_params(&format!("{prefix}motion.encoder."), f);
        self.predictor.visit_params(&format!("{prefix}predictor."), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.appearance_encoder.visit_buffers(&format!("{prefix}appearance.encoder."), f);
        self.motion_encoder.visit_buffers(&format!("{prefix}motion.encoder."), f);
        self.predictor.visit_buffers(&format!("{prefix}predictor."), f);
    }
}

#[derive(Debug, Clone)]
pub struct StmAe<T> {
    pub arch: ArchitectureConfig,
    pub memory_config: MemoryConfig,
    pub appearance: Autoencoder<T>,
    pub motion: Autoencoder<T>,
    pub predictor: StageStack<T>,
    pub discriminator: PatchDiscriminator<T>,
    pub spatial: MemoryPool<T>,
    pub temporal: MemoryPool<T>,
}

impl<T: Scalar> StmAe<T> {
    /// Every component draws from its own stream of `seed`, so the
    /// autoencoders are identical across memory and ablation settings.
    pub fn new(arch: &ArchitectureConfig, memory: &MemoryConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let rng = |tag: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, &[]));
        let c = arch.feature_channels();
        let k = memory.k_top.resolve();
        Ok(Self {
            arch: arch.clone(),
            memory_config: *memory,
            appearance: Autoencoder::appearance(arch, &mut rng("init.appearance")),
            motion: Autoencoder::motion(arch, &mut rng("init.motion")),
            predictor: StageStack::new(&arch.joint_decoder_specs(), &mut rng("init.predictor")),
            discriminator: PatchDiscriminator::new(arch, &mut rng("init.discriminator")),
            spatial: MemoryPool::new(PoolRole::Spatial, memory.n_items, c, k, &mut rng("init.spatial"))?,
            temporal: MemoryPool::new(PoolRole::Temporal, memory.n_items, c, k, &mut rng("init.temporal"))?,
        })
    }

    pub fn generator(&mut self) -> GeneratorHandle<'_, T> {
        GeneratorHandle {
            appearance_encoder: &mut self.appearance.encoder,
            motion_encoder: &mut self.motion.encoder,
            predictor: &mut self.predictor,
        }
    }

    fn check_batch(&self, batch: &ClipBatch<T>) -> Result<()> {
        let (h, w) = self.arch.resolution;
        let b = batch.len();
        let expect = [
            (&batch.inputs, [b, self.arch.appearance_channels(), h, w], "inputs"),
            (&batch.flows, [b, self.arch.motion_channels(), h, w], "flows"),
            (&batch.target, [b, 3, h, w], "target"),
            (&batch.previous, [b, 3, h, w], "previous"),
        ];
        for (t, shape, name) in expect {
            if t.shape() != shape {
                return Err(Error::Shape(format!("batch {name}: {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    fn stream_pass(
        ae: &mut Autoencoder<T>,
        pool: &MemoryPool<T>,
        input: &Tensor<T>,
        use_memory: bool,
        mode: Mode,
    ) -> Result<StreamPass<T>> {
        let features = ae.encode(input, mode)?;
        let b = features.tensor.batch();
        let queries: Vec<QueryBatch<T>> = (0..b).map(|i| QueryBatch::from_feature(&features.tensor, i)).collect();
        let (reads, reconstructed) = if use_memory {
            let reads = queries.iter().map(|q| pool.read(q)).collect::<Result<Vec<_>>>()?;
            let mut rec = Tensor::zeros(features.tensor.shape());
            for (i, r) in reads.iter().enumerate() {
                r.reconstructed.write_into_sample(rec.sample_mut(i));
            }
            (Some(reads), Some(rec))
        } else {
            (None, None)
        };
        Ok(StreamPass {
            features,
            queries,
            reads,
            reconstructed,
        })
    }

    /// Encodes both streams, reads the pools and predicts the target frame.
    /// Pools are never modified here.
    pub fn forward(&mut self, batch: &ClipBatch<T>, ablation: &AblationConfig, mode: Mode) -> Result<ForwardPass<T>> {
        self.check_batch(batch)?;
        let appearance = if ablation.use_appearance_stream {
            Some(Self::stream_pass(
                &mut self.appearance,
                &self.spatial,
                &batch.inputs,
                ablation.use_spatial_memory,
                mode,
            )?)
        } else {
            None
        };
        let motion = if ablation.use_motion_stream {
            Some(Self::stream_pass(
                &mut self.motion,
                &self.temporal,
                &batch.flows,
                ablation.use_temporal_memory,
                mode,
            )?)
        } else {
            None
        };
        let (hf, wf) = self.arch.feature_dims();
        let shape = [batch.len(), self.arch.feature_channels(), hf, wf];
        fn raw<T>(s: &Option<StreamPass<T>>) -> Option<&Tensor<T>> {
            s.as_ref().map(|s| &s.features.tensor)
        }
        fn rec<T>(s: &Option<StreamPass<T>>) -> Option<&Tensor<T>> {
            s.as_ref().and_then(|s| s.reconstructed.as_ref())
        }
        let aggregated = AggregatedFeatures::new(
            shape,
            [raw(&appearance), rec(&appearance), raw(&motion), rec(&motion)],
        )?;
        let prediction = predict_frame(&mut self.predictor, &aggregated, mode)?;
        Ok(ForwardPass {
            prediction,
            appearance,
            motion,
        })
    }

    /// One discriminator update's gradients on `real` and the detached
    /// prediction. Clears discriminator gradients first.
    pub fn discriminator_backward(&mut self, real: &Tensor<T>, fake: &Tensor<T>) -> Result<T> {
        self.discriminator.zero_grad();
        self.discriminator.discriminator_step(real, fake)
    }

    /// Computes the generator loss of `fwd` and accumulates its gradients
    /// into the generator parameters. Discriminator gradients are left dirty.
    pub fn generator_backward(
        &mut self,
        fwd: &ForwardPass<T>,
        batch: &ClipBatch<T>,
        weights: &LossWeights,
        ablation: &AblationConfig,
        loss_flow: &dyn FlowProvider<T>,
    ) -> Result<LossBreakdown> {
        let pred = &fwd.prediction;
        let mut out = LossBreakdown::default();
        let mut grad_pred = Tensor::zeros(pred.shape());
        if ablation.use_l_a {
            let (l, g) = compute_l_a(pred, &batch.target)?;
            out.l_a = l.as_f64();
            grad_pred.add_assign(&g)?;
        }
        if ablation.use_l_m {
            let (l, g) = compute_l_m(pred, &batch.previous, &batch.target, loss_flow)?;
            out.l_m = l.as_f64();
            if let Some(mut g) = g {
                g.scale(T::lit(weights.motion));
                grad_pred.add_assign(&g)?;
            }
        }
        if ablation.use_l_adv {
            let (l, mut g) = self.discriminator.generator_loss(pred)?;
            out.l_adv = l.as_f64();
            g.scale(T::lit(weights.adversarial));
            grad_pred.add_assign(&g)?;
        }
        let grad_agg = self.predictor.backward(&grad_pred);
        let parts = AggregatedFeatures::split(&grad_agg, self.arch.feature_channels())?;
        let reduction = self.memory_config.separation_reduction;
        let lambda_r = T::lit(weights.separation);
        if let Some(sp) = &fwd.appearance {
            let (gz, l_r) = stream_backward(sp, &self.spatial, &parts[0], &parts[1], ablation.use_l_r, lambda_r, reduction)?;
            out.l_r += l_r;
            self.appearance.encoder.backward(&gz);
        }
        if let Some(sp) = &fwd.motion {
            let (gz, l_r) = stream_backward(sp, &self.temporal, &parts[2], &parts[3], ablation.use_l_r, lambda_r, reduction)?;
            out.l_r += l_r;
            self.motion.encoder.backward(&gz);
        }
        out.l_g = out.l_a + weights.motion * out.l_m + weights.separation * out.l_r + weights.adversarial * out.l_adv;
        for (name, v) in [("L_a", out.l_a), ("L_m", out.l_m), ("L_r", out.l_r), ("L_adv", out.l_adv)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} is {v}")));
            }
        }
        Ok(out)
    }

    /// One write per enabled pool with the queries of the whole batch.
    pub fn write_memories(&mut self, fwd: &ForwardPass<T>) -> Result<()> {
        if let Some(sp) = fwd.appearance.as_ref().filter(|s| s.reads.is_some()) {
            self.spatial.write(&batch_queries(&sp.queries)?)?;
        }
        if let Some(sp) = fwd.motion.as_ref().filter(|s| s.reads.is_some()) {
            self.temporal.write(&batch_queries(&sp.queries)?)?;
        }
        Ok(())
    }
}

fn batch_queries<T: Scalar>(per_sample: &[QueryBatch<T>]) -> Result<QueryBatch<T>> {
    let dim = per_sample[0].dim();
    let data: Vec<T> = per_sample.iter().flat_map(|q| q.data().iter().copied()).collect();
    let len = data.len() / dim;
    QueryBatch::new(data, len, dim)
}

/// Gradient on one stream's encoder output from its raw slot, its memory
/// read slot and the separation loss. Returns `(gradient, L_r contribution)`.
fn stream_backward<T: Scalar>(
    sp: &StreamPass<T>,
    pool: &MemoryPool<T>,
    grad_raw: &Tensor<T>,
    grad_read: &Tensor<T>,
    use_l_r: bool,
    lambda_r: T,
    reduction: Reduction,
) -> Result<(Tensor<T>, f64)> {
    let mut gz = grad_raw.clone();
    let Some(reads) = &sp.reads else {
        return Ok((gz, 0.0));
    };
    let b = sp.queries.len();
    let (len, dim) = (sp.queries[0].len(), sp.queries[0].dim());
    let scale = match reduction {
        Reduction::Sum => 1.0 / b as f64,
        Reduction::Mean => 1.0 / (b * len) as f64,
    };
    let mut l_r = 0.0;
    let mut tmp = vec![T::zero(); len * dim];
    for (i, (q, read)) in sp.queries.iter().zip(reads).enumerate() {
        let g_read = QueryBatch::from_feature(grad_read, i);
        let (mut gq, _) = pool.read_backward(q, read, g_read.data())?;
        if use_l_r {
            let sep = pool.separation_loss(q)?;
            l_r += sep.value.as_f64() * scale;
            let w = lambda_r * T::lit(scale);
            gq.iter_mut().zip(&sep.grad_queries).for_each(|(g, s)| *g += w * *s);
        }
        QueryBatch::new(gq, len, dim)?.write_into_sample(&mut tmp);
        gz.sample_mut(i).iter_mut().zip(&tmp).for_each(|(g, t)| *g += *t);
    }
    Ok((gz, l_r))
}

impl<T: Scalar> Parameters<T> for StmAe<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.appearance.visit_params(&format!("{prefix}appearance."), f);
        self.motion.visit_params(&format!("{prefix}motion."), f);
        self.predictor.visit_params(&format!("{prefix}predictor."), f);
        self.discriminator.visit_params(&format!("{prefix}discriminator."), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        self.appearance.visit_buffers(&format!("{prefix}appearance."), f);
        self.motion.visit_buffers(&format!("{prefix}motion."), f);
        self.predictor.visit_buffers(&format!("{prefix}predictor."), f);
        self.discriminator.visit_buffers(&format!("{prefix}discriminator."), f);
    }
}
