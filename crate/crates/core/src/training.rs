//! Training loops for every model kind, sharing one loop skeleton so the
//! comparison models differ only in their objective.
//!
//! Determinism contract: the RNG stream of step `k` is derived from
//! `(seed, k)` alone, so resuming from a checkpoint at any step reproduces
//! the uninterrupted trajectory bit-exactly.

use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{
    AdamConfig, AdamError, AdamState, ArchConfig, Buffer, GradStore, ModelKind, NetError,
    TrainMeta, VectorFieldNet,
};
use crate::baselines::{BaselineError, DiffusionSchedule};
use crate::codec::{CodecError, LatentUpsample, PatchCodec};
use crate::datasets::{BimodalSample, PairedSample, ToyPair};
use crate::paths::{
    coupled_sample_with_z, naive_point, noise_augment, NoiseAugConfig, PathError,
};
use crate::tensor::{RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u32, loss: f64 },
}

/// Latent-space training set: high latents, resolution-matched source
/// latents, and the raw low latents.
#[derive(Debug, Clone)]
pub struct LatentPairSet {
    pub x1: Vec<Tensor>,
    /// Upsampled low latents (the coupled source / conditioning).
    pub x0_up: Vec<Tensor>,
    pub low: Vec<Tensor>,
}

impl LatentPairSet {
    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    /// Encodes paired images and resolution-matches the low latent.
    pub fn from_pairs(
        pairs: &[PairedSample],
        codec: &PatchCodec,
        method: LatentUpsample,
    ) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut x1 = Vec::with_capacity(pairs.len());
        let mut x0_up = Vec::with_capacity(pairs.len());
        let mut low = Vec::with_capacity(pairs.len());
        for p in pairs {
            let hi = codec.encode(&p.high)?;
            let lo = codec.encode(&p.low)?;
            x0_up.push(method.apply(codec, &lo, p.factor)?);
            x1.push(hi);
            low.push(lo);
        }
        Ok(Self { x1, x0_up, low })
    }

    pub fn from_bimodal(
        samples: &[BimodalSample],
        codec: &PatchCodec,
        method: LatentUpsample,
    ) -> Result<Self, TrainError> {
        let pairs: Vec<PairedSample> = samples.iter().map(|s| s.sample.clone()).collect();
        Self::from_pairs(&pairs, codec, method)
    }

    /// The 2-d toy coupling as (2, 1, 1) latents; the source is the coupling
    /// input itself.
    pub fn from_toy(pairs: &[ToyPair]) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        Ok(Self {
            x1: pairs.iter().map(|p| p.x1_tensor()).collect(),
            x0_up: pairs.iter().map(|p| p.x0_tensor()).collect(),
            low: pairs.iter().map(|p| p.x0_tensor()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u32,
    pub batch: u32,
    pub lr: f64,
    pub seed: u64,
    pub sigma_min: f64,
    pub noise_aug: NoiseAugConfig,
    /// Draw the noising timestep uniformly from [0, t_aug] per sample
    /// instead of using it verbatim.
    pub randomize_t_aug: bool,
    /// Schedule length for the diffusion baselines.
    pub diffusion_steps: u32,
    pub log_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr: 5e-5,
            seed: 0,
            sigma_min: 1e-4,
            noise_aug: NoiseAugConfig::default(),
            randomize_t_aug: false,
            diffusion_steps: 1000,
            log_every: 10,
        }
    }
}

/// One loss-curve row: `(step, loss, wall_time_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u32,
    pub loss: f64,
    pub wall_time_s: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss,wall_time_s\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.wall_time_s));
    }
    out
}

pub struct TrainOutput {
    pub net: VectorFieldNet,
    pub adam: AdamState,
    pub loss_rows: Vec<LossRow>,
}

const TRAIN_SALT: u64 = 0x7241_0001;

/// Per-step RNG stream; depends only on (seed, step).
fn step_stream(seed: u64, step: u32) -> RngStream {
    RngStream::new(seed, TRAIN_SALT ^ (step as u64).wrapping_mul(2))
}

/// Worker threads for batch-parallel gradient evaluation. Each batch slot
/// owns a pre-assigned RNG substream and results reduce in slot order, so
/// scheduling cannot change any result.
fn worker_count() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

struct SampleLoss {
    loss: f64,
    grads: GradStore<f32>,
}

/// Forward, loss, and cotangent for one training sample of the given kind.
fn sample_pass(
    kind: ModelKind,
    net: &VectorFieldNet,
    data: &LatentPairSet,
    index: usize,
    cfg: &TrainConfig,
    schedule: Option<&DiffusionSchedule>,
    rng: &mut RngStream,
) -> Result<SampleLoss, TrainError> {
    let x1 = &data.x1[index];
    let x0_clean = &data.x0_up[index];
    let numel = x1.len() as f64;

    let (t, x_in, z, target): (f64, Tensor, Option<Tensor>, Tensor) = match kind {
        ModelKind::Cfm => {
            let t = rng.next_f64();
            let mut aug = cfg.noise_aug.clone();
            if cfg.randomize_t_aug && aug.t_aug > 0 {
                aug.t_aug = rng.next_below(aug.t_aug as u64 + 1) as u32;
            }
            let x0 = noise_augment(x0_clean, &aug, rng)?;
            let s = coupled_sample_with_z(&x0, x1, x0_clean.clone(), t, cfg.sigma_min, rng)?;
            (t, s.x_t, Some(s.z), s.u_target)
        }
        ModelKind::FmNaive => {
            let t = rng.next_f64();
            let x0 = Tensor::gaussian(x1.shape().to_vec(), rng)?;
            let x_t = naive_point(&x0, x1, t, cfg.sigma_min)?;
            // Loss-form target: x1 - (1 - sigma_min) x0.
            let u = x1.sub(&x0.scale((1.0 - cfg.sigma_min) as f32))?;
            (t, x_t, Some(x0_clean.clone()), u)
        }
        ModelKind::DmUpsampler | ModelKind::DdpmPrior => {
            let schedule = schedule.expect("diffusion kinds carry a schedule");
            let (x_data, z) = if kind == ModelKind::DmUpsampler {
                (x1.clone(), Some(x0_clean.clone()))
            } else {
                (data.low[index].clone(), None)
            };
            let t_idx = 1 + rng.next_below(schedule.total_steps as u64) as u32;
            let eps = Tensor::gaussian(x_data.shape().to_vec(), rng)?;
            let x_t = schedule.noise_to(&x_data, t_idx, &eps)?;
            (schedule.time_of(t_idx), x_t, z, eps)
        }
        ModelKind::RegL1 | ModelKind::RegL2 => {
            (0.0, x0_clean.clone(), Some(x0_clean.clone()), x1.clone())
        }
    };

    let pass = net.forward_pass::<f32>(t, &x_in, z.as_ref())?;
    let out = pass.output_buffer();

    // Regression predicts x + delta; every other kind predicts the target
    // field directly. Either way d loss / d out has the same closed form.
    let residual_base: Option<&Tensor> = match kind {
        ModelKind::RegL1 | ModelKind::RegL2 => Some(&x_in),
        _ => None,
    };

    let mut loss = 0.0f64;
    let mut cot = Buffer::<f32> {
        shape: out.shape.clone(),
        data: vec![0.0; out.data.len()],
    };
    let l1 = kind == ModelKind::RegL1;
    for i in 0..out.data.len() {
        let pred = out.data[i] as f64
            + residual_base.map_or(0.0, |b| b.data()[i] as f64);
        let diff = pred - target.data()[i] as f64;
        if l1 {
            loss += diff.abs();
            cot.data[i] = (diff.signum() / numel) as f32;
        } else {
            loss += diff * diff;
            cot.data[i] = (2.0 * diff / numel) as f32;
        }
    }
    loss /= numel;

    let grads = pass.backward(&cot);
    Ok(SampleLoss { loss, grads })
}

/// Per-step observer; fires after every step with the live net and
/// optimizer so callers can checkpoint on their own cadence.
pub type StepObserver<'a> = &'a mut dyn FnMut(u32, &VectorFieldNet, &AdamState);

/// Trains `net` in place from `start_step` for `cfg.steps` total steps.
#[allow(clippy::too_many_arguments)]
pub fn train_steps(
    kind: ModelKind,
    net: &mut VectorFieldNet,
    adam: &mut AdamState,
    data: &LatentPairSet,
    cfg: &TrainConfig,
    start_step: u32,
    mut on_interval: Option<StepObserver<'_>>,
) -> Result<Vec<LossRow>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let schedule = match kind {
        ModelKind::DmUpsampler | ModelKind::DdpmPrior => {
            Some(DiffusionSchedule::cosine(cfg.diffusion_steps))
        }
        _ => None,
    };
    let n = data.len() as u64;
    let started = Instant::now();
    let mut rows = Vec::new();

    let workers = worker_count().min(cfg.batch as usize).max(1);
    for step in start_step..cfg.steps {
        // Batch indices come from the step stream; each slot then draws from
        // its own substream, keyed by slot position alone.
        let mut rng = step_stream(cfg.seed, step);
        let indices: Vec<usize> = (0..cfg.batch).map(|_| rng.next_below(n) as usize).collect();
        let net_ref: &VectorFieldNet = net;
        let schedule_ref = schedule.as_ref();
        let rng_ref = &rng;
        let indices_ref = &indices;
        let slot_pass = move |slot: usize| -> Result<SampleLoss, TrainError> {
            let mut slot_rng = rng_ref.substream(slot as u64);
            sample_pass(
                kind,
                net_ref,
                data,
                indices_ref[slot],
                cfg,
                schedule_ref,
                &mut slot_rng,
            )
        };

        let results: Vec<Result<SampleLoss, TrainError>> = if workers > 1 {
            let slot_pass = &slot_pass;
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..cfg.batch as usize)
                    .map(|slot| scope.spawn(move || slot_pass(slot)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect()
            })
        } else {
            (0..cfg.batch as usize).map(slot_pass).collect()
        };

        let mut grads = GradStore::<f32>::zeros_like(net.params());
        let mut loss_acc = 0.0f64;
        for sl in results {
            let sl = sl?;
            loss_acc += sl.loss;
            grads.accumulate(&sl.grads);
        }
        let loss = loss_acc / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        grads.scale_all(1.0 / cfg.batch as f32);
        adam.step(net.params_mut(), &grads)?;

        let done = step + 1;
        if done % cfg.log_every.max(1) == 0 || done == cfg.steps {
            rows.push(LossRow {
                step: done,
                loss,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
        }
        // Callers gate their own cadence (checkpoint intervals etc.).
        if let Some(cb) = on_interval.as_deref_mut() {
            cb(done, net, adam);
        }
    }
    Ok(rows)
}

/// Fresh-net convenience wrapper around [`train_steps`].
pub fn train_model(
    kind: ModelKind,
    arch: &ArchConfig,
    data: &LatentPairSet,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    let mut net = VectorFieldNet::new(arch.clone(), cfg.seed);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        net.params(),
    );
    let loss_rows = train_steps(kind, &mut net, &mut adam, data, cfg, 0, None)?;
    Ok(TrainOutput {
        net,
        adam,
        loss_rows,
    })
}

/// Default conditional architecture for a latent channel count, with the
/// attention level dropped when the latent grid is too small to pool twice.
pub fn arch_for_latents(latent_channels: usize, spatial: usize, conditional: bool) -> ArchConfig {
    let mut mults = vec![1, 2, 4];
    while mults.len() > 1 && !spatial.is_multiple_of(1 << (mults.len() - 1)) {
        mults.pop();
    }
    while mults.len() > 1 && spatial / (1 << (mults.len() - 1)) < 2 {
        mults.pop();
    }
    ArchConfig {
        in_channels_x: latent_channels,
        in_channels_z: if conditional { latent_channels } else { 0 },
        base_channels: 32,
        channel_mults: mults,
        blocks_per_level: 2,
        attn_at_bottom: true,
        time_embed_dim: 128,
        norm_groups: 8,
    }
}

/// TrainMeta snapshot of a finished run, for embedding in checkpoints.
pub fn meta_of(cfg: &TrainConfig, method: LatentUpsample, factor: u32, codec_seed: u64) -> TrainMeta {
    TrainMeta {
        sigma_min: cfg.sigma_min,
        noise_aug_t: cfg.noise_aug.t_aug,
        schedule_steps: cfg.diffusion_steps,
        schedule_offset: cfg.noise_aug.offset,
        upsample: method,
        factor,
        codec_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_2d_toy, gen_texture};

    fn toy_arch() -> ArchConfig {
        ArchConfig {
            in_channels_x: 2,
            in_channels_z: 2,
            base_channels: 16,
            channel_mults: vec![1],
            blocks_per_level: 1,
            attn_at_bottom: false,
            time_embed_dim: 32,
            norm_groups: 4,
        }
    }

    #[test]
    fn toy_cfm_loss_drops() {
        let data = LatentPairSet::from_toy(&gen_2d_toy(1, 256).unwrap()).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            batch: 8,
            lr: 2e-3,
            seed: 7,
            sigma_min: 1e-4,
            noise_aug: NoiseAugConfig::new(0, 1000),
            ..TrainConfig::default()
        };
        let out = train_model(ModelKind::Cfm, &toy_arch(), &data, &cfg).unwrap();
        let first = out.loss_rows.first().unwrap().loss;
        let last = out.loss_rows.last().unwrap().loss;
        assert!(last < 0.05, "final loss {last} (first {first})");
    }

    #[test]
    fn training_is_deterministic() {
        let data = LatentPairSet::from_toy(&gen_2d_toy(2, 64).unwrap()).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            batch: 4,
            lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train_model(ModelKind::Cfm, &toy_arch(), &data, &cfg).unwrap();
        let b = train_model(ModelKind::Cfm, &toy_arch(), &data, &cfg).unwrap();
        for i in 0..a.net.params().len() {
            assert_eq!(a.net.params().get(i), b.net.params().get(i));
        }
        assert_eq!(
            a.loss_rows.iter().map(|r| r.loss).collect::<Vec<_>>(),
            b.loss_rows.iter().map(|r| r.loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = LatentPairSet::from_toy(&gen_2d_toy(4, 64).unwrap()).unwrap();
        let cfg = TrainConfig {
            steps: 30,
            batch: 2,
            lr: 1e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let full = train_model(ModelKind::Cfm, &toy_arch(), &data, &cfg).unwrap();

        // Run 15 steps, "checkpoint" in memory, then resume to 30.
        let mut net = VectorFieldNet::new(toy_arch(), cfg.seed);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            net.params(),
        );
        let half_cfg = TrainConfig {
            steps: 15,
            ..cfg.clone()
        };
        train_steps(ModelKind::Cfm, &mut net, &mut adam, &data, &half_cfg, 0, None).unwrap();
        train_steps(ModelKind::Cfm, &mut net, &mut adam, &data, &cfg, 15, None).unwrap();

        for i in 0..net.params().len() {
            assert_eq!(net.params().get(i), full.net.params().get(i));
        }
    }

    #[test]
    fn regression_on_identity_dataset_converges() {
        // Target equals input: loss falls toward zero quickly.
        let pairs = gen_texture(5, 16, 16, 2).unwrap();
        let codec = PatchCodec::new(2, 1, 9);
        let mut data = LatentPairSet::from_pairs(&pairs, &codec, LatentUpsample::Psu).unwrap();
        data.x1 = data.x0_up.clone();
        let arch = ArchConfig {
            in_channels_x: 4,
            in_channels_z: 4,
            base_channels: 8,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            attn_at_bottom: false,
            time_embed_dim: 16,
            norm_groups: 4,
        };
        let cfg = TrainConfig {
            steps: 40,
            batch: 2,
            lr: 1e-3,
            seed: 2,
            ..TrainConfig::default()
        };
        let out = train_model(ModelKind::RegL2, &arch, &data, &cfg).unwrap();
        // Residual parameterization starts at the answer; it must stay there.
        assert!(out.loss_rows.last().unwrap().loss < 1e-4);
    }

    #[test]
    fn ddpm_loss_starts_near_one() {
        // Zero-init head predicts 0, so the epsilon loss is E|eps|^2 = 1.
        let pairs = gen_texture(6, 8, 16, 2).unwrap();
        let codec = PatchCodec::new(2, 1, 9);
        let data = LatentPairSet::from_pairs(&pairs, &codec, LatentUpsample::Psu).unwrap();
        let arch = ArchConfig {
            in_channels_x: 4,
            in_channels_z: 4,
            base_channels: 8,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            attn_at_bottom: false,
            time_embed_dim: 16,
            norm_groups: 4,
        };
        let cfg = TrainConfig {
            steps: 1,
            batch: 16,
            lr: 1e-9,
            seed: 13,
            log_every: 1,
            ..TrainConfig::default()
        };
        let out = train_model(ModelKind::DmUpsampler, &arch, &data, &cfg).unwrap();
        let first = out.loss_rows.first().unwrap().loss;
        assert!((first - 1.0).abs() < 0.15, "first loss {first}");
    }

    #[test]
    fn comparison_models_share_one_architecture() {
        // Every objective builds from the same config, so parameter names
        // and shapes are identical across the comparison systems.
        let arch = ArchConfig {
            in_channels_x: 4,
            in_channels_z: 4,
            base_channels: 8,
            channel_mults: vec![1, 2],
            blocks_per_level: 1,
            attn_at_bottom: true,
            time_embed_dim: 16,
            norm_groups: 4,
        };
        let reference = VectorFieldNet::new(arch.clone(), 1);
        for seed in [1u64, 2] {
            let net = VectorFieldNet::new(arch.clone(), seed);
            assert_eq!(net.params().len(), reference.params().len());
            for i in 0..net.params().len() {
                assert_eq!(net.params().name(i), reference.params().name(i));
                assert_eq!(
                    net.params().get(i).shape(),
                    reference.params().get(i).shape()
                );
            }
        }
    }

    #[test]
    fn loss_csv_round_trips_by_eye() {
        let rows = vec![LossRow {
            step: 10,
            loss: 0.5,
            wall_time_s: 1.25,
        }];
        let text = loss_csv(&rows);
        assert!(text.starts_with("step,loss,wall_time_s\n"));
        assert!(text.contains("10,0.5,1.25"));
    }
}
