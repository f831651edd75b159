//! End-to-end orchestration: sampling a trained upsampler from a source
//! latent, the two-stage pipeline (low-res prior, then latent upsampling,
//! then decode), and the evaluation harness producing metric reports.

use thiserror::Error;

use crate::autodiff::{Checkpoint, CheckpointError, ModelKind, NetError, TrainMeta, VectorFieldNet};
use crate::baselines::{ddim_sample_from, regression_predict, BaselineError, DiffusionSchedule};
use crate::codec::{CodecError, PatchCodec};
use crate::datasets::PairedSample;
use crate::metrics::{ffd_with, patch_ffd, psnr, ssim, FeatureExtractor, MetricError, MetricReport};
use crate::paths::{noise_augment, NoiseAugConfig, PathError};
use crate::solvers::{integrate, SolverConfig, SolverError, SolverRun};
use crate::tensor::{RngStream, Tensor, TensorError};
use crate::training::{LatentPairSet, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("stage shapes do not chain: {0}")]
    StageMismatch(String),
    #[error("model kind {0} cannot be sampled by this command")]
    WrongKind(&'static str),
}

/// Seed salts for the independent random draws of a sampling run.
const SAMPLE_AUG_SALT: u64 = 0x5A31_0001;
const SAMPLE_PRIOR_SALT: u64 = 0x5A31_0002;

/// Flow-matching sampling from an upsampled source latent: noise-augment,
/// then integrate the learned field from t = 0 to 1 conditioned on the
/// clean source.
pub fn sample_flow(
    net: &VectorFieldNet,
    meta: &TrainMeta,
    kind: ModelKind,
    x0_up: &Tensor,
    solver: &SolverConfig,
    rng: &mut RngStream,
) -> Result<SolverRun, PipelineError> {
    let start = match kind {
        ModelKind::Cfm => {
            let aug = NoiseAugConfig {
                t_aug: meta.noise_aug_t,
                total_steps: meta.schedule_steps,
                offset: meta.schedule_offset,
            };
            noise_augment(x0_up, &aug, rng)?
        }
        ModelKind::FmNaive => Tensor::gaussian(x0_up.shape().to_vec(), rng)?,
        _ => return Err(PipelineError::WrongKind(kind.name())),
    };
    let run = integrate(
        |t, x, z| {
            net.forward(t.clamp(0.0, 1.0), x, z)
                .map_err(|e| SolverError::FieldFailed {
                    t,
                    message: e.to_string(),
                })
        },
        &start,
        Some(x0_up),
        solver,
    )?;
    Ok(run)
}

/// Samples one output latent from any trained model kind, given the
/// upsampled low latent. Returns the latent and the NFE spent.
pub fn sample_model(
    net: &VectorFieldNet,
    meta: &TrainMeta,
    kind: ModelKind,
    x0_up: &Tensor,
    solver: &SolverConfig,
    ddim_steps: usize,
    rng: &mut RngStream,
) -> Result<(Tensor, usize), PipelineError> {
    match kind {
        ModelKind::Cfm | ModelKind::FmNaive => {
            let run = sample_flow(net, meta, kind, x0_up, solver, rng)?;
            Ok((run.final_state, run.nfe))
        }
        ModelKind::DmUpsampler => {
            let schedule = DiffusionSchedule::cosine(meta.schedule_steps);
            let x_terminal = Tensor::gaussian(x0_up.shape().to_vec(), rng)?;
            let (out, nfe) =
                ddim_sample_from(net, Some(x0_up), &schedule, ddim_steps, x_terminal)?;
            Ok((out, nfe))
        }
        ModelKind::RegL1 | ModelKind::RegL2 => {
            let out = regression_predict(net, x0_up, x0_up)?;
            Ok((out, 1))
        }
        ModelKind::DdpmPrior => Err(PipelineError::WrongKind(kind.name())),
    }
}

/// Two-stage pipeline configuration: prior checkpoint, upsampler
/// checkpoint, and the sampling budget.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub prior: Checkpoint,
    pub upsampler: Checkpoint,
    /// Spatial size of the prior's latent output (grid is square).
    pub prior_latent_size: usize,
    pub ddim_steps_prior: usize,
    pub solver: SolverConfig,
    pub sample_count: usize,
    pub seed: u64,
}

/// One generated sample with its intermediate latents.
#[derive(Debug, Clone)]
pub struct PipelineSample {
    pub low_latent: Tensor,
    pub up_latent: Tensor,
    pub final_latent: Tensor,
    pub image: Tensor,
    pub nfe_prior: usize,
    pub nfe_upsampler: usize,
    /// Decoded snapshots along the trajectory, present when requested.
    pub trajectory: Vec<(f64, Tensor)>,
}

impl PipelineSpec {
    /// Validates that stage shapes chain before any compute happens.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.prior.kind != ModelKind::DdpmPrior {
            return Err(PipelineError::StageMismatch(format!(
                "stage 1 checkpoint is {}, expected ddpm_prior",
                self.prior.kind.name()
            )));
        }
        if !matches!(self.upsampler.kind, ModelKind::Cfm | ModelKind::FmNaive) {
            return Err(PipelineError::StageMismatch(format!(
                "stage 2 checkpoint is {}, expected cfm or fm_naive",
                self.upsampler.kind.name()
            )));
        }
        let c_prior = self.prior.arch.in_channels_x;
        let c_up = self.upsampler.arch.in_channels_x;
        if c_prior != c_up {
            return Err(PipelineError::StageMismatch(format!(
                "prior emits {c_prior}-channel latents, upsampler consumes {c_up}"
            )));
        }
        if self.prior.meta.codec_seed != self.upsampler.meta.codec_seed {
            return Err(PipelineError::StageMismatch(format!(
                "codec seeds differ: prior {} vs upsampler {}",
                self.prior.meta.codec_seed, self.upsampler.meta.codec_seed
            )));
        }
        let factor = self.upsampler.meta.factor as usize;
        let up_size = self.prior_latent_size * factor;
        let div = 1usize << (self.upsampler.arch.levels() - 1);
        if !up_size.is_multiple_of(div) {
            return Err(PipelineError::StageMismatch(format!(
                "upsampled latent size {up_size} not divisible by {div}"
            )));
        }
        Ok(())
    }

    /// Runs the full pipeline: prior DDIM sample, latent upsampling,
    /// noise augmentation, field integration, decode.
    pub fn run(&self, codec: &PatchCodec) -> Result<Vec<PipelineSample>, PipelineError> {
        self.validate()?;
        let prior_net = self.prior.build_net()?;
        let up_net = self.upsampler.build_net()?;
        let schedule = DiffusionSchedule::cosine(self.prior.meta.schedule_steps);
        let factor = self.upsampler.meta.factor as usize;
        let c = self.prior.arch.in_channels_x;

        let mut out = Vec::with_capacity(self.sample_count);
        for i in 0..self.sample_count as u64 {
            let mut prior_rng = RngStream::new(self.seed, SAMPLE_PRIOR_SALT ^ i.wrapping_mul(2));
            let shape = vec![c, self.prior_latent_size, self.prior_latent_size];
            let x_terminal = Tensor::gaussian(shape, &mut prior_rng)?;
            let (low_latent, nfe_prior) = ddim_sample_from(
                &prior_net,
                None,
                &schedule,
                self.ddim_steps_prior,
                x_terminal,
            )?;

            let up_latent = self
                .upsampler
                .meta
                .upsample
                .apply(codec, &low_latent, factor)?;

            let mut up_rng = RngStream::new(self.seed, SAMPLE_AUG_SALT ^ i.wrapping_mul(2));
            let run = sample_flow(
                &up_net,
                &self.upsampler.meta,
                self.upsampler.kind,
                &up_latent,
                &self.solver,
                &mut up_rng,
            )?;

            let image = codec.decode(&run.final_state)?;
            let trajectory = run
                .snapshots
                .iter()
                .map(|(t, lat)| Ok((*t, codec.decode(lat)?)))
                .collect::<Result<Vec<_>, CodecError>>()?;
            out.push(PipelineSample {
                low_latent,
                up_latent,
                final_latent: run.final_state,
                image,
                nfe_prior,
                nfe_upsampler: run.nfe,
                trajectory,
            });
        }
        Ok(out)
    }
}

/// Evaluation output sets: per-pair model outputs decoded to images.
pub struct EvalOutputs {
    pub outputs: Vec<Tensor>,
    pub truths: Vec<Tensor>,
    pub nfe_per_sample: usize,
}

const EVAL_SALT: u64 = 0xE7A1_0001;

/// Runs a trained model over held-out pairs and decodes the outputs.
#[allow(clippy::too_many_arguments)]
pub fn eval_outputs(
    net: &VectorFieldNet,
    kind: ModelKind,
    meta: &TrainMeta,
    pairs: &[PairedSample],
    codec: &PatchCodec,
    solver: &SolverConfig,
    ddim_steps: usize,
    seed: u64,
) -> Result<EvalOutputs, PipelineError> {
    let data = LatentPairSet::from_pairs(pairs, codec, meta.upsample)?;
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut truths = Vec::with_capacity(pairs.len());
    let mut nfe = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = RngStream::new(seed, EVAL_SALT ^ (i as u64).wrapping_mul(2));
        let (latent, n) = sample_model(
            net,
            meta,
            kind,
            &data.x0_up[i],
            solver,
            ddim_steps,
            &mut rng,
        )?;
        nfe = n;
        outputs.push(codec.decode(&latent)?);
        truths.push(pair.high.clone());
    }
    Ok(EvalOutputs {
        outputs,
        truths,
        nfe_per_sample: nfe,
    })
}

/// Metric names the evaluation harness reports.
pub const EVAL_METRICS: [&str; 4] = ["psnr", "ssim", "ffd", "p_ffd"];

/// PSNR/SSIM/FFD/p-FFD of model outputs against ground truth.
pub fn evaluate(
    outputs: &[Tensor],
    truths: &[Tensor],
    label_a: &str,
    label_b: &str,
    seed: u64,
    patch: usize,
    patches_per_image: usize,
) -> Result<MetricReport, PipelineError> {
    if outputs.is_empty() || outputs.len() != truths.len() {
        return Err(PipelineError::Metric(MetricError::EmptySet));
    }
    let n = outputs.len();
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for (o, t) in outputs.iter().zip(truths) {
        psnr_acc += psnr(o, t, 1.0)?;
        ssim_acc += ssim(o, t)?;
    }
    let extractor = FeatureExtractor::with_default_seed(outputs[0].shape()[0]);
    let ffd_v = ffd_with(&extractor, outputs, truths)?;
    let p_ffd_v = patch_ffd(outputs, truths, patch, patches_per_image, seed)?;

    let mut report = MetricReport::default();
    report.push("psnr", psnr_acc / n as f64, label_a, label_b, n, seed);
    report.push("ssim", ssim_acc / n as f64, label_a, label_b, n, seed);
    report.push("ffd", ffd_v, label_a, label_b, n, seed);
    report.push("p_ffd", p_ffd_v, label_a, label_b, n, seed);
    Ok(report)
}
