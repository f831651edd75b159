//! The six pipeline commands: gen-data, train, sample, trajectory, eval,
//! ablate. Validation failures exit 2, runtime/numeric failures exit 3.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowsr_core::autodiff::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, ArchConfig, Checkpoint, ModelKind,
    VectorFieldNet,
};
use flowsr_core::codec::{LatentUpsample, PatchCodec};
use flowsr_core::datasets::{
    gen_2d_toy, gen_bimodal, gen_texture, read_manifest, write_manifest, ManifestEntry, Mode,
    PairedSample,
};
use flowsr_core::metrics::{MetricReport, SMALL_SAMPLE_N};
use flowsr_core::paths::NoiseAugConfig;
use flowsr_core::pipeline::{eval_outputs, evaluate, PipelineSpec};
use flowsr_core::solvers::{nfe_of, SolverConfig, SolverError, SolverMethod};
use flowsr_core::tensor::{load_tensor, save_tensor};
use flowsr_core::training::{
    loss_csv, meta_of, train_steps, TrainConfig, LatentPairSet,
};

use crate::config::{
    arch_overrides, codec_spec, dataset_spec, model_kind, path_spec, solver_spec, train_spec,
    ConfigError, DatasetKind, DatasetSpec, FileConfig,
};
use crate::png_out::{write_grid, write_png, write_strip};

/// Errors classified by exit code: validation -> 2, runtime -> 3.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    flowsr_core::tensor::TensorError,
    flowsr_core::tensor::TensorIoError,
    flowsr_core::autodiff::NetError,
    flowsr_core::autodiff::CheckpointError,
    flowsr_core::autodiff::AdamError,
    flowsr_core::codec::CodecError,
    flowsr_core::paths::PathError,
    flowsr_core::metrics::MetricError,
    flowsr_core::baselines::BaselineError,
    crate::png_out::PngError,
    std::io::Error
);

impl From<flowsr_core::datasets::DatasetError> for CliError {
    fn from(e: flowsr_core::datasets::DatasetError) -> Self {
        use flowsr_core::datasets::DatasetError as D;
        match e {
            D::EmptyDataset | D::SizeNotDivisible { .. } | D::StripePeriod { .. } => {
                CliError::Validation(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::BadConfig(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<flowsr_core::training::TrainError> for CliError {
    fn from(e: flowsr_core::training::TrainError) -> Self {
        use flowsr_core::training::TrainError as T;
        match e {
            T::EmptyDataset => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<flowsr_core::pipeline::PipelineError> for CliError {
    fn from(e: flowsr_core::pipeline::PipelineError) -> Self {
        use flowsr_core::pipeline::PipelineError as P;
        match e {
            P::StageMismatch(_) | P::WrongKind(_) => CliError::Validation(e.to_string()),
            P::Solver(SolverError::BadConfig(m)) => {
                CliError::Validation(format!("invalid solver config: {m}"))
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Holds the output directory lock for the lifetime of a command.
struct DirLock {
    lock_path: PathBuf,
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock_path);
    }
}

fn prepare_out(path: &Path, force: bool, must_be_empty: bool) -> Result<DirLock, CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", path.display())))?;
    if must_be_empty && !force {
        let n = fs::read_dir(path)
            .map_err(|e| CliError::Validation(e.to_string()))?
            .count();
        if n > 0 {
            return Err(CliError::Validation(format!(
                "output dir {} is not empty (pass --force to overwrite)",
                path.display()
            )));
        }
    }
    let lock_path = path.join(".flowsr.lock");
    match fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock_path)
    {
        Ok(_) => Ok(DirLock { lock_path }),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Validation(
            format!("{} is locked by another run", path.display()),
        )),
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

pub struct GlobalArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

fn load_config(args: &GlobalArgs) -> Result<FileConfig, CliError> {
    Ok(match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::empty(),
    })
}

fn out_dir(args: &GlobalArgs, cfg: &FileConfig, default: &str) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(cfg.str_or("out.dir", default)))
}

/// Generates the configured dataset's samples in memory.
fn generate_pairs(spec: &DatasetSpec) -> Result<(Vec<PairedSample>, Vec<Option<Mode>>), CliError> {
    match spec.kind {
        DatasetKind::Texture => {
            let pairs = gen_texture(spec.seed, spec.n, spec.size, spec.factor)?;
            let modes = vec![None; pairs.len()];
            Ok((pairs, modes))
        }
        DatasetKind::Bimodal => {
            let samples = gen_bimodal(spec.seed, spec.n, spec.size, spec.factor)?;
            let modes = samples.iter().map(|s| Some(s.mode)).collect();
            Ok((samples.into_iter().map(|s| s.sample).collect(), modes))
        }
        DatasetKind::Toy2d => {
            let pairs = gen_2d_toy(spec.seed, spec.n)?;
            let paired = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| PairedSample {
                    high: p.x1_tensor(),
                    low: p.x0_tensor(),
                    factor: 1,
                    seed: spec.seed,
                    index: i as u64,
                })
                .collect();
            Ok((paired, vec![None; spec.n]))
        }
    }
}

pub fn cmd_gen_data(args: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let mut spec = dataset_spec(&cfg)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = out_dir(args, &cfg, "data");
    if spec.n == 0 {
        return Err(CliError::Validation("dataset.n must be >= 1".into()));
    }
    let _lock = prepare_out(&out, args.force, true)?;

    let (pairs, modes) = generate_pairs(&spec)?;
    let tensor_dir = out.join("tensors");
    fs::create_dir_all(&tensor_dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (pair, mode) in pairs.iter().zip(&modes) {
        let high_rel = format!("tensors/high_{:05}.fmt", pair.index);
        let low_rel = format!("tensors/low_{:05}.fmt", pair.index);
        save_tensor(&pair.high, out.join(&high_rel))?;
        save_tensor(&pair.low, out.join(&low_rel))?;
        entries.push(ManifestEntry {
            index: pair.index,
            seed: pair.seed,
            factor: pair.factor,
            high: high_rel,
            low: low_rel,
            mode: *mode,
        });
    }
    write_manifest(&entries, out.join("manifest.jsonl"))?;
    let meta = format!(
        "kind = {}\nseed = {}\nn = {}\nsize = {}\nfactor = {}\n",
        spec.kind.name(),
        spec.seed,
        spec.n,
        spec.size,
        spec.factor
    );
    fs::write(out.join("dataset.cfg"), meta)?;
    println!(
        "wrote {} samples ({}) to {}",
        pairs.len(),
        spec.kind.name(),
        out.display()
    );
    Ok(())
}

fn load_pairs_from_dir(dir: &Path) -> Result<(Vec<PairedSample>, Vec<Option<Mode>>), CliError> {
    let manifest = read_manifest(dir.join("manifest.jsonl"))
        .map_err(|e| CliError::Validation(format!("cannot read dataset manifest: {e}")))?;
    let mut pairs = Vec::with_capacity(manifest.len());
    let mut modes = Vec::with_capacity(manifest.len());
    for e in &manifest {
        pairs.push(PairedSample {
            high: load_tensor(dir.join(&e.high))?,
            low: load_tensor(dir.join(&e.low))?,
            factor: e.factor,
            seed: e.seed,
            index: e.index,
        });
        modes.push(e.mode);
    }
    Ok((pairs, modes))
}

/// Architecture from overrides, trimmed so every level still has spatial
/// extent after pooling.
fn build_arch(
    cfg: &FileConfig,
    latent_channels: usize,
    spatial: usize,
    conditional: bool,
) -> Result<ArchConfig, CliError> {
    let o = arch_overrides(cfg)?;
    let mut mults = o.channel_mults;
    while mults.len() > 1
        && (!spatial.is_multiple_of(1 << (mults.len() - 1)) || spatial / (1 << (mults.len() - 1)) < 2)
    {
        mults.pop();
    }
    Ok(ArchConfig {
        in_channels_x: latent_channels,
        in_channels_z: if conditional { latent_channels } else { 0 },
        base_channels: o.base_channels,
        channel_mults: mults,
        blocks_per_level: o.blocks_per_level,
        attn_at_bottom: o.attn_bottom,
        time_embed_dim: o.time_embed_dim,
        norm_groups: o.norm_groups,
    })
}

struct TrainSetup {
    data: LatentPairSet,
    arch: ArchConfig,
    latent_spatial: usize,
    factor: u32,
    codec_seed: u64,
}

fn prepare_training(
    cfg: &FileConfig,
    kind: ModelKind,
    dspec: &DatasetSpec,
    data_dir: Option<&Path>,
) -> Result<TrainSetup, CliError> {
    let conditional = kind != ModelKind::DdpmPrior;
    if dspec.kind == DatasetKind::Toy2d {
        let pairs = gen_2d_toy(dspec.seed, dspec.n)?;
        let data = LatentPairSet::from_toy(&pairs)?;
        let arch = build_arch(cfg, 2, 1, conditional)?;
        let _ = codec_spec(cfg)?; // consume keys; the toy needs no codec
        let _ = path_spec(cfg)?;
        return Ok(TrainSetup {
            data,
            arch,
            latent_spatial: 1,
            factor: 1,
            codec_seed: 0,
        });
    }

    let cspec = codec_spec(cfg)?;
    let pspec = path_spec(cfg)?;
    let codec = PatchCodec::new(cspec.patch, 1, cspec.seed);
    let (pairs, _modes) = match data_dir {
        Some(dir) => load_pairs_from_dir(dir)?,
        None => generate_pairs(dspec)?,
    };
    if pairs.is_empty() {
        return Err(CliError::Validation("training dataset is empty".into()));
    }
    let factor = pairs[0].factor;
    let data = LatentPairSet::from_pairs(&pairs, &codec, pspec.upsample)?;
    let latent_channels = cspec.patch * cspec.patch;
    let latent_spatial = if kind == ModelKind::DdpmPrior {
        data.low[0].shape()[1]
    } else {
        data.x1[0].shape()[1]
    };
    let arch = build_arch(cfg, latent_channels, latent_spatial, conditional)?;
    Ok(TrainSetup {
        data,
        arch,
        latent_spatial,
        factor: factor as u32,
        codec_seed: cspec.seed,
    })
}

pub fn cmd_train(args: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dspec = dataset_spec(&cfg)?;
    let kind = model_kind(&cfg)?;
    let tspec = train_spec(&cfg, dspec.seed)?;
    let pspec = path_spec(&cfg)?;
    let out = out_dir(args, &cfg, "runs/train");
    let setup = prepare_training(&cfg, kind, &dspec, tspec.data_dir.as_deref())?;
    let _lock = prepare_out(&out, args.force, false)?;

    let seed = args.seed.unwrap_or(tspec.seed);
    let train_cfg = TrainConfig {
        steps: tspec.steps,
        batch: tspec.batch,
        lr: tspec.lr,
        seed,
        sigma_min: pspec.sigma_min,
        noise_aug: NoiseAugConfig {
            t_aug: pspec.t_aug,
            total_steps: pspec.schedule_steps,
            offset: 0.008,
        },
        randomize_t_aug: pspec.t_aug_randomize,
        diffusion_steps: pspec.schedule_steps,
        log_every: tspec.log_every,
    };
    let meta = meta_of(&train_cfg, pspec.upsample, setup.factor, setup.codec_seed);

    let (mut net, mut adam, start_step) = match &tspec.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.kind != kind {
                return Err(CliError::Validation(format!(
                    "resume checkpoint is {}, config wants {}",
                    ckpt.kind.name(),
                    kind.name()
                )));
            }
            let net = ckpt.build_net()?;
            let adam = ckpt.adam.clone().ok_or_else(|| {
                CliError::Validation("resume checkpoint has no optimizer state".into())
            })?;
            (net, adam, ckpt.step as u32)
        }
        None => {
            let net = VectorFieldNet::new(setup.arch.clone(), seed);
            let adam = AdamState::new(
                AdamConfig {
                    lr: train_cfg.lr,
                    ..AdamConfig::default()
                },
                net.params(),
            );
            (net, adam, 0)
        }
    };

    println!(
        "training {} for {} steps (batch {}, {} params, latent {}x{})",
        kind.name(),
        train_cfg.steps,
        train_cfg.batch,
        net.params().total_elements(),
        setup.latent_spatial,
        setup.latent_spatial,
    );

    let ckpt_every = tspec.checkpoint_every;
    let out_cb = out.clone();
    let meta_cb = meta.clone();
    let mut save_interval = move |step: u32, net: &VectorFieldNet, adam: &AdamState| {
        if ckpt_every > 0 && step.is_multiple_of(ckpt_every) {
            let ckpt = Checkpoint {
                kind,
                arch: net.config().clone(),
                meta: meta_cb.clone(),
                step: step as u64,
                params: net.params().clone(),
                adam: Some(adam.clone()),
            };
            let path = out_cb.join(format!("checkpoint_step{step:06}.fmbc"));
            if let Err(e) = save_checkpoint(&ckpt, &path) {
                eprintln!("warning: failed to save interval checkpoint: {e}");
            }
        }
    };

    let rows = train_steps(
        kind,
        &mut net,
        &mut adam,
        &setup.data,
        &train_cfg,
        start_step,
        Some(&mut save_interval),
    )?;

    fs::write(out.join("loss.csv"), loss_csv(&rows))?;
    let ckpt = Checkpoint {
        kind,
        arch: net.config().clone(),
        meta,
        step: train_cfg.steps as u64,
        params: net.params().clone(),
        adam: Some(adam),
    };
    save_checkpoint(&ckpt, out.join("checkpoint.fmbc"))?;
    let final_loss = rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "done: final loss {final_loss:.6}, checkpoint at {}",
        out.join("checkpoint.fmbc").display()
    );
    Ok(())
}

fn sample_pipeline_spec(
    args: &GlobalArgs,
    cfg: &FileConfig,
    record_times: Vec<f64>,
) -> Result<(PipelineSpec, PatchCodec, PathBuf), CliError> {
    let prior_path = cfg.str_req("sample.prior")?;
    let up_path = cfg.str_req("sample.upsampler")?;
    let count = cfg.usize_or("sample.count", 8)?;
    let ddim_steps = cfg.usize_or("sample.ddim_steps", 10)?;
    let seed = args.seed.unwrap_or(cfg.u64_or("sample.seed", 0)?);
    let mut solver = solver_spec(cfg)?;
    solver.record_times = record_times;
    let cspec = codec_spec(cfg)?;

    let prior = load_checkpoint(&prior_path)?;
    let upsampler = load_checkpoint(&up_path)?;
    let dspec = dataset_spec(cfg)?;
    let default_prior_size = dspec.size / dspec.factor / cspec.patch;
    let prior_latent_size = cfg.usize_or("sample.prior_size", default_prior_size.max(1))?;

    let codec = PatchCodec::new(cspec.patch, 1, upsampler.meta.codec_seed);
    let out = out_dir(args, cfg, "runs/sample");
    let spec = PipelineSpec {
        prior,
        upsampler,
        prior_latent_size,
        ddim_steps_prior: ddim_steps,
        solver,
        sample_count: count,
        seed,
    };
    Ok((spec, codec, out))
}

pub fn cmd_sample(args: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let (spec, codec, out) = sample_pipeline_spec(args, &cfg, Vec::new())?;
    spec.validate()?;
    let _lock = prepare_out(&out, args.force, false)?;

    let started = Instant::now();
    let samples = spec.run(&codec)?;
    let wall = started.elapsed().as_secs_f64();

    let mut log = String::from("sample,nfe_prior,nfe_upsampler,wall_s\n");
    let mut images = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        write_png(&s.image, &out.join(format!("sample_{i:03}.png")))?;
        save_tensor(&s.final_latent, out.join(format!("latent_{i:03}.fmt")))?;
        save_tensor(&s.low_latent, out.join(format!("latent_low_{i:03}.fmt")))?;
        writeln!(
            log,
            "{i},{},{},{wall:.3}",
            s.nfe_prior, s.nfe_upsampler
        )
        .expect("string write");
        images.push(s.image.clone());
    }
    write_grid(&images, &out.join("grid.png"))?;
    fs::write(out.join("log.csv"), log)?;
    let total_nfe: usize = samples.iter().map(|s| s.nfe_prior + s.nfe_upsampler).sum();
    println!(
        "sampled {} images in {wall:.2}s (total NFE {total_nfe}) -> {}",
        samples.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_trajectory(args: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let times = cfg.f64_list_or("sample.times", &[0.0, 0.25, 0.5, 0.75, 1.0])?;
    for &t in &times {
        if !(0.0..=1.0).contains(&t) {
            return Err(CliError::Validation(format!(
                "sample.times entry {t} outside [0, 1]"
            )));
        }
    }
    let (spec, codec, out) = sample_pipeline_spec(args, &cfg, times.clone())?;
    spec.validate()?;
    let _lock = prepare_out(&out, args.force, false)?;

    let samples = spec.run(&codec)?;
    for (i, s) in samples.iter().enumerate() {
        // Keep only requested times, in order.
        let mut panels = Vec::new();
        for &t in &times {
            let snap = s
                .trajectory
                .iter()
                .find(|(st, _)| (st - t).abs() < 1e-9)
                .ok_or_else(|| {
                    CliError::Runtime(format!("missing trajectory snapshot at t = {t}"))
                })?;
            panels.push(snap.1.clone());
        }
        write_strip(&panels, &out.join(format!("trajectory_{i:03}.png")))?;
    }
    println!(
        "wrote {} trajectory strips ({} panels each) -> {}",
        samples.len(),
        times.len(),
        out.display()
    );
    Ok(())
}

struct EvalSetup {
    net: VectorFieldNet,
    kind: ModelKind,
    meta: flowsr_core::autodiff::TrainMeta,
    pairs: Vec<PairedSample>,
    codec: PatchCodec,
}

fn prepare_eval(args: &GlobalArgs, cfg: &FileConfig) -> Result<(EvalSetup, usize, u64), CliError> {
    let ckpt_path = cfg.str_req("eval.checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    if ckpt.kind == ModelKind::DdpmPrior {
        return Err(CliError::Validation(
            "eval expects an upsampler checkpoint, not the low-res prior".into(),
        ));
    }
    let net = ckpt.build_net()?;

    let dspec = dataset_spec(cfg)?;
    let n = cfg.usize_or("eval.n", 96)?;
    let seed = args.seed.unwrap_or(cfg.u64_or("eval.seed", dspec.seed + 1000)?);
    let cspec = codec_spec(cfg)?;
    let codec = PatchCodec::new(cspec.patch, 1, ckpt.meta.codec_seed);

    let pairs = match cfg.opt_str("eval.data") {
        Some(dir) => load_pairs_from_dir(Path::new(&dir))?.0,
        None => {
            let held_out = DatasetSpec {
                seed,
                n,
                ..dspec
            };
            generate_pairs(&held_out)?.0
        }
    };
    if pairs.len() < SMALL_SAMPLE_N {
        eprintln!(
            "warning: {} samples < {SMALL_SAMPLE_N}; FFD uses small-sample shrinkage",
            pairs.len()
        );
    }
    Ok((
        EvalSetup {
            net,
            kind: ckpt.kind,
            meta: ckpt.meta,
            pairs,
            codec,
        },
        n,
        seed,
    ))
}

fn eval_report(
    setup: &EvalSetup,
    solver: &SolverConfig,
    ddim_steps: usize,
    patch: usize,
    patches_per_image: usize,
    seed: u64,
    label: &str,
) -> Result<(MetricReport, usize), CliError> {
    let outs = eval_outputs(
        &setup.net,
        setup.kind,
        &setup.meta,
        &setup.pairs,
        &setup.codec,
        solver,
        ddim_steps,
        seed,
    )?;
    let report = evaluate(
        &outs.outputs,
        &outs.truths,
        label,
        "ground_truth",
        seed,
        patch,
        patches_per_image,
    )?;
    Ok((report, outs.nfe_per_sample))
}

pub fn cmd_eval(args: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let (setup, _n, seed) = prepare_eval(args, &cfg)?;
    let solver = solver_spec(&cfg)?;
    let ddim_steps = cfg.usize_or("eval.ddim_steps", 50)?;
    let patch = cfg.usize_or("eval.patch", 32)?;
    let ppi = cfg.usize_or("eval.patches_per_image", 8)?;
    let out = out_dir(args, &cfg, "runs/eval");
    let _lock = prepare_out(&out, args.force, false)?;

    let started = Instant::now();
    let (report, nfe) = eval_report(
        &setup,
        &solver,
        ddim_steps,
        patch,
        ppi,
        seed,
        setup.kind.name(),
    )?;
    report
        .write_csv(out.join("metrics.csv"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "evaluated {} on {} samples in {:.2}s (NFE/sample {nfe})",
        setup.kind.name(),
        setup.pairs.len(),
        started.elapsed().as_secs_f64()
    );
    for row in &report.rows {
        println!("  {:>6} = {:.6}", row.metric, row.value);
    }
    println!("metrics -> {}", out.join("metrics.csv").display());
    Ok(())
}

pub fn cmd_ablate(args: &GlobalArgs) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let axis = cfg.str_or("ablate.axis", "t_aug");
    let out = out_dir(args, &cfg, "runs/ablate");

    let dspec = dataset_spec(&cfg)?;
    let kind = model_kind(&cfg)?;
    let tspec = train_spec(&cfg, dspec.seed)?;
    let patch = cfg.usize_or("eval.patch", 32)?;
    let ppi = cfg.usize_or("eval.patches_per_image", 8)?;
    let eval_n = cfg.usize_or("eval.n", 96)?;
    let eval_seed = args.seed.unwrap_or(cfg.u64_or("eval.seed", dspec.seed + 1000)?);
    let sigma_min = cfg.f64_or("path.sigma_min", 1e-4)?;
    let t_aug_default = cfg.u32_or("path.t_aug", 400)?;
    let sched = cfg.u32_or("path.schedule_steps", 1000)?;
    let upsample_default = LatentUpsample::parse(&cfg.str_or("path.upsample", "psu"))
        .ok_or_else(|| CliError::Validation("path.upsample: expected psu|bilinear|nearest".into()))?;
    let solver = solver_spec(&cfg)?;
    let ddim_steps = cfg.usize_or("eval.ddim_steps", 4)?;

    enum Axis {
        TAug(Vec<u32>),
        Nfe(Vec<usize>, PathBuf),
        Upsample(Vec<LatentUpsample>),
    }

    let axis = match axis.as_str() {
        "t_aug" => {
            let vals = cfg.f64_list_or("ablate.values", &[0.0, 200.0, 400.0, 700.0, 1000.0])?;
            Axis::TAug(vals.iter().map(|&v| v as u32).collect())
        }
        "nfe" => {
            let ckpt = cfg
                .opt_str("ablate.checkpoint")
                .ok_or_else(|| CliError::Validation("nfe axis needs ablate.checkpoint".into()))?;
            let vals = cfg.f64_list_or("ablate.values", &[1.0, 2.0, 4.0, 10.0, 50.0])?;
            Axis::Nfe(vals.iter().map(|&v| v as usize).collect(), PathBuf::from(ckpt))
        }
        "upsample_method" => {
            let raw = cfg.str_or("ablate.values", "nearest,bilinear,psu");
            let vals = raw
                .split(',')
                .map(|s| {
                    LatentUpsample::parse(s.trim()).ok_or_else(|| {
                        CliError::Validation(format!("ablate.values: bad method {s:?}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Axis::Upsample(vals)
        }
        other => {
            return Err(CliError::Validation(format!(
                "ablate.axis: expected t_aug|nfe|upsample_method, got {other:?}"
            )))
        }
    };

    match &axis {
        Axis::TAug(v) if v.is_empty() => {
            return Err(CliError::Validation("ablate.values is empty".into()))
        }
        Axis::Nfe(v, _) if v.is_empty() => {
            return Err(CliError::Validation("ablate.values is empty".into()))
        }
        Axis::Upsample(v) if v.is_empty() => {
            return Err(CliError::Validation("ablate.values is empty".into()))
        }
        _ => {}
    }

    let cspec = codec_spec(&cfg)?;
    let _lock = prepare_out(&out, args.force, false)?;

    let held_out = DatasetSpec {
        seed: eval_seed,
        n: eval_n,
        ..dspec.clone()
    };
    let eval_pairs = generate_pairs(&held_out)?.0;

    let train_once = |t_aug: u32, upsample: LatentUpsample| -> Result<(VectorFieldNet, flowsr_core::autodiff::TrainMeta, PatchCodec), CliError> {
        let train_cfg = TrainConfig {
            steps: tspec.steps,
            batch: tspec.batch,
            lr: tspec.lr,
            seed: tspec.seed,
            sigma_min,
            noise_aug: NoiseAugConfig {
                t_aug,
                total_steps: sched,
                offset: 0.008,
            },
            randomize_t_aug: false,
            diffusion_steps: sched,
            log_every: tspec.log_every,
        };
        let codec = PatchCodec::new(cspec.patch, 1, cspec.seed);
        let pairs = generate_pairs(&dspec)?.0;
        let data = LatentPairSet::from_pairs(&pairs, &codec, upsample)?;
        let arch = build_arch(&cfg, cspec.patch * cspec.patch, data.x1[0].shape()[1], true)?;
        let mut net = VectorFieldNet::new(arch, train_cfg.seed);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: train_cfg.lr,
                ..AdamConfig::default()
            },
            net.params(),
        );
        train_steps(kind, &mut net, &mut adam, &data, &train_cfg, 0, None)?;
        let meta = meta_of(&train_cfg, upsample, dspec.factor as u32, cspec.seed);
        Ok((net, meta, codec))
    };

    let mut csv = String::from("axis,value,psnr,ssim,ffd,p_ffd,nfe\n");
    let mut run_point = |axis_name: &str,
                         value: String,
                         setup: &EvalSetup,
                         solver: &SolverConfig,
                         ddim: usize|
     -> Result<(), CliError> {
        let (report, nfe) = eval_report(setup, solver, ddim, patch, ppi, eval_seed, axis_name)?;
        writeln!(
            csv,
            "{axis_name},{value},{},{},{},{},{nfe}",
            report.get("psnr").unwrap_or(f64::NAN),
            report.get("ssim").unwrap_or(f64::NAN),
            report.get("ffd").unwrap_or(f64::NAN),
            report.get("p_ffd").unwrap_or(f64::NAN),
        )
        .expect("string write");
        println!(
            "  {axis_name} = {value}: ffd {:.4}",
            report.get("ffd").unwrap_or(f64::NAN)
        );
        Ok(())
    };

    match axis {
        Axis::TAug(values) => {
            for &t_aug in &values {
                let (net, meta, codec) = train_once(t_aug, upsample_default)?;
                let setup = EvalSetup {
                    net,
                    kind,
                    meta,
                    pairs: eval_pairs.clone(),
                    codec,
                };
                run_point("t_aug", t_aug.to_string(), &setup, &solver, ddim_steps)?;
            }
        }
        Axis::Nfe(values, ckpt_path) => {
            let ckpt = load_checkpoint(&ckpt_path)?;
            let net = ckpt.build_net()?;
            let codec = PatchCodec::new(cspec.patch, 1, ckpt.meta.codec_seed);
            let setup = EvalSetup {
                net,
                kind: ckpt.kind,
                meta: ckpt.meta,
                pairs: eval_pairs.clone(),
                codec,
            };
            for &steps in &values {
                let point_solver = SolverConfig::fixed(SolverMethod::Euler, steps);
                let nfe = nfe_of(&point_solver).expect("fixed-step");
                debug_assert_eq!(nfe, steps);
                run_point("nfe", steps.to_string(), &setup, &point_solver, steps)?;
            }
        }
        Axis::Upsample(values) => {
            for &method in &values {
                let (net, meta, codec) = train_once(t_aug_default, method)?;
                let setup = EvalSetup {
                    net,
                    kind,
                    meta,
                    pairs: eval_pairs.clone(),
                    codec,
                };
                run_point("upsample_method", method.name().to_string(), &setup, &solver, ddim_steps)?;
            }
        }
    }

    fs::write(out.join("ablation.csv"), &csv)?;
    println!("ablation -> {}", out.join("ablation.csv").display());
    Ok(())
}
