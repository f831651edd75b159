//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test -p flowsr-core --test acceptance -- --nocapture`
//! to see the per-criterion lines as they complete.

use flowsr_core::autodiff::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, ArchConfig, Buffer, Checkpoint,
    ModelKind, Tape, TrainMeta, Var, VectorFieldNet,
};
use flowsr_core::codec::{psu, upsample, LatentUpsample, PatchCodec, UpsampleMethod};
use flowsr_core::datasets::{gen_2d_toy, gen_bimodal, gen_texture, BimodalSample, BIMODAL_AMP};
use flowsr_core::linalg::MatF64;
use flowsr_core::metrics::{
    ffd, frechet_distance, psnr_from_mse, ssim, FeatureExtractor, GaussianStats, MetricReport,
};
use flowsr_core::paths::{coupled_sample, naive_point, naive_target, NoiseAugConfig};
use flowsr_core::pipeline::{eval_outputs, sample_model, PipelineSpec};
use flowsr_core::solvers::{integrate_f64, SolverConfig, SolverMethod};
use flowsr_core::tensor::{load_tensor, save_tensor, RngStream, Tensor};
use flowsr_core::training::{train_model, LatentPairSet, TrainConfig};

fn pass(n: u32, name: &str) {
    println!("[acceptance] criterion {n:02} ({name}): PASS");
}

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, 0);
    Tensor::gaussian(shape, &mut rng).unwrap()
}

// --- 1. Path algebra exactness -------------------------------------------

#[test]
fn c01_path_algebra_exactness() {
    let x0 = rand_tensor(vec![4, 8, 8], 101);
    let x1 = rand_tensor(vec![4, 8, 8], 102);
    let mut rng = RngStream::new(0, 0);

    let s0 = coupled_sample(&x0, &x1, 0.0, 0.0, &mut rng).unwrap();
    let s1 = coupled_sample(&x0, &x1, 1.0, 0.0, &mut rng).unwrap();
    for i in 0..x0.len() {
        assert_eq!(s0.x_t.data()[i].to_bits(), x0.data()[i].to_bits());
        assert_eq!(s1.x_t.data()[i].to_bits(), x1.data()[i].to_bits());
    }

    let want = x1.sub(&x0).unwrap();
    let mut trng = RngStream::new(7, 1);
    for _ in 0..10 {
        let t = trng.next_f64();
        let s = coupled_sample(&x0, &x1, t, 0.0, &mut rng).unwrap();
        for i in 0..want.len() {
            assert_eq!(s.u_target.data()[i].to_bits(), want.data()[i].to_bits());
        }
    }
    pass(1, "path algebra exactness");
}

// --- 2. Naive path consistency -------------------------------------------

#[test]
fn c02_naive_path_consistency() {
    // f64 transcriptions of the interpolant and its target field.
    let phi = |x0: f64, x1: f64, t: f64, s: f64| (1.0 - (1.0 - s) * t) * x0 + t * x1;
    let u_of = |x: f64, x1: f64, t: f64, s: f64| (x1 - (1.0 - s) * x) / (1.0 - (1.0 - s) * t);

    let mut rng = RngStream::new(202, 0);
    let h = 1e-6;
    for k in 0..20 {
        let sigma_min = if k % 2 == 0 { 0.0 } else { 0.1 };
        let t = 0.05 + 0.85 * rng.next_f64();
        let x0 = rng.normal_f64();
        let x1 = rng.normal_f64();

        let numeric = (phi(x0, x1, t + h, sigma_min) - phi(x0, x1, t - h, sigma_min)) / (2.0 * h);
        let analytic = u_of(phi(x0, x1, t, sigma_min), x1, t, sigma_min);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        assert!(rel < 1e-5, "point {k}: rel err {rel}");

        // The public f32 operations match the verified f64 algebra.
        let x0t = Tensor::from_slice(&[x0 as f32]);
        let x1t = Tensor::from_slice(&[x1 as f32]);
        let pt = naive_point(&x0t, &x1t, t, sigma_min).unwrap();
        let ut = naive_target(&pt, &x1t, t, sigma_min).unwrap();
        assert!((pt.data()[0] as f64 - phi(x0 as f32 as f64, x1 as f32 as f64, t, sigma_min)).abs() < 1e-5);
        assert!((ut.data()[0] as f64 - analytic).abs() < 2e-4 * analytic.abs().max(1.0));
    }
    pass(2, "naive path consistency");
}

// --- 3. Gradient correctness ----------------------------------------------

/// Independent finite-difference harness over the public tape API.
fn fd_check(shapes: &[Vec<usize>], seed: u64, build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = RngStream::new(seed, 0);
    let mut values: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            (0..s.iter().product::<usize>())
                .map(|_| rng.normal_f64())
                .collect()
        })
        .collect();

    let eval = |values: &[Vec<f64>], cot: &[f64]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(values)
            .map(|(s, v)| {
                tape.leaf(
                    Buffer {
                        shape: s.clone(),
                        data: v.clone(),
                    },
                    true,
                )
            })
            .collect();
        let out = build(&mut tape, &vars);
        tape.value(out)
            .data
            .iter()
            .zip(cot)
            .map(|(a, c)| a * c)
            .sum()
    };

    let mut tape: Tape<f64> = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(&values)
        .map(|(s, v)| {
            tape.leaf(
                Buffer {
                    shape: s.clone(),
                    data: v.clone(),
                },
                true,
            )
        })
        .collect();
    let out = build(&mut tape, &vars);
    let cot: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.normal_f64())
        .collect();
    let grads = tape.backward(
        out,
        Buffer {
            shape: tape.value(out).shape.clone(),
            data: cot.clone(),
        },
    );

    let h = 1e-4;
    for (li, var) in vars.iter().enumerate() {
        let g = grads[var.index()].as_ref().unwrap();
        let n = values[li].len();
        let mut checked = 0;
        let mut ci = 0usize;
        while checked < 20.min(n) {
            let idx = if n <= 20 {
                ci
            } else {
                rng.next_below(n as u64) as usize
            };
            ci += 1;
            let orig = values[li][idx];
            values[li][idx] = orig + h;
            let lp = eval(&values, &cot);
            values[li][idx] = orig - h;
            let lm = eval(&values, &cot);
            values[li][idx] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = g.data[idx];
            let rel =
                (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-3,
                "leaf {li} coord {idx}: {analytic} vs {numeric} (rel {rel})"
            );
            checked += 1;
        }
    }
}

type BuildOp = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

#[test]
fn c03_gradient_correctness() {
    let checks: Vec<(&str, Vec<Vec<usize>>, BuildOp)> = vec![
        ("add", vec![vec![3, 5, 5], vec![3, 5, 5]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("dense", vec![vec![7, 6], vec![4, 6], vec![4]], Box::new(|t, v| t.dense(v[0], v[1], v[2]))),
        (
            "conv2d_3x3",
            vec![vec![3, 6, 6], vec![4, 3, 3, 3], vec![4]],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1)),
        ),
        (
            "conv2d_stride2",
            vec![vec![3, 6, 6], vec![4, 3, 3, 3], vec![4]],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2)),
        ),
        (
            "group_norm",
            vec![vec![6, 4, 4], vec![6], vec![6]],
            Box::new(|t, v| t.group_norm(v[0], v[1], v[2], 3, 1e-5)),
        ),
        ("silu", vec![vec![4, 6, 6]], Box::new(|t, v| t.silu(v[0]))),
        (
            "nearest_upsample_2x",
            vec![vec![3, 4, 4]],
            Box::new(|t, v| t.upsample_nearest_2x(v[0])),
        ),
        (
            "concat",
            vec![vec![2, 4, 4], vec![3, 4, 4]],
            Box::new(|t, v| t.concat_chan(v[0], v[1])),
        ),
        (
            "attention_core",
            vec![vec![4, 3, 3], vec![4, 4], vec![4], vec![4, 4], vec![4], vec![4, 4], vec![4]],
            Box::new(|t, v| {
                let tok = t.chw_to_tokens(v[0]);
                let q = t.dense(tok, v[1], v[2]);
                let k = t.dense(tok, v[3], v[4]);
                let vv = t.dense(tok, v[5], v[6]);
                let s = t.matmul_nt(q, k);
                let s = t.scale(s, 0.5);
                let p = t.softmax_rows(s);
                let o = t.matmul(p, vv);
                t.tokens_to_chw(o, 3, 3)
            }),
        ),
    ];
    for (i, (name, shapes, build)) in checks.iter().enumerate() {
        fd_check(shapes, 300 + i as u64, build.as_ref());
        println!("  gradient ok: {name}");
    }
    pass(3, "gradient correctness");
}

// --- 4. Solver orders ------------------------------------------------------

#[test]
fn c04_solver_orders() {
    let decay = |_t: f64, x: &[f64]| Ok(x.iter().map(|&v| -v).collect());
    let want = (-1.0f64).exp();

    for (method, p) in [
        (SolverMethod::Euler, 1.0f64),
        (SolverMethod::Midpoint, 2.0),
        (SolverMethod::Rk4, 4.0),
    ] {
        let mut errs = Vec::new();
        for steps in [10usize, 20, 40] {
            let cfg = SolverConfig::fixed(method, steps);
            let (state, _, _) = integrate_f64(decay, &[1.0], &cfg).unwrap();
            errs.push((state[0] - want).abs());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            let expected = 2f64.powf(p);
            assert!(
                ratio > 0.75 * expected && ratio < 1.25 * expected,
                "{}: ratio {ratio} vs 2^{p}",
                method.name()
            );
        }
    }

    for rtol in [1e-4, 1e-6, 1e-8] {
        let cfg = SolverConfig::dopri5(rtol, rtol);
        let (state, _, _) = integrate_f64(decay, &[1.0], &cfg).unwrap();
        let err = (state[0] - want).abs();
        assert!(err <= 50.0 * rtol, "dopri5 rtol {rtol}: err {err}");
    }

    let cfg = SolverConfig::fixed(SolverMethod::Euler, 10);
    let (state, nfe, _) = integrate_f64(decay, &[1.0], &cfg).unwrap();
    assert!((state[0] - 0.34867844f64).abs() < 1e-7, "euler 10-step {}", state[0]);
    assert_eq!(nfe, 10);
    pass(4, "solver orders");
}

// --- 5. Straight-trajectory low-NFE claim ----------------------------------

#[test]
fn c05_low_nfe_straight_trajectory() {
    let data = LatentPairSet::from_toy(&gen_2d_toy(1, 512).unwrap()).unwrap();
    let arch = ArchConfig {
        in_channels_x: 2,
        in_channels_z: 2,
        base_channels: 16,
        channel_mults: vec![1],
        blocks_per_level: 1,
        attn_at_bottom: false,
        time_embed_dim: 32,
        norm_groups: 4,
    };
    let cfg = TrainConfig {
        steps: 2000,
        batch: 8,
        lr: 2e-3,
        seed: 7,
        sigma_min: 1e-4,
        noise_aug: NoiseAugConfig::new(0, 1000),
        ..TrainConfig::default()
    };
    let out = train_model(ModelKind::Cfm, &arch, &data, &cfg).unwrap();
    let final_loss = out.loss_rows.last().unwrap().loss;
    assert!(final_loss < 0.05, "toy CFM loss {final_loss}");

    let eval = gen_2d_toy(99, 128).unwrap();
    let meta = TrainMeta {
        noise_aug_t: 0,
        ..TrainMeta::default()
    };
    let endpoint_mse = |steps: usize| -> f64 {
        let solver = SolverConfig::fixed(SolverMethod::Euler, steps);
        let mut acc = 0.0;
        for (i, p) in eval.iter().enumerate() {
            let mut rng = RngStream::new(5, i as u64);
            let (end, nfe) = sample_model(
                &out.net,
                &meta,
                ModelKind::Cfm,
                &p.x0_tensor(),
                &solver,
                0,
                &mut rng,
            )
            .unwrap();
            assert_eq!(nfe, steps);
            acc += end.mse(&p.x1_tensor()).unwrap();
        }
        acc / eval.len() as f64
    };
    let mse_1 = endpoint_mse(1);
    let mse_50 = endpoint_mse(50);
    assert!(
        mse_1 <= 1.5 * mse_50,
        "endpoint MSE at NFE=1 ({mse_1}) vs NFE=50 ({mse_50})"
    );
    println!("  toy loss {final_loss:.5}, endpoint MSE {mse_1:.6} @1 vs {mse_50:.6} @50");
    pass(5, "straight-trajectory low NFE");
}

// --- Shared desk-scale training setup for criteria 6-8 ----------------------

fn small_arch(base_channels: usize) -> ArchConfig {
    ArchConfig {
        in_channels_x: 4,
        in_channels_z: 4,
        base_channels,
        channel_mults: vec![1, 2],
        blocks_per_level: 1,
        attn_at_bottom: true,
        time_embed_dim: 64,
        norm_groups: 8,
    }
}

fn train_cfg(steps: u32, t_aug: u32, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        lr,
        seed: 7,
        sigma_min: 1e-4,
        noise_aug: NoiseAugConfig::new(t_aug, 1000),
        ..TrainConfig::default()
    }
}

fn meta_with(t_aug: u32) -> TrainMeta {
    TrainMeta {
        noise_aug_t: t_aug,
        factor: 4,
        codec_seed: 17,
        upsample: LatentUpsample::Psu,
        ..TrainMeta::default()
    }
}

// --- 6. CFM beats diffusion at low NFE --------------------------------------

#[test]
fn c06_cfm_beats_dm_at_low_nfe() {
    let codec = PatchCodec::new(2, 1, 17);
    let train_pairs = gen_texture(5, 96, 64, 4).unwrap();
    let eval_pairs = gen_texture(1005, 80, 64, 4).unwrap();
    let data = LatentPairSet::from_pairs(&train_pairs, &codec, LatentUpsample::Psu).unwrap();
    let arch = small_arch(16);
    let cfg = train_cfg(300, 400, 3e-4);

    let cfm = train_model(ModelKind::Cfm, &arch, &data, &cfg).unwrap();
    let dm = train_model(ModelKind::DmUpsampler, &arch, &data, &cfg).unwrap();

    let meta = meta_with(400);
    let solver = SolverConfig::fixed(SolverMethod::Euler, 4);
    let cfm_out =
        eval_outputs(&cfm.net, ModelKind::Cfm, &meta, &eval_pairs, &codec, &solver, 4, 3).unwrap();
    let dm_out = eval_outputs(
        &dm.net,
        ModelKind::DmUpsampler,
        &meta,
        &eval_pairs,
        &codec,
        &solver,
        4,
        3,
    )
    .unwrap();
    assert_eq!(cfm_out.nfe_per_sample, 4);
    assert_eq!(dm_out.nfe_per_sample, 4);

    let ffd_cfm = ffd(&cfm_out.outputs, &cfm_out.truths).unwrap();
    let ffd_dm = ffd(&dm_out.outputs, &dm_out.truths).unwrap();
    println!("  FFD at NFE=4: cfm {ffd_cfm:.4} vs dm {ffd_dm:.4}");
    assert!(
        ffd_cfm < ffd_dm,
        "FFD(CFM@4) = {ffd_cfm} must beat FFD(DM@4) = {ffd_dm}"
    );
    pass(6, "cfm beats dm at low NFE");
}

// --- 7. Mode-averaging claim -------------------------------------------------

fn nearest_mode_distance(
    net: &VectorFieldNet,
    kind: ModelKind,
    meta: &TrainMeta,
    eval: &[BimodalSample],
    codec: &PatchCodec,
    solver: &SolverConfig,
) -> f64 {
    let mut acc = 0.0;
    let mut count = 0u64;
    for pair in eval.chunks(2) {
        let a = &pair[0].sample;
        let b = &pair[1].sample;
        let lo = codec.encode(&a.low).unwrap();
        let up = psu(codec, &lo, a.factor).unwrap();
        let mut rng = RngStream::new(33, count);
        let (lat, _) = sample_model(net, meta, kind, &up, solver, 4, &mut rng).unwrap();
        let img = codec.decode(&lat).unwrap();
        let da = img.sub(&a.high).unwrap().norm();
        let db = img.sub(&b.high).unwrap().norm();
        acc += da.min(db);
        count += 1;
    }
    acc / count as f64
}

#[test]
fn c07_mode_averaging() {
    let codec = PatchCodec::new(2, 1, 17);
    let train = gen_bimodal(5, 64, 32, 4).unwrap();
    let eval = gen_bimodal(1005, 32, 32, 4).unwrap();
    let data = LatentPairSet::from_bimodal(&train, &codec, LatentUpsample::Psu).unwrap();
    // Budget calibrated so the commitment margin is wide: ratio ~0.31
    // against the 0.5 threshold.
    let arch = small_arch(24);
    let cfg = train_cfg(1000, 400, 5e-4);

    let cfm = train_model(ModelKind::Cfm, &arch, &data, &cfg).unwrap();
    let reg = train_model(ModelKind::RegL2, &arch, &data, &cfg).unwrap();

    let meta = meta_with(400);
    let solver = SolverConfig::fixed(SolverMethod::Euler, 50);
    let d_cfm = nearest_mode_distance(&cfm.net, ModelKind::Cfm, &meta, &eval, &codec, &solver);
    let d_reg = nearest_mode_distance(&reg.net, ModelKind::RegL2, &meta, &eval, &codec, &solver);

    // Analytic oracle: the conditional mean sits exactly half the mode
    // separation from either mode (stripe amplitude times sqrt(pixels)).
    let numel = (32.0f64 * 32.0).sqrt();
    let oracle = BIMODAL_AMP as f64 * numel;
    println!("  nearest-mode distance: cfm {d_cfm:.3}, reg_l2 {d_reg:.3}, mean-oracle {oracle:.3}");
    assert!(
        (d_reg - oracle).abs() / oracle < 0.35,
        "L2 regression should sit near the conditional mean: {d_reg} vs oracle {oracle}"
    );
    assert!(
        d_cfm <= 0.5 * d_reg,
        "CFM distance {d_cfm} must be at most half the regression's {d_reg}"
    );
    pass(7, "mode averaging");
}

// --- 8. Noise-augmentation sweep shape ---------------------------------------

#[test]
fn c08_noise_augmentation_sweep() {
    let codec = PatchCodec::new(2, 1, 17);
    let train = gen_bimodal(5, 64, 32, 4).unwrap();
    let eval = gen_bimodal(1005, 64, 32, 4).unwrap();
    let truths: Vec<Tensor> = eval.iter().map(|s| s.sample.high.clone()).collect();
    let eval_pairs: Vec<_> = eval.iter().map(|s| s.sample.clone()).collect();
    let data = LatentPairSet::from_bimodal(&train, &codec, LatentUpsample::Psu).unwrap();
    let arch = small_arch(16);
    let solver = SolverConfig::fixed(SolverMethod::Euler, 50);

    let mut ffds = Vec::new();
    for t_aug in [0u32, 200, 400, 700, 1000] {
        let out = train_model(ModelKind::Cfm, &arch, &data, &train_cfg(400, t_aug, 3e-4)).unwrap();
        let meta = meta_with(t_aug);
        let outs = eval_outputs(
            &out.net,
            ModelKind::Cfm,
            &meta,
            &eval_pairs,
            &codec,
            &solver,
            4,
            3,
        )
        .unwrap();
        let f = ffd(&outs.outputs, &truths).unwrap();
        println!("  t_aug {t_aug}: FFD {f:.4}");
        ffds.push((t_aug, f));
    }
    let best_mid = ffds[1..4]
        .iter()
        .map(|&(_, f)| f)
        .fold(f64::INFINITY, f64::min);
    let f0 = ffds[0].1;
    let f1000 = ffds[4].1;
    assert!(
        f0 >= best_mid,
        "FFD(t_aug=0) = {f0} must not beat the best intermediate {best_mid}"
    );
    assert!(
        f1000 >= best_mid,
        "FFD(t_aug=1000) = {f1000} must not beat the best intermediate {best_mid}"
    );
    pass(8, "noise augmentation sweep");
}

// --- 9. PSU definitional identity ---------------------------------------------

#[test]
fn c09_psu_identity_and_codec_quality() {
    let codec = PatchCodec::new(2, 1, 17);
    let latent = rand_tensor(vec![4, 8, 8], 900);
    let via_psu = psu(&codec, &latent, 2).unwrap();
    let composed = codec
        .encode(&upsample(&codec.decode(&latent).unwrap(), 2, UpsampleMethod::Bilinear).unwrap())
        .unwrap();
    for i in 0..via_psu.len() {
        assert_eq!(
            via_psu.data()[i].to_bits(),
            composed.data()[i].to_bits(),
            "psu must equal the composition bit-exactly"
        );
    }

    for size in [16usize, 64, 128] {
        let mut rng = RngStream::new(900 + size as u64, 0);
        let img = Tensor::gaussian(vec![1, size, size], &mut rng)
            .unwrap()
            .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        let mse = img.mse(&back).unwrap();
        let db = psnr_from_mse(mse, 1.0);
        assert!(db >= 60.0, "codec round-trip at {size}^2: {db} dB");
    }
    pass(9, "psu identity and codec quality");
}

// --- 10. Metric sanity ----------------------------------------------------------

/// Denman-Beavers square-root iteration: the independent oracle route for
/// the covariance square root inside the Frechet distance.
fn denman_beavers_sqrt(m: &MatF64) -> MatF64 {
    let n = m.n;
    let mut y = m.clone();
    let mut z = MatF64::identity(n);
    for _ in 0..60 {
        let yi = invert(&y);
        let zi = invert(&z);
        let mut y_next = MatF64::zeros(n);
        let mut z_next = MatF64::zeros(n);
        for i in 0..n * n {
            y_next.data[i] = 0.5 * (y.data[i] + zi.data[i]);
            z_next.data[i] = 0.5 * (z.data[i] + yi.data[i]);
        }
        y = y_next;
        z = z_next;
    }
    y
}

/// Gauss-Jordan inverse with partial pivoting, f64.
fn invert(m: &MatF64) -> MatF64 {
    let n = m.n;
    let mut a = m.clone();
    let mut inv = MatF64::identity(n);
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a.get(r, col).abs() > a.get(piv, col).abs() {
                piv = r;
            }
        }
        if piv != col {
            for j in 0..n {
                let (x, y) = (a.get(col, j), a.get(piv, j));
                a.set(col, j, y);
                a.set(piv, j, x);
                let (x, y) = (inv.get(col, j), inv.get(piv, j));
                inv.set(col, j, y);
                inv.set(piv, j, x);
            }
        }
        let d = a.get(col, col);
        assert!(d.abs() > 1e-300, "singular matrix in oracle inverse");
        for j in 0..n {
            a.set(col, j, a.get(col, j) / d);
            inv.set(col, j, inv.get(col, j) / d);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(r, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a.set(r, j, a.get(r, j) - f * a.get(col, j));
                inv.set(r, j, inv.get(r, j) - f * inv.get(col, j));
            }
        }
    }
    inv
}

/// Frechet distance via the Denman-Beavers route.
fn frechet_oracle(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let d = a.mean.len();
    let mut dist = 0.0;
    for i in 0..d {
        let diff = a.mean[i] - b.mean[i];
        dist += diff * diff;
    }
    let sqrt_a = denman_beavers_sqrt(&a.cov);
    let inner = sqrt_a.matmul(&b.cov).matmul(&sqrt_a).symmetrize();
    let sqrt_inner = denman_beavers_sqrt(&inner);
    dist + a.cov.trace() + b.cov.trace() - 2.0 * sqrt_inner.trace()
}

#[test]
fn c10_metric_sanity() {
    let img = rand_tensor(vec![1, 24, 24], 1000).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let s = ssim(&img, &img).unwrap();
    assert!((s - 1.0).abs() <= 1e-6, "ssim(x,x) = {s}");

    let set: Vec<Tensor> = (0..16)
        .map(|i| rand_tensor(vec![1, 24, 24], 1100 + i).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)))
        .collect();
    let d = ffd(&set, &set).unwrap();
    assert!(d <= 1e-5, "ffd(S,S) = {d}");

    let p = psnr_from_mse(0.01, 1.0);
    assert!((p - 20.0).abs() < 1e-12, "psnr(mse=0.01) = {p}");

    // Implementation (Jacobi eigendecomposition) against the independent
    // Denman-Beavers oracle on real feature statistics.
    let extractor = FeatureExtractor::with_default_seed(1);
    let set_b: Vec<Tensor> = (0..70)
        .map(|i| rand_tensor(vec![1, 24, 24], 1200 + i).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0)))
        .collect();
    let set_c: Vec<Tensor> = (0..70)
        .map(|i| {
            rand_tensor(vec![1, 24, 24], 1300 + i).map(|v| (0.55 + 0.25 * v).clamp(0.0, 1.0))
        })
        .collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|t| extractor.extract(t).unwrap()).collect();
    let fc: Vec<Vec<f64>> = set_c.iter().map(|t| extractor.extract(t).unwrap()).collect();
    let sb = GaussianStats::fit(&fb).unwrap();
    let sc = GaussianStats::fit(&fc).unwrap();
    let implementation = frechet_distance(&sb, &sc);
    let oracle = frechet_oracle(&sb, &sc);
    let rel = (implementation - oracle).abs() / oracle.abs().max(1e-12);
    assert!(
        rel < 1e-4,
        "frechet {implementation} vs oracle {oracle} (rel {rel})"
    );
    pass(10, "metric sanity");
}

// --- 11. Determinism and persistence ------------------------------------------

#[test]
fn c11_determinism_and_persistence() {
    let dir = std::env::temp_dir().join(format!("flowsr-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    // Tensor file round-trip, bit-exact.
    let t = rand_tensor(vec![3, 4, 4], 1111);
    let tpath = dir.join("t.fmt");
    save_tensor(&t, &tpath).unwrap();
    let t2 = load_tensor(&tpath).unwrap();
    for i in 0..t.len() {
        assert_eq!(t.data()[i].to_bits(), t2.data()[i].to_bits());
    }

    // Checkpoint round-trip: forward bit-equality.
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
    let net = VectorFieldNet::new(arch.clone(), 21);
    let ckpt = Checkpoint {
        kind: ModelKind::Cfm,
        arch: arch.clone(),
        meta: TrainMeta::default(),
        step: 5,
        params: net.params().clone(),
        adam: Some(AdamState::new(AdamConfig::default(), net.params())),
    };
    let cpath = dir.join("c.fmbc");
    save_checkpoint(&ckpt, &cpath).unwrap();
    let loaded = load_checkpoint(&cpath).unwrap();
    let net2 = loaded.build_net().unwrap();
    let x = rand_tensor(vec![4, 8, 8], 1112);
    let z = rand_tensor(vec![4, 8, 8], 1113);
    let fa = net.forward(0.4, &x, Some(&z)).unwrap();
    let fb = net2.forward(0.4, &x, Some(&z)).unwrap();
    for i in 0..fa.len() {
        assert_eq!(fa.data()[i].to_bits(), fb.data()[i].to_bits());
    }

    // Full-pipeline bit reproducibility under fixed seeds.
    let prior_arch = ArchConfig {
        in_channels_x: 4,
        in_channels_z: 0,
        base_channels: 8,
        channel_mults: vec![1],
        blocks_per_level: 1,
        attn_at_bottom: false,
        time_embed_dim: 16,
        norm_groups: 4,
    };
    let prior_net = VectorFieldNet::new(prior_arch.clone(), 31);
    let meta = TrainMeta {
        factor: 2,
        codec_seed: 17,
        ..TrainMeta::default()
    };
    let spec = PipelineSpec {
        prior: Checkpoint {
            kind: ModelKind::DdpmPrior,
            arch: prior_arch,
            meta: meta.clone(),
            step: 0,
            params: prior_net.params().clone(),
            adam: None,
        },
        upsampler: Checkpoint {
            kind: ModelKind::Cfm,
            arch,
            meta,
            step: 0,
            params: net.params().clone(),
            adam: None,
        },
        prior_latent_size: 4,
        ddim_steps_prior: 3,
        solver: SolverConfig::fixed(SolverMethod::Euler, 4),
        sample_count: 2,
        seed: 77,
    };
    let codec = PatchCodec::new(2, 1, 17);
    let run_a = spec.run(&codec).unwrap();
    let run_b = spec.run(&codec).unwrap();
    for (a, b) in run_a.iter().zip(&run_b) {
        for i in 0..a.final_latent.len() {
            assert_eq!(
                a.final_latent.data()[i].to_bits(),
                b.final_latent.data()[i].to_bits()
            );
        }
    }

    // CSV round-trip equality.
    let mut report = MetricReport::default();
    report.push("psnr", 31.25, "model", "gt", 64, 9);
    report.push("ffd", 0.03125, "model", "gt", 64, 9);
    let rpath = dir.join("m.csv");
    report.write_csv(&rpath).unwrap();
    let parsed = MetricReport::read_csv(&rpath).unwrap();
    assert_eq!(parsed, report);

    pass(11, "determinism and persistence");
}
