//! Numerical integration of `dx = v(t, x, z) dt` from t = 0 to t = 1:
//! fixed-step Euler, midpoint, RK4, and adaptive Dormand-Prince (dopri5)
//! with exact NFE accounting and trajectory snapshots.

use thiserror::Error;

use crate::autodiff::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid solver config: {0}")]
    BadConfig(String),
    #[error("adaptive step underflow at t = {t}: h = {h} < h_min = {h_min} (error estimate {err_estimate})")]
    StepUnderflow {
        t: f64,
        h: f64,
        h_min: f64,
        err_estimate: f64,
    },
    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("field evaluation failed at t = {t}: {message}")]
    FieldFailed { t: f64, message: String },
    #[error("NFE is only known after the run for adaptive methods")]
    AdaptiveNfeUnknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Euler,
    Midpoint,
    Rk4,
    Dopri5,
}

impl SolverMethod {
    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Midpoint => "midpoint",
            SolverMethod::Rk4 => "rk4",
            SolverMethod::Dopri5 => "dopri5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(Self::Euler),
            "midpoint" => Some(Self::Midpoint),
            "rk4" => Some(Self::Rk4),
            "dopri5" => Some(Self::Dopri5),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: SolverMethod,
    /// Step count for fixed-step methods.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub safety: f64,
    /// Interior times to snapshot; t = 0 and t = 1 are always recorded.
    pub record_times: Vec<f64>,
}

impl SolverConfig {
    pub fn fixed(method: SolverMethod, steps: usize) -> Self {
        Self {
            method,
            steps,
            rtol: 1e-5,
            atol: 1e-5,
            h_init: 0.05,
            h_min: 1e-10,
            safety: 0.9,
            record_times: Vec::new(),
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: SolverMethod::Dopri5,
            steps: 0,
            rtol,
            atol,
            h_init: 0.05,
            h_min: 1e-10,
            safety: 0.9,
            record_times: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        match self.method {
            SolverMethod::Dopri5 => {
                if self.rtol <= 0.0 || self.atol <= 0.0 {
                    return Err(SolverError::BadConfig(format!(
                        "adaptive tolerances must be positive (rtol {}, atol {})",
                        self.rtol, self.atol
                    )));
                }
                if self.h_init <= 0.0 || self.h_min <= 0.0 {
                    return Err(SolverError::BadConfig("h_init and h_min must be positive".into()));
                }
            }
            _ => {
                if self.steps < 1 {
                    return Err(SolverError::BadConfig("fixed-step methods need steps >= 1".into()));
                }
            }
        }
        for &t in &self.record_times {
            if !(0.0..=1.0).contains(&t) {
                return Err(SolverError::BadConfig(format!(
                    "record time {t} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Completed integration: final state, snapshots, exact NFE, and the
/// accepted step sizes of an adaptive run.
#[derive(Debug, Clone)]
pub struct SolverRun {
    pub final_state: Tensor,
    /// Sorted by time; always contains t = 0 and t = 1.
    pub snapshots: Vec<(f64, Tensor)>,
    pub nfe: usize,
    pub step_sizes: Vec<f64>,
}

/// Field evaluations for a fixed-step configuration, known ahead of the run.
pub fn nfe_of(cfg: &SolverConfig) -> Result<usize, SolverError> {
    match cfg.method {
        SolverMethod::Euler => Ok(cfg.steps),
        SolverMethod::Midpoint => Ok(2 * cfg.steps),
        SolverMethod::Rk4 => Ok(4 * cfg.steps),
        SolverMethod::Dopri5 => Err(SolverError::AdaptiveNfeUnknown),
    }
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// `y += h * k`
fn axpy<E: Scalar>(y: &mut [E], h: E, k: &[E]) {
    for (a, b) in y.iter_mut().zip(k) {
        *a += h * *b;
    }
}

struct Recorder<E> {
    wanted: Vec<f64>,
    next: usize,
    snapshots: Vec<(f64, Vec<E>)>,
}

impl<E: Scalar> Recorder<E> {
    fn new(record_times: &[f64], x0: &[E]) -> Self {
        let mut wanted: Vec<f64> = record_times
            .iter()
            .copied()
            .filter(|&t| t > 0.0 && t < 1.0)
            .collect();
        wanted.sort_by(f64::total_cmp);
        wanted.dedup();
        Self {
            wanted,
            next: 0,
            snapshots: vec![(0.0, x0.to_vec())],
        }
    }

    /// Interpolates any requested times inside (t_prev, t_new].
    fn advance(&mut self, t_prev: f64, x_prev: &[E], t_new: f64, x_new: &[E]) {
        while self.next < self.wanted.len() && self.wanted[self.next] <= t_new + 1e-12 {
            let tw = self.wanted[self.next];
            if tw <= t_prev {
                self.next += 1;
                continue;
            }
            let span = t_new - t_prev;
            let frac = if span > 0.0 { (tw - t_prev) / span } else { 0.0 };
            let ef = E::from_f64(frac);
            let snap: Vec<E> = x_prev
                .iter()
                .zip(x_new)
                .map(|(&a, &b)| a + ef * (b - a))
                .collect();
            self.snapshots.push((tw, snap));
            self.next += 1;
        }
    }

    fn finish(mut self, x_final: &[E]) -> Vec<(f64, Vec<E>)> {
        self.snapshots.push((1.0, x_final.to_vec()));
        self.snapshots
    }
}

struct RawRun<E> {
    state: Vec<E>,
    snapshots: Vec<(f64, Vec<E>)>,
    nfe: usize,
    step_sizes: Vec<f64>,
}

/// Generic integration core over the scalar type; the public wrapper feeds
/// it f32 states, tests may instantiate it at f64.
fn integrate_raw<E, F>(mut field: F, x0: &[E], cfg: &SolverConfig) -> Result<RawRun<E>, SolverError>
where
    E: Scalar,
    F: FnMut(f64, &[E]) -> Result<Vec<E>, SolverError>,
{
    cfg.validate()?;
    let n = x0.len();
    let mut nfe = 0usize;
    let mut eval = |t: f64, x: &[E], nfe: &mut usize| -> Result<Vec<E>, SolverError> {
        *nfe += 1;
        let k = field(t, x)?;
        debug_assert_eq!(k.len(), n);
        Ok(k)
    };

    let mut rec = Recorder::new(&cfg.record_times, x0);
    let mut x = x0.to_vec();
    let mut step_sizes = Vec::new();

    match cfg.method {
        SolverMethod::Euler | SolverMethod::Midpoint | SolverMethod::Rk4 => {
            let steps = cfg.steps;
            let h = 1.0 / steps as f64;
            let he = E::from_f64(h);
            for i in 0..steps {
                let t = i as f64 * h;
                let t_next = if i + 1 == steps { 1.0 } else { (i + 1) as f64 * h };
                let x_prev = x.clone();
                match cfg.method {
                    SolverMethod::Euler => {
                        let k = eval(t, &x, &mut nfe)?;
                        axpy(&mut x, he, &k);
                    }
                    SolverMethod::Midpoint => {
                        let k1 = eval(t, &x, &mut nfe)?;
                        let mut xm = x.clone();
                        axpy(&mut xm, E::from_f64(h / 2.0), &k1);
                        let k2 = eval(t + h / 2.0, &xm, &mut nfe)?;
                        axpy(&mut x, he, &k2);
                    }
                    SolverMethod::Rk4 => {
                        let k1 = eval(t, &x, &mut nfe)?;
                        let mut x2 = x.clone();
                        axpy(&mut x2, E::from_f64(h / 2.0), &k1);
                        let k2 = eval(t + h / 2.0, &x2, &mut nfe)?;
                        let mut x3 = x.clone();
                        axpy(&mut x3, E::from_f64(h / 2.0), &k2);
                        let k3 = eval(t + h / 2.0, &x3, &mut nfe)?;
                        let mut x4 = x.clone();
                        axpy(&mut x4, he, &k3);
                        let k4 = eval(t + h, &x4, &mut nfe)?;
                        let sixth = E::from_f64(h / 6.0);
                        let third = E::from_f64(h / 3.0);
                        axpy(&mut x, sixth, &k1);
                        axpy(&mut x, third, &k2);
                        axpy(&mut x, third, &k3);
                        axpy(&mut x, sixth, &k4);
                    }
                    SolverMethod::Dopri5 => unreachable!(),
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(SolverError::NonFiniteState { t: t_next });
                }
                step_sizes.push(h);
                rec.advance(t, &x_prev, t_next, &x);
            }
        }
        SolverMethod::Dopri5 => {
            let mut t = 0.0f64;
            let mut h = cfg.h_init.min(1.0);
            // FSAL: k[0] of the next step reuses k[6] of the accepted step.
            let mut k0 = eval(t, &x, &mut nfe)?;
            while t < 1.0 - 1e-12 {
                // Clamping to the remaining span may make the final step
                // arbitrarily small; only controller shrinkage checks h_min.
                let h_try = h.min(1.0 - t);
                let mut k: Vec<Vec<E>> = Vec::with_capacity(7);
                k.push(k0.clone());
                for stage in 1..7 {
                    let mut xs = x.clone();
                    for (j, kj) in k.iter().enumerate() {
                        let a = DP_A[stage - 1][j];
                        if a != 0.0 {
                            axpy(&mut xs, E::from_f64(h_try * a), kj);
                        }
                    }
                    k.push(eval(t + DP_C[stage] * h_try, &xs, &mut nfe)?);
                }

                // Fifth-order solution and embedded error estimate.
                let mut x5 = x.clone();
                for (j, kj) in k.iter().enumerate() {
                    if DP_B5[j] != 0.0 {
                        axpy(&mut x5, E::from_f64(h_try * DP_B5[j]), kj);
                    }
                }
                let mut err_sq = 0.0f64;
                for i in 0..n {
                    let mut e = 0.0f64;
                    for (j, kj) in k.iter().enumerate() {
                        e += (DP_B5[j] - DP_B4[j]) * kj[i].to_f64();
                    }
                    e *= h_try;
                    let sc = cfg.atol
                        + cfg.rtol * x[i].to_f64().abs().max(x5[i].to_f64().abs());
                    err_sq += (e / sc) * (e / sc);
                }
                let err = (err_sq / n as f64).sqrt();

                if err <= 1.0 {
                    let t_new = if 1.0 - (t + h_try) < 1e-12 { 1.0 } else { t + h_try };
                    if x5.iter().any(|v| !v.is_finite()) {
                        return Err(SolverError::NonFiniteState { t: t_new });
                    }
                    rec.advance(t, &x, t_new, &x5);
                    x = x5;
                    k0 = k.pop().expect("seven stages");
                    step_sizes.push(h_try);
                    t = t_new;
                    let grow = (cfg.safety * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                    h = h_try * grow;
                } else {
                    let shrink = (cfg.safety * err.powf(-0.2)).clamp(0.2, 1.0);
                    let h_new = h_try * shrink;
                    if h_new < cfg.h_min {
                        return Err(SolverError::StepUnderflow {
                            t,
                            h: h_new,
                            h_min: cfg.h_min,
                            err_estimate: err,
                        });
                    }
                    h = h_new;
                }
            }
        }
    }

    Ok(RawRun {
        snapshots: rec.finish(&x),
        state: x,
        nfe,
        step_sizes,
    })
}

/// Integrates the field from t = 0 to t = 1 starting at `x0`, carrying the
/// conditioning `z` through every evaluation.
pub fn integrate<F>(
    mut field: F,
    x0: &Tensor,
    z: Option<&Tensor>,
    cfg: &SolverConfig,
) -> Result<SolverRun, SolverError>
where
    F: FnMut(f64, &Tensor, Option<&Tensor>) -> Result<Tensor, SolverError>,
{
    let shape = x0.shape().to_vec();
    let raw = integrate_raw::<f32, _>(
        |t, state| {
            let xt = Tensor::new(shape.clone(), state.to_vec()).map_err(SolverError::Tensor)?;
            let v = field(t, &xt, z)?;
            if v.shape() != shape.as_slice() {
                return Err(SolverError::FieldFailed {
                    t,
                    message: format!(
                        "field returned shape {:?}, expected {:?}",
                        v.shape(),
                        shape
                    ),
                });
            }
            Ok(v.into_data())
        },
        x0.data(),
        cfg,
    )?;

    let to_tensor = |data: Vec<f32>| Tensor::new(shape.clone(), data).expect("shape preserved");
    Ok(SolverRun {
        final_state: to_tensor(raw.state),
        snapshots: raw
            .snapshots
            .into_iter()
            .map(|(t, s)| (t, to_tensor(s)))
            .collect(),
        nfe: raw.nfe,
        step_sizes: raw.step_sizes,
    })
}

/// Result of [`integrate_f64`]: final state, NFE, and snapshots.
pub type F64Run = (Vec<f64>, usize, Vec<(f64, Vec<f64>)>);

/// f64 entry point for convergence studies; same code path as [`integrate`].
pub fn integrate_f64<F>(field: F, x0: &[f64], cfg: &SolverConfig) -> Result<F64Run, SolverError>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, SolverError>,
{
    let raw = integrate_raw::<f64, _>(field, x0, cfg)?;
    Ok((raw.state, raw.nfe, raw.snapshots))
}
