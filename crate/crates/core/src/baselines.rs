//! Comparison systems: the cosine diffusion schedule, epsilon-prediction
//! training targets, deterministic DDIM sampling, and one-step regression
//! prediction. All baselines reuse [`VectorFieldNet`] so architecture and
//! capacity match the flow-matching model exactly.

use thiserror::Error;

use crate::autodiff::{NetError, VectorFieldNet};
use crate::paths::alpha_bar;
use crate::tensor::{RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("ddim steps must be in [1, {max}], got {got}")]
    BadSteps { got: usize, max: usize },
}

/// Discrete diffusion schedule: cosine cumulative signal with per-step betas
/// clipped to (0, 0.999], cumulative products recomputed after clipping.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub total_steps: u32,
    /// `alpha_bar[t]` for t in 0..=total_steps; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// `betas[t-1]` is the noise rate of step t, t in 1..=total_steps.
    pub betas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn cosine(total_steps: u32) -> Self {
        let offset = 0.008;
        let raw: Vec<f64> = (0..=total_steps)
            .map(|t| alpha_bar(t, total_steps, offset))
            .collect();
        let mut betas = Vec::with_capacity(total_steps as usize);
        for t in 1..=total_steps as usize {
            let beta = (1.0 - raw[t] / raw[t - 1]).clamp(1e-8, 0.999);
            betas.push(beta);
        }
        let mut cum = Vec::with_capacity(total_steps as usize + 1);
        cum.push(1.0);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            cum.push(acc);
        }
        Self {
            total_steps,
            alpha_bar: cum,
            betas,
        }
    }

    /// Forward noising to step t: `sqrt(ab) x + sqrt(1-ab) eps`.
    pub fn noise_to(
        &self,
        x: &Tensor,
        t: u32,
        eps: &Tensor,
    ) -> Result<Tensor, BaselineError> {
        let ab = self.alpha_bar[t as usize];
        Ok(x.scale(ab.sqrt() as f32)
            .add(&eps.scale((1.0 - ab).sqrt() as f32))?)
    }

    /// Time input for the shared net: fraction of the schedule.
    pub fn time_of(&self, t: u32) -> f64 {
        t as f64 / self.total_steps as f64
    }

    /// Uniformly strided descending timestep subsequence; the final update
    /// targets t = 0 exactly.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<u32>, BaselineError> {
        let total = self.total_steps as usize;
        if steps < 1 || steps > total {
            return Err(BaselineError::BadSteps {
                got: steps,
                max: total,
            });
        }
        Ok((0..steps)
            .map(|i| (total - i * total / steps) as u32)
            .collect())
    }
}

/// Clamp on the denoised estimate inside DDIM updates. Near t = T the
/// cumulative signal is ~1e-9, so the division cannot be cancelled at f32
/// precision; without a clamp the first jump amplifies prediction error by
/// orders of magnitude. Latents of unit-range images stay within ~2, so
/// this bound is generous.
pub const DDIM_X0_CLIP: f32 = 6.0;

/// One deterministic (eta = 0) DDIM update from step `t` to step `t_next`,
/// with the denoised estimate clamped to `[-DDIM_X0_CLIP, DDIM_X0_CLIP]`.
pub fn ddim_update(
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: u32,
    t_next: u32,
) -> Result<Tensor, BaselineError> {
    let ab_t = schedule.alpha_bar[t as usize];
    let ab_n = schedule.alpha_bar[t_next as usize];
    // x0_hat = (x_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
    let x0_hat = x_t
        .sub(&eps_hat.scale((1.0 - ab_t).sqrt() as f32))?
        .scale((1.0 / ab_t.sqrt()) as f32)
        .map(|v| v.clamp(-DDIM_X0_CLIP, DDIM_X0_CLIP));
    Ok(x0_hat
        .scale(ab_n.sqrt() as f32)
        .add(&eps_hat.scale((1.0 - ab_n).sqrt() as f32))?)
}

/// Deterministic DDIM sampling from a provided terminal state. The only
/// randomness a caller can inject is `x_terminal` itself.
pub fn ddim_sample_from(
    net: &VectorFieldNet,
    z: Option<&Tensor>,
    schedule: &DiffusionSchedule,
    steps: usize,
    x_terminal: Tensor,
) -> Result<(Tensor, usize), BaselineError> {
    let taus = schedule.ddim_timesteps(steps)?;
    let mut x = x_terminal;
    let mut nfe = 0;
    for (i, &t) in taus.iter().enumerate() {
        let t_next = if i + 1 < taus.len() { taus[i + 1] } else { 0 };
        let eps_hat = net.forward(schedule.time_of(t), &x, z)?;
        nfe += 1;
        x = ddim_update(schedule, &x, &eps_hat, t, t_next)?;
    }
    Ok((x, nfe))
}

/// DDIM sampling with a seeded Gaussian terminal state.
pub fn ddim_sample(
    net: &VectorFieldNet,
    z: Option<&Tensor>,
    schedule: &DiffusionSchedule,
    steps: usize,
    shape: Vec<usize>,
    rng: &mut RngStream,
) -> Result<(Tensor, usize), BaselineError> {
    let x_terminal = Tensor::gaussian(shape, rng)?;
    ddim_sample_from(net, z, schedule, steps, x_terminal)
}

/// One-step regression prediction: the net refines its upsampled input,
/// `y_hat = x + net(0, x, z)`.
pub fn regression_predict(
    net: &VectorFieldNet,
    x_up: &Tensor,
    z: &Tensor,
) -> Result<Tensor, BaselineError> {
    let delta = net.forward(0.0, x_up, Some(z))?;
    Ok(x_up.add(&delta)?)
}
