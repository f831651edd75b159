//! Conditional probability paths and training targets.
//!
//! Two path families: the Gaussian-source path (`naive_*`, straightening
//! from noise to data) and the data-coupled path whose target field is the
//! constant displacement between coupled endpoints. Cosine-schedule noise
//! augmentation corrupts the coupled source; it is never applied to the
//! conditioning.

use thiserror::Error;

use crate::tensor::{RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PathError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("sigma_min {0} outside [0, 1)")]
    BadSigmaMin(f64),
    #[error("path denominator {0} too small (t near 1 with sigma_min near 0)")]
    DenominatorUnderflow(f64),
    #[error("noise timestep {t} outside schedule range [0, {total}]")]
    NoiseStepOutOfRange { t: u32, total: u32 },
}

/// One training tuple drawn from a conditional probability path.
#[derive(Debug, Clone)]
pub struct PathSample {
    pub t: f64,
    pub x_t: Tensor,
    pub u_target: Tensor,
    /// Clean conditioning; noise augmentation never touches it.
    pub z: Tensor,
}

fn check_t(t: f64) -> Result<(), PathError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(PathError::TimeOutOfRange(t));
    }
    Ok(())
}

fn check_sigma(sigma_min: f64) -> Result<(), PathError> {
    if !(0.0..1.0).contains(&sigma_min) {
        return Err(PathError::BadSigmaMin(sigma_min));
    }
    Ok(())
}

/// Gaussian-source interpolant: `(1 - (1 - sigma_min) t) x0 + t x1`.
pub fn naive_point(x0: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor, PathError> {
    check_t(t)?;
    check_sigma(sigma_min)?;
    let a = (1.0 - (1.0 - sigma_min) * t) as f32;
    let b = t as f32;
    Ok(x0.scale(a).add(&x1.scale(b))?)
}

/// Target field of the Gaussian-source path at state `x`:
/// `(x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)`.
pub fn naive_target(x: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor, PathError> {
    check_t(t)?;
    check_sigma(sigma_min)?;
    let k = 1.0 - sigma_min;
    let denom = 1.0 - k * t;
    if denom <= 1e-6 {
        return Err(PathError::DenominatorUnderflow(denom));
    }
    let num = x1.sub(&x.scale(k as f32))?;
    Ok(num.scale((1.0 / denom) as f32))
}

/// Draws from the data-coupled path: `x_t = t x1 + (1-t) x0 + sigma_min eps`
/// with the constant target `u = x1 - x0`. The conditioning defaults to the
/// (clean) source.
pub fn coupled_sample(
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    sigma_min: f64,
    rng: &mut RngStream,
) -> Result<PathSample, PathError> {
    coupled_sample_with_z(x0, x1, x0.clone(), t, sigma_min, rng)
}

/// Data-coupled path with an explicit conditioning tensor, for callers that
/// noise-augment the source while conditioning on the clean version.
pub fn coupled_sample_with_z(
    x0: &Tensor,
    x1: &Tensor,
    z: Tensor,
    t: f64,
    sigma_min: f64,
    rng: &mut RngStream,
) -> Result<PathSample, PathError> {
    check_t(t)?;
    check_sigma(sigma_min)?;
    let mut x_t = x1.scale(t as f32).add(&x0.scale((1.0 - t) as f32))?;
    if sigma_min > 0.0 {
        let eps = Tensor::gaussian(x0.shape().to_vec(), rng)?;
        x_t = x_t.add(&eps.scale(sigma_min as f32))?;
    }
    let u_target = x1.sub(x0)?;
    Ok(PathSample {
        t,
        x_t,
        u_target,
        z,
    })
}

/// Mean squared error between the predicted and target fields.
pub fn fm_loss(v_pred: &Tensor, u_target: &Tensor) -> Result<f64, PathError> {
    Ok(v_pred.mse(u_target)?)
}

/// Cosine-schedule noise augmentation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseAugConfig {
    /// Noising timestep in [0, total_steps]; 0 disables.
    pub t_aug: u32,
    pub total_steps: u32,
    /// Cosine offset `s`.
    pub offset: f64,
}

impl Default for NoiseAugConfig {
    fn default() -> Self {
        Self {
            t_aug: 400,
            total_steps: 1000,
            offset: 0.008,
        }
    }
}

impl NoiseAugConfig {
    pub fn new(t_aug: u32, total_steps: u32) -> Self {
        Self {
            t_aug,
            total_steps,
            offset: 0.008,
        }
    }
}

/// Cumulative signal fraction of the cosine schedule, normalized so
/// `alpha_bar(0) = 1`; monotonically non-increasing in `t`.
pub fn alpha_bar(t: u32, total_steps: u32, offset: f64) -> f64 {
    let f = |u: f64| -> f64 {
        let arg = (u + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    (f(t as f64 / total_steps as f64) / f(0.0)).clamp(0.0, 1.0)
}

/// Corrupts the source with schedule-controlled Gaussian noise:
/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`.
pub fn noise_augment(
    x0: &Tensor,
    cfg: &NoiseAugConfig,
    rng: &mut RngStream,
) -> Result<Tensor, PathError> {
    if cfg.t_aug > cfg.total_steps {
        return Err(PathError::NoiseStepOutOfRange {
            t: cfg.t_aug,
            total: cfg.total_steps,
        });
    }
    if cfg.t_aug == 0 {
        // alpha_bar(0) = 1 exactly: the source passes through untouched.
        return Ok(x0.clone());
    }
    let ab = alpha_bar(cfg.t_aug, cfg.total_steps, cfg.offset);
    let eps = Tensor::gaussian(x0.shape().to_vec(), rng)?;
    Ok(x0
        .scale(ab.sqrt() as f32)
        .add(&eps.scale((1.0 - ab).sqrt() as f32))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 0);
        Tensor::gaussian(shape, &mut rng).unwrap()
    }

    #[test]
    fn naive_point_endpoints() {
        let x0 = rand(vec![8], 1);
        let x1 = rand(vec![8], 2);
        assert_eq!(naive_point(&x0, &x1, 0.0, 0.1).unwrap(), x0);
        // t = 1, sigma_min = 0: exactly x1.
        let end = naive_point(&x0, &x1, 1.0, 0.0).unwrap();
        for (a, b) in end.data().iter().zip(x1.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn naive_point_hand_value() {
        // x0 = 1, x1 = 2, t = 0.5, sigma_min = 0.1: 0.55 * 1 + 0.5 * 2 = 1.55.
        let x0 = Tensor::from_slice(&[1.0]);
        let x1 = Tensor::from_slice(&[2.0]);
        let v = naive_point(&x0, &x1, 0.5, 0.1).unwrap();
        assert!((v.data()[0] - 1.55).abs() < 1e-6);
    }

    #[test]
    fn naive_target_hand_value() {
        // x1 = 2, x = 1, t = 0.5, sigma_min = 0.1: (2 - 0.9) / 0.55 = 2.0.
        let x = Tensor::from_slice(&[1.0]);
        let x1 = Tensor::from_slice(&[2.0]);
        let u = naive_target(&x, &x1, 0.5, 0.1).unwrap();
        assert!((u.data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn naive_target_at_zero_time() {
        let x = rand(vec![6], 3);
        let x1 = rand(vec![6], 4);
        let u = naive_target(&x, &x1, 0.0, 0.2).unwrap();
        for i in 0..6 {
            let want = x1.data()[i] - 0.8 * x.data()[i];
            assert!((u.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn naive_target_reduces_to_displacement_on_path() {
        // With sigma_min = 0 and x on the path, u = x1 - x0 for all t.
        let x0 = rand(vec![10], 5);
        let x1 = rand(vec![10], 6);
        for &t in &[0.0, 0.25, 0.5, 0.75, 0.9] {
            let x = naive_point(&x0, &x1, t, 0.0).unwrap();
            let u = naive_target(&x, &x1, t, 0.0).unwrap();
            for i in 0..10 {
                let want = x1.data()[i] - x0.data()[i];
                assert!(
                    (u.data()[i] - want).abs() < 2e-5,
                    "t={t} i={i}: {} vs {want}",
                    u.data()[i]
                );
            }
        }
    }

    #[test]
    fn naive_target_denominator_guard() {
        let x = rand(vec![4], 7);
        let x1 = rand(vec![4], 8);
        assert!(matches!(
            naive_target(&x, &x1, 1.0, 0.0),
            Err(PathError::DenominatorUnderflow(_))
        ));
    }

    #[test]
    fn coupled_endpoints_bit_exact() {
        let x0 = rand(vec![4, 3, 3], 9);
        let x1 = rand(vec![4, 3, 3], 10);
        let mut rng = RngStream::new(0, 0);
        let s0 = coupled_sample(&x0, &x1, 0.0, 0.0, &mut rng).unwrap();
        let s1 = coupled_sample(&x0, &x1, 1.0, 0.0, &mut rng).unwrap();
        // scale(1)*x + scale(0)*y adds exact zeros, so equality is bitwise.
        assert_eq!(s0.x_t, x0);
        assert_eq!(s1.x_t, x1);
        assert_eq!(s0.z, x0);
    }

    #[test]
    fn coupled_midpoint_values() {
        let x0 = Tensor::from_slice(&[0.0, 0.0]);
        let x1 = Tensor::from_slice(&[2.0, 4.0]);
        let mut rng = RngStream::new(0, 0);
        let s = coupled_sample(&x0, &x1, 0.5, 0.0, &mut rng).unwrap();
        assert_eq!(s.x_t.data(), &[1.0, 2.0]);
        assert_eq!(s.u_target.data(), &[2.0, 4.0]);
    }

    #[test]
    fn coupled_target_constant_in_t() {
        let x0 = rand(vec![16], 11);
        let x1 = rand(vec![16], 12);
        let mut rng = RngStream::new(1, 0);
        let want = x1.sub(&x0).unwrap();
        for k in 0..10 {
            let t = (k as f64 + 0.5) / 10.0;
            let s = coupled_sample(&x0, &x1, t, 1e-4, &mut rng).unwrap();
            assert_eq!(s.u_target, want);
        }
    }

    #[test]
    fn coupled_path_derivative_matches_target() {
        // Central difference of the interpolant in f64 equals x1 - x0.
        let x0 = rand(vec![8], 13);
        let x1 = rand(vec![8], 14);
        let h = 1e-5;
        for &t in &[0.2, 0.5, 0.8] {
            for i in 0..8 {
                let phi = |tt: f64| -> f64 {
                    tt * x1.data()[i] as f64 + (1.0 - tt) * x0.data()[i] as f64
                };
                let numeric = (phi(t + h) - phi(t - h)) / (2.0 * h);
                let want = x1.data()[i] as f64 - x0.data()[i] as f64;
                assert!((numeric - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_coupling_is_static() {
        let x0 = rand(vec![12], 15);
        let mut rng = RngStream::new(2, 0);
        for &t in &[0.0, 0.3, 1.0] {
            let s = coupled_sample(&x0, &x0, t, 0.0, &mut rng).unwrap();
            assert!(s.u_target.data().iter().all(|&v| v == 0.0));
            for (a, b) in s.x_t.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fm_loss_values() {
        let u = rand(vec![32], 16);
        assert_eq!(fm_loss(&u, &u).unwrap(), 0.0);
        let offset = u.map(|v| v + 0.5);
        let l = fm_loss(&offset, &u).unwrap();
        assert!((l - 0.25).abs() < 1e-6);
    }

    #[test]
    fn fm_loss_matches_scalar_loop() {
        let a = rand(vec![7, 3], 17);
        let b = rand(vec![7, 3], 18);
        let mut acc = 0.0f64;
        for i in 0..21 {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            acc += d * d;
        }
        let want = acc / 21.0;
        assert!((fm_loss(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn alpha_bar_schedule_shape() {
        assert_eq!(alpha_bar(0, 1000, 0.008), 1.0);
        let mut prev = 1.0;
        for t in 1..=1000 {
            let ab = alpha_bar(t, 1000, 0.008);
            assert!(ab <= prev + 1e-12, "not non-increasing at {t}");
            assert!(ab >= 0.0);
            prev = ab;
        }
        assert!(alpha_bar(1000, 1000, 0.008) < 1e-3);
    }

    #[test]
    fn noise_augment_identity_at_zero() {
        let x0 = rand(vec![4, 4], 19);
        let mut rng = RngStream::new(3, 0);
        let cfg = NoiseAugConfig::new(0, 1000);
        assert_eq!(noise_augment(&x0, &cfg, &mut rng).unwrap(), x0);
    }

    #[test]
    fn noise_augment_full_decorrelates() {
        let x0 = rand(vec![4096], 20);
        let mut rng = RngStream::new(4, 0);
        let cfg = NoiseAugConfig::new(1000, 1000);
        let y = noise_augment(&x0, &cfg, &mut rng).unwrap();
        // Sample correlation with the source is tiny at full noise.
        let mx = x0.mean();
        let my = y.mean();
        let (mut sxy, mut sxx, mut syy) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..x0.len() {
            let dx = x0.data()[i] as f64 - mx;
            let dy = y.data()[i] as f64 - my;
            sxy += dx * dy;
            sxx += dx * dx;
            syy += dy * dy;
        }
        let corr = sxy / (sxx.sqrt() * syy.sqrt());
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn noise_augment_out_of_range() {
        let x0 = rand(vec![4], 21);
        let mut rng = RngStream::new(5, 0);
        let cfg = NoiseAugConfig::new(1001, 1000);
        assert!(matches!(
            noise_augment(&x0, &cfg, &mut rng),
            Err(PathError::NoiseStepOutOfRange { .. })
        ));
    }

    #[test]
    fn noise_augment_preserves_shape() {
        let x0 = rand(vec![4, 8, 8], 22);
        let mut rng = RngStream::new(6, 0);
        let cfg = NoiseAugConfig::default();
        assert_eq!(cfg.t_aug, 400);
        let y = noise_augment(&x0, &cfg, &mut rng).unwrap();
        assert_eq!(y.shape(), x0.shape());
    }
}
