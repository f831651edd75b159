//! Quantitative evaluation: PSNR, SSIM, the Frechet feature distance (FFD)
//! over a fixed random-feature embedding, and its patch variant.
//!
//! FFD numbers are comparable only across runs of this artifact: the
//! embedding is a fixed-seed random conv stack, not a pretrained network,
//! and the extractor seed is versioned below.

use std::path::Path;

use thiserror::Error;

use crate::linalg::{jacobi_eigen, MatF64};
use crate::tensor::{RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image sets must be non-empty")]
    EmptySet,
    #[error("image {h}x{w} smaller than required {need}")]
    ImageTooSmall { h: usize, w: usize, need: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error on line {line}: {message}")]
    CsvParse { line: usize, message: String },
}

/// PSNR in dB, capped at 99. The identity case hits the cap exactly.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64, MetricError> {
    let mse = a.mse(b)?;
    Ok(psnr_from_mse(mse, peak))
}

/// `20 log10(peak) - 10 log10(mse)`, capped at 99 dB; `mse = 0` maps to the cap.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return 99.0;
    }
    (20.0 * peak.log10() - 10.0 * mse.log10()).min(99.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Horizontal then vertical valid-region filtering with the separable window.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for k in 0..SSIM_WINDOW {
                acc += win[k] * img[y * w + x + k];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for k in 0..SSIM_WINDOW {
                acc += win[k] * tmp[(y + k) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean local SSIM over valid 11x11 windows (Gaussian sigma 1.5, K1 = 0.01,
/// K2 = 0.03, dynamic range 1), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Tensor(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall {
            h,
            w,
            need: SSIM_WINDOW,
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let aa: Vec<f64> = pa.iter().map(|&v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|&v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(&x, &y)| x * y).collect();

        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let m_aa = filter_valid(&aa, h, w, &win);
        let m_bb = filter_valid(&bb, h, w, &win);
        let m_ab = filter_valid(&ab, h, w, &win);

        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Versioned seed of the fixed random-feature embedding behind FFD.
pub const FEATURE_SEED: u64 = 0xFEA7_0001;
pub const FEATURE_DIM: usize = 64;

struct ConvLayer {
    w: Vec<f32>,
    b: Vec<f32>,
    cin: usize,
    cout: usize,
}

/// Three stride-2 tanh conv layers with frozen seeded weights, global
/// average pooled to a 64-dim vector. Same image, same features, always.
pub struct FeatureExtractor {
    layers: Vec<ConvLayer>,
    in_channels: usize,
}

impl FeatureExtractor {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let widths = [in_channels, 16, 32, FEATURE_DIM];
        let mut rng = RngStream::new(seed, 0);
        let layers = (0..3)
            .map(|l| {
                let (cin, cout) = (widths[l], widths[l + 1]);
                let std = 1.0 / ((cin * 9) as f64).sqrt();
                let w = (0..cout * cin * 9)
                    .map(|_| (rng.normal_f64() * std) as f32)
                    .collect();
                let b = (0..cout).map(|_| (rng.normal_f64() * 0.1) as f32).collect();
                ConvLayer { w, b, cin, cout }
            })
            .collect();
        Self {
            layers,
            in_channels,
        }
    }

    pub fn with_default_seed(in_channels: usize) -> Self {
        Self::new(in_channels, FEATURE_SEED)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Embeds one `(c, h, w)` image into the 64-dim feature space.
    pub fn extract(&self, img: &Tensor) -> Result<Vec<f64>, MetricError> {
        if img.rank() != 3 || img.shape()[0] != self.in_channels {
            return Err(MetricError::Tensor(TensorError::ShapeMismatch {
                left: img.shape().to_vec(),
                right: vec![self.in_channels, 0, 0],
            }));
        }
        let mut data: Vec<f32> = img.data().to_vec();
        let mut h = img.shape()[1];
        let mut w = img.shape()[2];
        for layer in &self.layers {
            let ho = h.div_ceil(2);
            let wo = w.div_ceil(2);
            let mut out = vec![0.0f32; layer.cout * ho * wo];
            for co in 0..layer.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = layer.b[co] as f64;
                        for ci in 0..layer.cin {
                            for ky in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let wv =
                                        layer.w[((co * layer.cin + ci) * 3 + ky) * 3 + kx] as f64;
                                    acc += wv
                                        * data[(ci * h + iy as usize) * w + ix as usize] as f64;
                                }
                            }
                        }
                        out[(co * ho + oy) * wo + ox] = acc.tanh() as f32;
                    }
                }
            }
            data = out;
            h = ho;
            w = wo;
        }
        // Global average pool in f64.
        let hw = (h * w) as f64;
        Ok((0..FEATURE_DIM)
            .map(|c| {
                data[c * h * w..(c + 1) * h * w]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / hw
            })
            .collect())
    }
}

/// Gaussian fit of a feature set: mean and (shrunk) covariance.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: MatF64,
    pub n: usize,
}

/// Baseline diagonal shrinkage applied to every covariance.
pub const COV_SHRINKAGE: f64 = 1e-6;
/// Sample count below which the stronger small-sample shrinkage kicks in.
pub const SMALL_SAMPLE_N: usize = 65;
const SMALL_SAMPLE_SHRINKAGE: f64 = 1e-3;

impl GaussianStats {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self, MetricError> {
        if features.is_empty() {
            return Err(MetricError::EmptySet);
        }
        let d = features[0].len();
        let n = features.len();
        let mut mean = vec![0.0f64; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = MatF64::zeros(d);
        if n > 1 {
            for f in features {
                for i in 0..d {
                    let di = f[i] - mean[i];
                    for j in i..d {
                        cov.data[i * d + j] += di * (f[j] - mean[j]);
                    }
                }
            }
            let denom = (n - 1) as f64;
            for i in 0..d {
                for j in i..d {
                    let v = cov.data[i * d + j] / denom;
                    cov.data[i * d + j] = v;
                    cov.data[j * d + i] = v;
                }
            }
        }
        // Shrinkage keeps the square root well conditioned; small sets get a
        // stronger diagonal.
        let mut lambda = COV_SHRINKAGE;
        if n < SMALL_SAMPLE_N {
            let mean_diag = cov.trace() / d as f64;
            lambda += SMALL_SAMPLE_SHRINKAGE * mean_diag.max(1e-12);
        }
        for i in 0..d {
            cov.data[i * d + i] += lambda;
        }
        Ok(Self { mean, cov, n })
    }
}

/// Frechet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`,
/// eigenvalues clamped at zero, result clamped at zero.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let d = a.mean.len();
    let mut dist = 0.0f64;
    for i in 0..d {
        let diff = a.mean[i] - b.mean[i];
        dist += diff * diff;
    }

    // Sa^(1/2) via symmetric eigendecomposition, negative modes clamped.
    let (vals_a, vecs_a) = jacobi_eigen(&a.cov);
    let mut sqrt_a = MatF64::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += vecs_a.get(i, k) * vals_a[k].max(0.0).sqrt() * vecs_a.get(j, k);
            }
            sqrt_a.set(i, j, acc);
        }
    }
    let inner = sqrt_a.matmul(&b.cov).matmul(&sqrt_a).symmetrize();
    let (vals_s, _) = jacobi_eigen(&inner);
    let tr_sqrt: f64 = vals_s.iter().map(|&l| l.max(0.0).sqrt()).sum();

    dist += a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    dist.max(0.0)
}

fn features_of_set(
    extractor: &FeatureExtractor,
    set: &[Tensor],
) -> Result<Vec<Vec<f64>>, MetricError> {
    if set.is_empty() {
        return Err(MetricError::EmptySet);
    }
    set.iter().map(|img| extractor.extract(img)).collect()
}

/// Frechet feature distance between two image sets under an extractor.
pub fn ffd_with(
    extractor: &FeatureExtractor,
    set_a: &[Tensor],
    set_b: &[Tensor],
) -> Result<f64, MetricError> {
    let fa = features_of_set(extractor, set_a)?;
    let fb = features_of_set(extractor, set_b)?;
    let sa = GaussianStats::fit(&fa)?;
    let sb = GaussianStats::fit(&fb)?;
    Ok(frechet_distance(&sa, &sb))
}

/// FFD with the default versioned extractor for the sets' channel count.
pub fn ffd(set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64, MetricError> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let extractor = FeatureExtractor::with_default_seed(set_a[0].shape()[0]);
    ffd_with(&extractor, set_a, set_b)
}

const PATCH_SALT: u64 = 0x9A7C_0001;

fn crop_patches(
    set: &[Tensor],
    patch: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vec<Tensor>, MetricError> {
    let mut out = Vec::with_capacity(set.len() * per_image);
    for (idx, img) in set.iter().enumerate() {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        if h < patch || w < patch {
            return Err(MetricError::ImageTooSmall {
                h,
                w,
                need: patch,
            });
        }
        let mut rng = RngStream::new(seed, PATCH_SALT ^ (idx as u64).wrapping_mul(2));
        for _ in 0..per_image {
            let oy = rng.next_below((h - patch + 1) as u64) as usize;
            let ox = rng.next_below((w - patch + 1) as u64) as usize;
            let mut data = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + oy + y) * w + ox;
                    data.extend_from_slice(&img.data()[row..row + patch]);
                }
            }
            out.push(Tensor::new(vec![c, patch, patch], data)?);
        }
    }
    Ok(out)
}

/// FFD over seeded random crops: per-image crop positions depend only on
/// (seed, image index), so identical sets give identical patch sets.
pub fn patch_ffd(
    set_a: &[Tensor],
    set_b: &[Tensor],
    patch: usize,
    per_image: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let pa = crop_patches(set_a, patch, per_image, seed)?;
    let pb = crop_patches(set_b, patch, per_image, seed)?;
    let extractor = FeatureExtractor::with_default_seed(set_a[0].shape()[0]);
    ffd_with(&extractor, &pa, &pb)
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub set_a: String,
    pub set_b: String,
    pub n: usize,
    pub seed: u64,
}

/// Named scalar metrics over a sample set, serializable to CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, metric: impl Into<String>, value: f64, set_a: &str, set_b: &str, n: usize, seed: u64) {
        self.rows.push(MetricRow {
            metric: metric.into(),
            value,
            set_a: set_a.to_string(),
            set_b: set_b.to_string(),
            n,
            seed,
        });
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,set_a,set_b,n,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.metric, r.value, r.set_a, r.set_b, r.n, r.seed
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self, MetricError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "metric,value,set_a,set_b,n,seed" {
                    return Err(MetricError::CsvParse {
                        line: 1,
                        message: format!("unexpected header {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(MetricError::CsvParse {
                    line: i + 1,
                    message: format!("expected 6 fields, got {}", parts.len()),
                });
            }
            let parse_err = |message: String| MetricError::CsvParse {
                line: i + 1,
                message,
            };
            rows.push(MetricRow {
                metric: parts[0].to_string(),
                value: parts[1]
                    .parse()
                    .map_err(|e| parse_err(format!("bad value: {e}")))?,
                set_a: parts[2].to_string(),
                set_b: parts[3].to_string(),
                n: parts[4]
                    .parse()
                    .map_err(|e| parse_err(format!("bad n: {e}")))?,
                seed: parts[5]
                    .parse()
                    .map_err(|e| parse_err(format!("bad seed: {e}")))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::box_downsample;
    use crate::tensor::RngStream;

    fn rand_img(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 0);
        Tensor::gaussian(vec![c, h, w], &mut rng)
            .unwrap()
            .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
    }

    #[test]
    fn psnr_identity_caps() {
        let x = rand_img(1, 16, 16, 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
    }

    #[test]
    fn psnr_twenty_db() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let a = rand_img(1, 8, 8, 2);
        let b = rand_img(1, 8, 8, 3);
        let mut acc = 0.0f64;
        for i in 0..64 {
            let d = a.data()[i] as f64 - b.data()[i] as f64;
            acc += d * d;
        }
        let want = 10.0 * (1.0 / (acc / 64.0)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = rand_img(1, 16, 16, 4);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_inverted_structure_is_negative() {
        // Binary image and its inverse: structure anti-correlated.
        let mut data = vec![0.0f32; 16 * 16];
        for y in 0..16 {
            for x in 0..16 {
                if (x / 2 + y / 2) % 2 == 0 {
                    data[y * 16 + x] = 1.0;
                }
            }
        }
        let a = Tensor::new(vec![1, 16, 16], data.clone()).unwrap();
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_constants_luminance_only() {
        // Constant images: variance terms vanish, only luminance remains:
        // (2 m1 m2 + C1) / (m1^2 + m2^2 + C1).
        let a = Tensor::full(vec![1, 16, 16], 0.3).unwrap();
        let b = Tensor::full(vec![1, 16, 16], 0.6).unwrap();
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * 0.3 * 0.6 + c1) / (0.3f64 * 0.3 + 0.6 * 0.6 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 2e-4);
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // Independent direct per-window implementation with 2-d weights.
        let a = rand_img(1, 14, 14, 5);
        let b = rand_img(1, 14, 14, 6);
        let win1d = gaussian_window();
        let mut w2 = [[0.0f64; 11]; 11];
        for i in 0..11 {
            for j in 0..11 {
                w2[i][j] = win1d[i] * win1d[j];
            }
        }
        let c1 = 0.01f64 * 0.01;
        let c2 = 0.03f64 * 0.03;
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..4 {
            for ox in 0..4 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let va = a.data()[(oy + i) * 14 + ox + j] as f64;
                        let vb = b.data()[(oy + i) * 14 + ox + j] as f64;
                        let wt = w2[i][j];
                        ma += wt * va;
                        mb += wt * vb;
                        maa += wt * va * va;
                        mbb += wt * vb * vb;
                        mab += wt * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let want = total / count as f64;
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = rand_img(1, 8, 8, 7);
        assert!(matches!(
            ssim(&a, &a),
            Err(MetricError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn extractor_deterministic() {
        let e1 = FeatureExtractor::with_default_seed(1);
        let e2 = FeatureExtractor::with_default_seed(1);
        let img = rand_img(1, 32, 32, 8);
        assert_eq!(e1.extract(&img).unwrap(), e2.extract(&img).unwrap());
    }

    #[test]
    fn ffd_self_is_zero() {
        let set: Vec<Tensor> = (0..8).map(|i| rand_img(1, 16, 16, 100 + i)).collect();
        let d = ffd(&set, &set).unwrap();
        assert!(d.abs() < 1e-5, "ffd(S,S) = {d}");
    }

    #[test]
    fn ffd_symmetry() {
        let sa: Vec<Tensor> = (0..10).map(|i| rand_img(1, 16, 16, 200 + i)).collect();
        let sb: Vec<Tensor> = (0..10).map(|i| rand_img(1, 16, 16, 300 + i)).collect();
        let ab = ffd(&sa, &sb).unwrap();
        let ba = ffd(&sb, &sa).unwrap();
        assert!((ab - ba).abs() < 1e-5);
        assert!(ab >= 0.0);
    }

    #[test]
    fn frechet_mean_offset_only() {
        // Equal covariances: the trace term cancels, leaving |d|^2.
        let d = 64;
        let mut cov = MatF64::identity(d);
        for i in 0..d {
            cov.data[i * d + i] = 0.5 + (i as f64) / d as f64;
        }
        let mean_a = vec![0.0; d];
        let mut mean_b = vec![0.0; d];
        mean_b[0] = 0.3;
        mean_b[5] = -0.4;
        let a = GaussianStats {
            mean: mean_a,
            cov: cov.clone(),
            n: 100,
        };
        let b = GaussianStats {
            mean: mean_b,
            cov,
            n: 100,
        };
        let want = 0.3f64 * 0.3 + 0.4 * 0.4;
        let got = frechet_distance(&a, &b);
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
    }

    #[test]
    fn empty_set_rejected() {
        let set: Vec<Tensor> = vec![rand_img(1, 16, 16, 1)];
        assert!(matches!(ffd(&[], &set), Err(MetricError::EmptySet)));
    }

    #[test]
    fn patch_ffd_identical_sets_zero() {
        let set: Vec<Tensor> = (0..6).map(|i| rand_img(1, 48, 48, 400 + i)).collect();
        let d = patch_ffd(&set, &set, 32, 4, 7).unwrap();
        assert!(d.abs() < 1e-5);
        // Deterministic under a fixed seed.
        let sb: Vec<Tensor> = (0..6).map(|i| rand_img(1, 48, 48, 500 + i)).collect();
        let d1 = patch_ffd(&set, &sb, 32, 4, 7).unwrap();
        let d2 = patch_ffd(&set, &sb, 32, 4, 7).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn patch_ffd_detects_blur() {
        // Blurred versions of sharp textures sit farther from a sharp set
        // than an i.i.d. sharp sample does.
        let sharp: Vec<Tensor> = (0..24).map(|i| rand_img(1, 48, 48, 600 + i)).collect();
        let sharp2: Vec<Tensor> = (0..24).map(|i| rand_img(1, 48, 48, 700 + i)).collect();
        let blur: Vec<Tensor> = sharp2
            .iter()
            .map(|img| {
                // 4x box-filter then nearest-upsample back: detail destroyed.
                let low = box_downsample(img, 4).unwrap();
                crate::codec::upsample(&low, 4, crate::codec::UpsampleMethod::Nearest).unwrap()
            })
            .collect();
        let d_blur = patch_ffd(&blur, &sharp, 16, 4, 3).unwrap();
        let d_sharp = patch_ffd(&sharp2, &sharp, 16, 4, 3).unwrap();
        assert!(
            d_blur > d_sharp,
            "blur {d_blur} should exceed sharp {d_sharp}"
        );
    }

    #[test]
    fn patch_too_small_image_rejected() {
        let set: Vec<Tensor> = vec![rand_img(1, 16, 16, 1)];
        assert!(matches!(
            patch_ffd(&set, &set, 32, 2, 1),
            Err(MetricError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn report_csv_round_trip() {
        let mut rep = MetricReport::default();
        rep.push("psnr", 31.4159, "model", "gt", 128, 42);
        rep.push("ssim", 0.87, "model", "gt", 128, 42);
        rep.push("ffd", 12.5e-3, "model", "gt", 128, 42);
        let text = rep.to_csv();
        let back = MetricReport::parse_csv(&text).unwrap();
        assert_eq!(back, rep);
    }
}
