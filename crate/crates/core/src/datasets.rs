//! Procedural, seeded datasets: coupled (low, high) texture pairs, a
//! bimodal-completion set whose modes share one low-res image bit-exactly,
//! and a 2-d point-cloud toy with a closed-form displacement field.
//!
//! Every generator is a pure function of (seed, index); samples draw from
//! disjoint RNG streams so generation order and parallelism cannot change
//! the data.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{RngStream, Tensor, TensorError, TensorIoError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image size {h} not divisible by factor {f}")]
    SizeNotDivisible { h: usize, f: usize },
    #[error("factor {f} not divisible by stripe period {period}")]
    StripePeriod { f: usize, period: usize },
    #[error("sample count must be >= 1")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("tensor io: {0}")]
    TensorIo(#[from] TensorIoError),
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error on line {line}: {message}")]
    ManifestParse { line: usize, message: String },
}

/// One coupled training pair; `low` is exactly the box-filtered `high`.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub high: Tensor,
    pub low: Tensor,
    pub factor: usize,
    pub seed: u64,
    pub index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

/// A paired sample carrying its completion mode; both modes of one base
/// seed share an identical low tensor by construction.
#[derive(Debug, Clone)]
pub struct BimodalSample {
    pub sample: PairedSample,
    pub mode: Mode,
}

/// A coupled point pair from the 2-d toy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyPair {
    pub x0: [f32; 2],
    pub x1: [f32; 2],
}

impl ToyPair {
    pub fn x0_tensor(&self) -> Tensor {
        Tensor::new(vec![2, 1, 1], self.x0.to_vec()).unwrap()
    }

    pub fn x1_tensor(&self) -> Tensor {
        Tensor::new(vec![2, 1, 1], self.x1.to_vec()).unwrap()
    }

    /// Closed-form displacement of the fixed rotation-plus-offset coupling.
    pub fn displacement(&self) -> [f32; 2] {
        [self.x1[0] - self.x0[0], self.x1[1] - self.x0[1]]
    }
}

/// Toy coupling constants: `x1 = R(TOY_ANGLE) x0 + TOY_OFFSET`.
pub const TOY_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
pub const TOY_OFFSET: [f64; 2] = [0.5, -0.3];

/// Exact area-average downsampling by an integer factor; block sums are
/// accumulated in f64 and divided by the (power-of-two) block size.
pub fn box_downsample(high: &Tensor, factor: usize) -> Result<Tensor, DatasetError> {
    let (c, h, w) = (high.shape()[0], high.shape()[1], high.shape()[2]);
    if h % factor != 0 || w % factor != 0 {
        return Err(DatasetError::SizeNotDivisible { h, f: factor });
    }
    let (hl, wl) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; c * hl * wl];
    for ch in 0..c {
        for y in 0..hl {
            for x in 0..wl {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    let row = (ch * h + y * factor + dy) * w + x * factor;
                    for dx in 0..factor {
                        acc += high.data()[row + dx] as f64;
                    }
                }
                out[(ch * hl + y) * wl + x] = (acc * inv) as f32;
            }
        }
    }
    Ok(Tensor::new(vec![c, hl, wl], out)?)
}

// Stream salts keep the per-sample substreams of the three generators
// disjoint from each other and from training streams.
const TEXTURE_SALT: u64 = 0x7458_0001;
const BIMODAL_SALT: u64 = 0x7458_0002;
const TOY_SALT: u64 = 0x7458_0003;

/// Band-limited field: white noise on a coarse grid, bilinearly upsampled.
fn smooth_field(size: usize, coarse: usize, amp: f64, rng: &mut RngStream) -> Vec<f64> {
    let coarse = coarse.max(2).min(size);
    let mut grid = vec![0.0f64; coarse * coarse];
    for v in grid.iter_mut() {
        *v = rng.normal_f64() * amp;
    }
    let mut out = vec![0.0f64; size * size];
    let scale = coarse as f64 / size as f64;
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (coarse - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(coarse - 1);
        let fy = sy - y0 as f64;
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (coarse - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(coarse - 1);
            let fx = sx - x0 as f64;
            let top = grid[y0 * coarse + x0] * (1.0 - fx) + grid[y0 * coarse + x1] * fx;
            let bot = grid[y1 * coarse + x0] * (1.0 - fx) + grid[y1 * coarse + x1] * fx;
            out[y * size + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn texture_image(size: usize, rng: &mut RngStream) -> Tensor {
    let mut img = smooth_field(size, size / 8, 0.35, rng);
    for v in img.iter_mut() {
        *v += 0.5;
    }

    // A few random disks.
    let n_disks = 1 + rng.next_below(3) as usize;
    for _ in 0..n_disks {
        let cx = rng.next_f64() * size as f64;
        let cy = rng.next_f64() * size as f64;
        let r = size as f64 * (0.08 + 0.17 * rng.next_f64());
        let amp = (rng.next_f64() - 0.5) * 0.8;
        let r2 = r * r;
        for y in 0..size {
            let dy = y as f64 - cy;
            for x in 0..size {
                let dx = x as f64 - cx;
                if dx * dx + dy * dy <= r2 {
                    img[y * size + x] += amp;
                }
            }
        }
    }

    // One sinusoidal grating with random orientation and period.
    let period = [4.0, 8.0, 16.0][rng.next_below(3) as usize];
    let theta = rng.next_f64() * std::f64::consts::PI;
    let (s, c) = theta.sin_cos();
    let amp = 0.08 + 0.12 * rng.next_f64();
    let k = 2.0 * std::f64::consts::PI / period;
    for y in 0..size {
        for x in 0..size {
            let u = c * x as f64 + s * y as f64;
            img[y * size + x] += amp * (k * u).sin();
        }
    }

    let data: Vec<f32> = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(vec![1, size, size], data).unwrap()
}

/// Seeded texture pairs: band-limited fields plus geometric primitives,
/// clipped to [0,1], coupled to their exact box-downsampled lows.
pub fn gen_texture(
    seed: u64,
    n: usize,
    size: usize,
    factor: usize,
) -> Result<Vec<PairedSample>, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    if !size.is_multiple_of(factor) {
        return Err(DatasetError::SizeNotDivisible { h: size, f: factor });
    }
    (0..n as u64)
        .map(|index| {
            let mut rng = RngStream::new(seed, TEXTURE_SALT ^ index.wrapping_mul(2));
            let high = texture_image(size, &mut rng);
            let low = box_downsample(&high, factor)?;
            Ok(PairedSample {
                high,
                low,
                factor,
                seed,
                index,
            })
        })
        .collect()
}

/// Stripe amplitude of the bimodal set; the two completions of one base
/// differ by `2 * BIMODAL_AMP` at every pixel.
pub const BIMODAL_AMP: f32 = 0.25;
const BIMODAL_STRIPE_PERIOD: usize = 2;

/// Seeded bimodal pairs. Each base image produces two completions: a
/// column-stripe pattern at phase 0 (mode A) or phase 1 (mode B). The stripe
/// period divides the factor, so box downsampling cancels the stripes and
/// both modes share a bit-identical low tensor. Mode labels alternate, so
/// they are balanced exactly for even `n`.
pub fn gen_bimodal(
    seed: u64,
    n: usize,
    size: usize,
    factor: usize,
) -> Result<Vec<BimodalSample>, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    if !size.is_multiple_of(factor) {
        return Err(DatasetError::SizeNotDivisible { h: size, f: factor });
    }
    if !factor.is_multiple_of(BIMODAL_STRIPE_PERIOD) {
        return Err(DatasetError::StripePeriod {
            f: factor,
            period: BIMODAL_STRIPE_PERIOD,
        });
    }
    (0..n as u64)
        .map(|index| {
            let base_index = index / 2;
            let mode = if index % 2 == 0 { Mode::A } else { Mode::B };
            // The base image depends only on base_index: A/B pairs share it.
            let mut rng = RngStream::new(seed, BIMODAL_SALT ^ base_index.wrapping_mul(2));
            let low_size = size / factor;
            let mut base = smooth_field(low_size, low_size / 2, 0.12, &mut rng);
            for v in base.iter_mut() {
                *v = (0.5 + *v).clamp(0.3, 0.7);
            }
            // Nearest-upsample the base, then add the phase stripe. Values
            // stay inside [0.05, 0.95]: no clipping, so the cancellation
            // under the box filter is exact.
            let mut high = vec![0.0f32; size * size];
            for y in 0..size {
                for x in 0..size {
                    let b = base[(y / factor) * low_size + x / factor] as f32;
                    let phase = match mode {
                        Mode::A => x % 2,
                        Mode::B => (x + 1) % 2,
                    };
                    let stripe = if phase == 0 { BIMODAL_AMP } else { -BIMODAL_AMP };
                    high[y * size + x] = b + stripe;
                }
            }
            let high = Tensor::new(vec![1, size, size], high)?;
            let low = box_downsample(&high, factor)?;
            Ok(BimodalSample {
                sample: PairedSample {
                    high,
                    low,
                    factor,
                    seed,
                    index,
                },
                mode,
            })
        })
        .collect()
}

/// Ring-to-ring toy coupling: `x0` on a noisy unit ring, `x1` its image
/// under the fixed rotation-plus-offset map.
pub fn gen_2d_toy(seed: u64, n: usize) -> Result<Vec<ToyPair>, DatasetError> {
    if n == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let (sa, ca) = TOY_ANGLE.sin_cos();
    Ok((0..n as u64)
        .map(|index| {
            let mut rng = RngStream::new(seed, TOY_SALT ^ index.wrapping_mul(2));
            let theta = rng.next_f64() * 2.0 * std::f64::consts::PI;
            let radius = 1.0 + 0.1 * rng.normal_f64();
            let x0 = [radius * theta.cos(), radius * theta.sin()];
            let x1 = [
                ca * x0[0] - sa * x0[1] + TOY_OFFSET[0],
                sa * x0[0] + ca * x0[1] + TOY_OFFSET[1],
            ];
            ToyPair {
                x0: [x0[0] as f32, x0[1] as f32],
                x1: [x1[0] as f32, x1[1] as f32],
            }
        })
        .collect())
}

/// One manifest line per sample in a JSON-lines split file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub factor: usize,
    pub high: String,
    pub low: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::ManifestParse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
