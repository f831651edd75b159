//! Fixed analytic latent codec and the latent/pixel upsampling operations.
//!
//! The codec is an invertible space-to-depth rearrangement followed by an
//! orthogonal per-pixel channel mix, so `decode(encode(x))` reconstructs `x`
//! to f32 rounding at any resolution divisible by the patch size. Pixel-space
//! upsampling (`psu`) is, by definition, `encode . bilinear . decode`.

use thiserror::Error;

use crate::linalg::{orthonormalize, MatF64};
use crate::tensor::{RngStream, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("spatial dims {h}x{w} not divisible by patch size {patch}")]
    NotDivisible { h: usize, w: usize, patch: usize },
    #[error("expected {want} channels, got shape {got:?}")]
    ChannelMismatch { want: usize, got: Vec<usize> },
    #[error("tensor must be rank 3 (c, h, w), got shape {0:?}")]
    BadRank(Vec<usize>),
    #[error("upsample factor must be >= 2, got {0}")]
    BadFactor(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Latent upsampling strategies compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMethod {
    Nearest,
    Bilinear,
}

/// Orthogonal patch codec standing in for a learned autoencoder.
///
/// `E` maps `(c, h, w)` images to `(p*p*c, h/p, w/p)` latents; `D` is its
/// exact inverse.
#[derive(Debug, Clone)]
pub struct PatchCodec {
    patch: usize,
    channels_img: usize,
    seed: u64,
    /// Row-major (d, d) with d = patch^2 * channels_img; orthogonal.
    mix: Vec<f32>,
    /// Transpose of `mix`, i.e. the inverse.
    mix_t: Vec<f32>,
    dim: usize,
}

impl PatchCodec {
    /// Builds the codec from a seed: the mixing matrix is the orthonormalized
    /// seeded Gaussian matrix, so identical seeds give identical codecs.
    pub fn new(patch: usize, channels_img: usize, seed: u64) -> Self {
        assert!(patch >= 1 && channels_img >= 1);
        let dim = patch * patch * channels_img;
        let mut rng = RngStream::new(seed, 0);
        let mut raw = MatF64::zeros(dim);
        for v in raw.data.iter_mut() {
            *v = rng.normal_f64();
        }
        let q = orthonormalize(&raw);
        let mix: Vec<f32> = q.data.iter().map(|&v| v as f32).collect();
        let mut mix_t = vec![0.0f32; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                mix_t[j * dim + i] = mix[i * dim + j];
            }
        }
        Self {
            patch,
            channels_img,
            seed,
            mix,
            mix_t,
            dim,
        }
    }

    /// The identity-mix codec: pure space-to-depth, useful in tests.
    pub fn identity(patch: usize, channels_img: usize) -> Self {
        let dim = patch * patch * channels_img;
        let mut mix = vec![0.0f32; dim * dim];
        for i in 0..dim {
            mix[i * dim + i] = 1.0;
        }
        Self {
            patch,
            channels_img,
            seed: 0,
            mix_t: mix.clone(),
            mix,
            dim,
        }
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels_img(&self) -> usize {
        self.channels_img
    }

    pub fn latent_channels(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mixing matrix entry (row, col) for verification.
    pub fn mix_entry(&self, row: usize, col: usize) -> f32 {
        self.mix[row * self.dim + col]
    }

    fn check_image(&self, img: &Tensor) -> Result<(usize, usize), CodecError> {
        if img.rank() != 3 {
            return Err(CodecError::BadRank(img.shape().to_vec()));
        }
        if img.shape()[0] != self.channels_img {
            return Err(CodecError::ChannelMismatch {
                want: self.channels_img,
                got: img.shape().to_vec(),
            });
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(CodecError::NotDivisible {
                h,
                w,
                patch: self.patch,
            });
        }
        Ok((h, w))
    }

    /// Space-to-depth then per-pixel orthogonal mix:
    /// `(c, h, w)` -> `(p^2 c, h/p, w/p)`.
    pub fn encode(&self, img: &Tensor) -> Result<Tensor, CodecError> {
        let (h, w) = self.check_image(img)?;
        let p = self.patch;
        let (hl, wl) = (h / p, w / p);
        let d = self.dim;
        let mut out = vec![0.0f32; d * hl * wl];
        let mut patch_vec = vec![0.0f32; d];
        for y in 0..hl {
            for x in 0..wl {
                // Gather: index order (channel, py, px).
                for c in 0..self.channels_img {
                    for py in 0..p {
                        for px in 0..p {
                            let v = img.data()[(c * h + y * p + py) * w + x * p + px];
                            patch_vec[(c * p + py) * p + px] = v;
                        }
                    }
                }
                for row in 0..d {
                    let wrow = &self.mix[row * d..(row + 1) * d];
                    let mut acc = 0.0f64;
                    for i in 0..d {
                        acc += wrow[i] as f64 * patch_vec[i] as f64;
                    }
                    out[(row * hl + y) * wl + x] = acc as f32;
                }
            }
        }
        Ok(Tensor::new(vec![d, hl, wl], out)?)
    }

    /// Exact inverse of [`encode`].
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor, CodecError> {
        if latent.rank() != 3 {
            return Err(CodecError::BadRank(latent.shape().to_vec()));
        }
        if latent.shape()[0] != self.dim {
            return Err(CodecError::ChannelMismatch {
                want: self.dim,
                got: latent.shape().to_vec(),
            });
        }
        let p = self.patch;
        let d = self.dim;
        let (hl, wl) = (latent.shape()[1], latent.shape()[2]);
        let (h, w) = (hl * p, wl * p);
        let mut out = vec![0.0f32; self.channels_img * h * w];
        let mut lat_vec = vec![0.0f32; d];
        for y in 0..hl {
            for x in 0..wl {
                for row in 0..d {
                    lat_vec[row] = latent.data()[(row * hl + y) * wl + x];
                }
                for i in 0..d {
                    let wcol = &self.mix_t[i * d..(i + 1) * d];
                    let mut acc = 0.0f64;
                    for row in 0..d {
                        acc += wcol[row] as f64 * lat_vec[row] as f64;
                    }
                    let c = i / (p * p);
                    let py = (i / p) % p;
                    let px = i % p;
                    out[(c * h + y * p + py) * w + x * p + px] = acc as f32;
                }
            }
        }
        Ok(Tensor::new(vec![self.channels_img, h, w], out)?)
    }
}

/// Integer-factor spatial upsampling of a `(c, h, w)` tensor.
/// Bilinear uses the align-corners=false sample grid.
pub fn upsample(x: &Tensor, factor: usize, method: UpsampleMethod) -> Result<Tensor, CodecError> {
    if x.rank() != 3 {
        return Err(CodecError::BadRank(x.shape().to_vec()));
    }
    if factor < 2 {
        return Err(CodecError::BadFactor(factor));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = vec![0.0f32; c * ho * wo];
    match method {
        UpsampleMethod::Nearest => {
            for ch in 0..c {
                for y in 0..ho {
                    let iy = y / factor;
                    let irow = (ch * h + iy) * w;
                    let orow = (ch * ho + y) * wo;
                    for xo in 0..wo {
                        out[orow + xo] = x.data()[irow + xo / factor];
                    }
                }
            }
        }
        UpsampleMethod::Bilinear => {
            let scale = 1.0 / factor as f64;
            for ch in 0..c {
                for y in 0..ho {
                    // Source coordinate under align-corners=false.
                    let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
                    let y0 = sy.floor() as usize;
                    let y1 = (y0 + 1).min(h - 1);
                    let fy = sy - y0 as f64;
                    let orow = (ch * ho + y) * wo;
                    for xo in 0..wo {
                        let sx = ((xo as f64 + 0.5) * scale - 0.5).clamp(0.0, (w - 1) as f64);
                        let x0 = sx.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let fx = sx - x0 as f64;
                        let v00 = x.data()[(ch * h + y0) * w + x0] as f64;
                        let v01 = x.data()[(ch * h + y0) * w + x1] as f64;
                        let v10 = x.data()[(ch * h + y1) * w + x0] as f64;
                        let v11 = x.data()[(ch * h + y1) * w + x1] as f64;
                        let top = v00 + (v01 - v00) * fx;
                        let bot = v10 + (v11 - v10) * fx;
                        out[orow + xo] = (top + (bot - top) * fy) as f32;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, ho, wo], out)?)
}

/// Pixel-space upsampling: decode to pixels, bilinear-upsample, re-encode.
/// Definitionally the composition of the three public operations.
pub fn psu(codec: &PatchCodec, latent_low: &Tensor, factor: usize) -> Result<Tensor, CodecError> {
    let img = codec.decode(latent_low)?;
    let up = upsample(&img, factor, UpsampleMethod::Bilinear)?;
    codec.encode(&up)
}

/// Latent resolution matching for training/inference inputs: either direct
/// latent-space interpolation or the pixel-space route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentUpsample {
    Nearest,
    Bilinear,
    Psu,
}

impl LatentUpsample {
    pub fn apply(
        self,
        codec: &PatchCodec,
        latent_low: &Tensor,
        factor: usize,
    ) -> Result<Tensor, CodecError> {
        match self {
            LatentUpsample::Nearest => upsample(latent_low, factor, UpsampleMethod::Nearest),
            LatentUpsample::Bilinear => upsample(latent_low, factor, UpsampleMethod::Bilinear),
            LatentUpsample::Psu => psu(codec, latent_low, factor),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LatentUpsample::Nearest => "nearest",
            LatentUpsample::Bilinear => "bilinear",
            LatentUpsample::Psu => "psu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nearest" => Some(Self::Nearest),
            "bilinear" => Some(Self::Bilinear),
            "psu" => Some(Self::Psu),
            _ => None,
        }
    }
}
