//! PNG emission: single images, square grids, and horizontal strips.
//! Images are `(c, h, w)` float tensors in [0,1]; values are clamped and
//! quantized to 8 bits. One channel writes grayscale, three write RGB.

use std::io;
use std::path::Path;

use flowsr_core::tensor::Tensor;

#[derive(Debug)]
pub enum PngError {
    Io(io::Error),
    Encode(png::EncodingError),
    BadChannels(usize),
    EmptyGrid,
    MixedShapes,
}

impl std::fmt::Display for PngError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PngError::Io(e) => write!(f, "png io: {e}"),
            PngError::Encode(e) => write!(f, "png encode: {e}"),
            PngError::BadChannels(c) => write!(f, "png supports 1 or 3 channels, got {c}"),
            PngError::EmptyGrid => write!(f, "no images to lay out"),
            PngError::MixedShapes => write!(f, "grid images must share one shape"),
        }
    }
}

impl std::error::Error for PngError {}

impl From<io::Error> for PngError {
    fn from(e: io::Error) -> Self {
        PngError::Io(e)
    }
}

impl From<png::EncodingError> for PngError {
    fn from(e: png::EncodingError) -> Self {
        PngError::Encode(e)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one tensor as an 8-bit PNG.
pub fn write_png(img: &Tensor, path: &Path) -> Result<(), PngError> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => return Err(PngError::BadChannels(other)),
    };
    let mut pixels = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                pixels.push(quantize(img.data()[(ch * h + y) * w + x]));
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&pixels)?;
    Ok(())
}

const SEPARATOR: usize = 2;

fn assemble(images: &[Tensor], cols: usize) -> Result<Tensor, PngError> {
    if images.is_empty() {
        return Err(PngError::EmptyGrid);
    }
    let shape = images[0].shape().to_vec();
    if images.iter().any(|im| im.shape() != shape.as_slice()) {
        return Err(PngError::MixedShapes);
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let rows = images.len().div_ceil(cols);
    let out_h = rows * h + (rows - 1) * SEPARATOR;
    let out_w = cols * w + (cols - 1) * SEPARATOR;
    let mut data = vec![0.0f32; c * out_h * out_w];
    for (i, img) in images.iter().enumerate() {
        let (gy, gx) = (i / cols, i % cols);
        let oy = gy * (h + SEPARATOR);
        let ox = gx * (w + SEPARATOR);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * out_h + oy + y) * out_w + ox + x] =
                        img.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, out_h, out_w], data).expect("grid shape is valid"))
}

/// Square-ish grid of same-shape images.
pub fn write_grid(images: &[Tensor], path: &Path) -> Result<(), PngError> {
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    write_png(&assemble(images, cols.max(1))?, path)
}

/// One-row strip, e.g. trajectory panels ordered by time.
pub fn write_strip(images: &[Tensor], path: &Path) -> Result<(), PngError> {
    write_png(&assemble(images, images.len().max(1))?, path)
}
