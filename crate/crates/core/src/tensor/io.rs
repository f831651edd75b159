//! Bit-exact binary tensor file format.
//!
//! Layout, all little-endian:
//! magic `FMT1` (4 bytes) | version u32 | rank u32 | dims rank x u32 | payload f32.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"FMT1";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"FMT1\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {TENSOR_VERSION})")]
    Version { found: u32 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing garbage: {extra} bytes past payload")]
    TrailingBytes { extra: usize },
    #[error("header declares a zero extent in dims {dims:?}")]
    ZeroExtent { dims: Vec<u32> },
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let mut bytes =
        Vec::with_capacity(4 + 4 + 4 + 4 * t.rank() + 4 * t.len());
    bytes.extend_from_slice(&TENSOR_MAGIC);
    bytes.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorIoError> {
    let bytes = fs::read(path)?;
    load_tensor_bytes(&bytes)
}

fn load_tensor_bytes(bytes: &[u8]) -> Result<Tensor, TensorIoError> {
    let need = |expected: usize| -> Result<(), TensorIoError> {
        if bytes.len() < expected {
            Err(TensorIoError::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };

    need(12)?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != TENSOR_MAGIC {
        return Err(TensorIoError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(TensorIoError::Version { found: version });
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    let header_len = 12 + 4 * rank;
    need(header_len)?;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 12 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    if dims.contains(&0) {
        return Err(TensorIoError::ZeroExtent { dims });
    }

    let count: usize = dims.iter().map(|&d| d as usize).product();
    let total = header_len + 4 * count;
    need(total)?;
    if bytes.len() > total {
        return Err(TensorIoError::TrailingBytes {
            extra: bytes.len() - total,
        });
    }

    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = header_len + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let shape = dims.into_iter().map(|d| d as usize).collect();
    // Construction cannot fail: dims are nonzero and data length matches.
    Ok(Tensor::new(shape, data).expect("validated header"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("flowsr-tensor-io-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_bit_exact() {
        let mut rng = RngStream::new(99, 0);
        let t = Tensor::gaussian(vec![3, 4, 4], &mut rng).unwrap();
        let path = tmp("roundtrip.fmt");
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_detected() {
        let path = tmp("badmagic.fmt");
        let t = Tensor::from_slice(&[1.0, 2.0]);
        save_tensor(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(TensorIoError::BadMagic { .. })
        ));
    }

    #[test]
    fn version_mismatch_detected() {
        let path = tmp("badversion.fmt");
        let t = Tensor::from_slice(&[1.0]);
        save_tensor(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(TensorIoError::Version { found: 9 })
        ));
    }

    #[test]
    fn truncation_detected() {
        let path = tmp("truncated.fmt");
        let t = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        save_tensor(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(TensorIoError::Truncated { .. })
        ));
    }

    #[test]
    fn trailing_bytes_detected() {
        let path = tmp("trailing.fmt");
        let t = Tensor::from_slice(&[1.0]);
        save_tensor(&t, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_tensor(&path),
            Err(TensorIoError::TrailingBytes { extra: 1 })
        ));
    }
}
