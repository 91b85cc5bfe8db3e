//! `PFM1` tensor files: magic, `u32` rank, `u32` dims, `f32` row-major payload,
//! all little-endian.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"PFM1";

pub fn encode_tensor(m: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.len() + 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {at}")))
}

/// Decodes a rank-2 tensor. Returns the matrix and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Array2<f32>, usize)> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad magic, expected PFM1".into()));
    }
    let ndim = read_u32(bytes, 4)? as usize;
    if ndim != 2 {
        return Err(Error::Format(format!("expected a rank-2 tensor, found rank {ndim}")));
    }
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let start = 16;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let end = start + 4 * count;
    let payload = bytes
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("truncated payload: need {} bytes, have {}", end, bytes.len())))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((m, end))
}

pub fn write_tensor(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(m)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (m, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn small_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pfm");
        let m = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        write_tensor(&p, &m).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), m);
    }

    #[test]
    fn empty_matrix_round_trip() {
        let m = Array2::<f32>::zeros((0, 80));
        let bytes = encode_tensor(&m);
        assert_eq!(bytes.len(), 16);
        let (back, _) = decode_tensor(&bytes).unwrap();
        assert_eq!(back.dim(), (0, 80));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode_tensor(&array![[1.0f32]]);
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = encode_tensor(&array![[1.0f32, 2.0]]);
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_tensor(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn layout_is_little_endian_row_major() {
        let bytes = encode_tensor(&array![[1.0f32, 2.0]]);
        assert_eq!(&bytes[..4], b"PFM1");
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[2, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[20..24], &2.0f32.to_le_bytes());
    }

    proptest! {
        #[test]
        fn finite_matrices_round_trip_bitwise(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut state = seed;
            let m = Array2::from_shape_simple_fn((rows, cols), || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let bits = (state >> 32) as u32;
                let v = f32::from_bits(bits);
                if v.is_finite() { v } else { 0.5 }
            });
            let (back, used) = decode_tensor(&encode_tensor(&m)).unwrap();
            prop_assert_eq!(used, 16 + 4 * rows * cols);
            for (a, b) in m.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
