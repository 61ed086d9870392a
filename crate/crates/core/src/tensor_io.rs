//! Binary tensor files.
//!
//! `DKT1`: magic, u32 LE rank, rank × u32 LE dims, row-major f32 LE payload.
//! `DKT8` is the same layout with an f64 payload, used where values must
//! survive a round trip bit-for-bit (checkpoints).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC_F32: &[u8; 4] = b"DKT1";
pub const MAGIC_F64: &[u8; 4] = b"DKT8";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Appends the encoded tensor to `out`. Matrices are written as rank 2.
pub fn encode(m: &Matrix, precision: Precision, out: &mut Vec<u8>) {
    out.extend_from_slice(match precision {
        Precision::F32 => MAGIC_F32,
        Precision::F64 => MAGIC_F64,
    });
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    match precision {
        Precision::F32 => m.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Precision::F64 => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated {what}"))),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Decodes one tensor from the reader. Rank 1 becomes a row vector.
pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Matrix> {
    let magic = r.take(4, "tensor magic")?;
    let precision = match magic {
        m if m == MAGIC_F32 => Precision::F32,
        m if m == MAGIC_F64 => Precision::F64,
        other => return Err(Error::Format(format!("bad tensor magic {other:?}"))),
    };
    let rank = r.u32("tensor rank")?;
    let dims: Vec<usize> = (0..rank).map(|_| r.u32("tensor dims").map(|d| d as usize)).collect::<Result<_>>()?;
    let (rows, cols) = match dims.as_slice() {
        [n] => (1, *n),
        [a, b] => (*a, *b),
        _ => return Err(Error::Format(format!("unsupported tensor rank {rank}"))),
    };
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let data: Vec<f64> = match precision {
        Precision::F32 => r
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflow".into()))?, "tensor payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => r
            .take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflow".into()))?, "tensor payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Matrix::new(rows, cols, data)
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    let m = decode_from(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    Ok(m)
}

pub fn write_tensor(path: &Path, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * m.data().len());
    encode(m, Precision::F32, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Matrix> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let m = Matrix::from_rows(&[vec![1.0, -2.5], vec![0.5, 3.0]]).unwrap();
        let mut buf = Vec::new();
        encode(&m, Precision::F32, &mut buf);
        let mut expected = b"DKT1".to_vec();
        for v in [2u32, 2, 2] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f32, -2.5, 0.5, 3.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(buf, expected);
        assert_eq!(decode(&buf).unwrap(), m);
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let m = Matrix::from_fn(3, 5, |i, j| (i as f64 + 0.1).powf(j as f64 * 0.37) / 3.0);
        let mut buf = Vec::new();
        encode(&m, Precision::F64, &mut buf);
        assert_eq!(decode(&buf).unwrap(), m);
        let mut lossy = Vec::new();
        encode(&m, Precision::F32, &mut lossy);
        assert!(decode(&lossy).unwrap().max_abs_diff(&m) < 1e-6);
    }

    #[test]
    fn rejects_corrupt_input() {
        let m = Matrix::zeros(2, 3);
        let mut buf = Vec::new();
        encode(&m, Precision::F32, &mut buf);
        for cut in [0, 3, 7, 15, buf.len() - 1] {
            assert!(matches!(decode(&buf[..cut]), Err(Error::Format(_))));
        }
        let mut bad = buf.clone();
        bad[3] = b'9';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn rank_one_reads_as_row() {
        let mut buf = b"DKT1".to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        buf.extend_from_slice(&2.5f32.to_le_bytes());
        assert_eq!(decode(&buf).unwrap(), Matrix::row_vector(&[1.5, 2.5]));
    }
}
