//! Clip-feature files: `"FEAT0001"`, u32 M, u32 n, then M·n little-endian
//! `f32` values in row-major order. Values widen to `f64` on load.

use std::fs;
use std::path::Path;

use crate::binio::{checked_bytes, Reader};
use crate::error::FormatError;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"FEAT0001";
/// Largest accepted M·n; bigger headers are rejected before allocating.
pub const MAX_FEATURE_VALUES: u64 = 1 << 31;

/// One n-dim feature vector per consecutive clip (M×n).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures(Tensor);

impl ClipFeatures {
    pub fn new(matrix: Tensor) -> Result<Self, FormatError> {
        if matrix.rank() != 2 {
            return Err(FormatError::Malformed(format!(
                "clip features must be a matrix, got shape {:?}",
                matrix.shape()
            )));
        }
        if !matrix.is_finite() {
            return Err(FormatError::Malformed("non-finite feature value".into()));
        }
        Ok(Self(matrix))
    }

    pub fn clips(&self) -> usize {
        self.0.dims2().0
    }

    pub fn dim(&self) -> usize {
        self.0.dims2().1
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn into_matrix(self) -> Tensor {
        self.0
    }

    /// Values are narrowed to `f32`; anything not exactly representable
    /// loses precision.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, n) = self.0.dims2();
        let mut out = Vec::with_capacity(16 + 4 * m * n);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(m as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for &v in self.0.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(FEATURE_MAGIC)?;
        let m = r.u32()?;
        let n = r.u32()?;
        if m == 0 || n == 0 {
            return Err(FormatError::Malformed(format!("empty feature matrix {m}x{n}")));
        }
        if m as u64 * n as u64 > MAX_FEATURE_VALUES {
            return Err(FormatError::DimensionOverflow(format!(
                "{m}x{n} exceeds {MAX_FEATURE_VALUES} values"
            )));
        }
        let nbytes = checked_bytes(&[m as u64, n as u64], 4)?;
        let raw = r.bytes(nbytes)?;
        r.finish()?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(vec![m as usize, n as usize], data)
            .map_err(|e| FormatError::Malformed(e.to_string()))?;
        Self::new(t)
    }
}

pub fn load_features(path: &Path) -> Result<ClipFeatures, FormatError> {
    ClipFeatures::from_bytes(&fs::read(path)?)
}

pub fn save_features(path: &Path, features: &ClipFeatures) -> Result<(), FormatError> {
    fs::write(path, features.to_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ClipFeatures {
        let data = (0..35).map(|i| (i as f64 * 0.37).sin() as f32 as f64).collect();
        ClipFeatures::new(Tensor::matrix(5, 7, data).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes();
        let back = ClipFeatures::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.feat");
        save_features(&p, &f).unwrap();
        assert_eq!(load_features(&p).unwrap(), f);
    }

    #[test]
    fn corrupted_magic_is_an_error() {
        let mut bytes = sample().to_bytes();
        bytes[3] = b'9';
        assert!(matches!(ClipFeatures::from_bytes(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(ClipFeatures::from_bytes(b"FE"), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn short_payload_is_truncation() {
        // header says 5x7 but only 34 floats follow
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            ClipFeatures::from_bytes(cut),
            Err(FormatError::Truncated { needed: 140, available: 136 })
        ));
    }

    #[test]
    fn overflow_and_trailing_bytes() {
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            ClipFeatures::from_bytes(&bytes),
            Err(FormatError::DimensionOverflow(_))
        ));
        let mut extra = sample().to_bytes();
        extra.push(0);
        assert!(matches!(ClipFeatures::from_bytes(&extra), Err(FormatError::TrailingBytes(1))));
    }
}
