//! In-memory feature matrices: a time-major sequence of fixed-width frames.

use crate::error::{Error, Result};

/// Feature width of the multilingual SSL model the toolkit is tuned for.
pub const SSL_FEATURE_DIM: usize = 1024;
/// Default frame hop, in microseconds (20 ms).
pub const DEFAULT_HOP_US: u32 = 20_000;
/// Default speaker prompt duration.
pub const DEFAULT_PROMPT_SECONDS: f64 = 3.0;

/// A `frames x dim` matrix of `f32` values, row-major with one row per frame.
///
/// The hop is kept as integer microseconds so that headers never drift.
/// Construction validates shape and finiteness; after that the matrix is
/// never mutated in place.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dim: usize,
    hop_us: u32,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dim: usize, hop_us: u32, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidShape(format!(
                "frames and dim must be >= 1 (got {frames} x {dim})"
            )));
        }
        if hop_us == 0 {
            return Err(Error::InvalidShape("hop must be > 0".into()));
        }
        let expected = frames
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidShape("frames * dim overflows".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidShape(format!(
                "{frames} x {dim} matrix needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            frames,
            dim,
            hop_us,
            data,
        })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], hop_us: u32) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::InvalidShape(format!(
                    "row {i} has {} values, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, hop_us, data)
    }

    /// Concatenates matrices along time. All parts must share `dim`; the hop
    /// of the first part is kept.
    pub fn concat(parts: &[&FeatureMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or(Error::Empty("nothing to concatenate"))?;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut frames = 0;
        for part in parts {
            if part.dim != first.dim {
                return Err(Error::DimMismatch {
                    expected: first.dim,
                    found: part.dim,
                });
            }
            frames += part.frames;
            data.extend_from_slice(&part.data);
        }
        Ok(Self {
            frames,
            dim: first.dim,
            hop_us: first.hop_us,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hop_us(&self) -> u32 {
        self.hop_us
    }

    pub fn hop_ms(&self) -> f64 {
        f64::from(self.hop_us) / 1000.0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    /// Same shape and hop, new values. Used by operations that map frames
    /// one-to-one.
    pub(crate) fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.frames, self.dim, self.hop_us, data)
    }

    /// Copies rows `[start, start + len)` into a new matrix.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        let end = start.checked_add(len);
        match end {
            Some(end) if len >= 1 && end <= self.frames => Ok(Self {
                frames: len,
                dim: self.dim,
                hop_us: self.hop_us,
                data: self.data[start * self.dim..end * self.dim].to_vec(),
            }),
            _ => Err(Error::SliceOutOfRange {
                start,
                len,
                frames: self.frames,
            }),
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.frames == other.frames
            && self.dim == other.dim
            && self.hop_us == other.hop_us
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Number of frames covering `seconds` at the given hop, rounded to nearest.
pub fn prompt_frames(seconds: f64, hop_us: u32) -> usize {
    (seconds * 1e6 / f64::from(hop_us)).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize, dim: usize) -> FeatureMatrix {
        let data = (0..frames * dim).map(|i| i as f32).collect();
        FeatureMatrix::new(frames, dim, DEFAULT_HOP_US, data).unwrap()
    }

    #[test]
    fn three_second_prompt_is_150_frames() {
        assert_eq!(prompt_frames(DEFAULT_PROMPT_SECONDS, DEFAULT_HOP_US), 150);
        assert_eq!(prompt_frames(1.0, 10_000), 100);
    }

    #[test]
    fn identity_slice() {
        let m = ramp(7, 3);
        assert_eq!(m.slice_frames(0, 7).unwrap(), m);
    }

    #[test]
    fn slice_out_of_range() {
        let m = ramp(200, 2);
        assert!(matches!(
            m.slice_frames(100, 150),
            Err(Error::SliceOutOfRange { .. })
        ));
        assert!(m.slice_frames(0, 0).is_err());
        assert!(m.slice_frames(usize::MAX, 2).is_err());
    }

    #[test]
    fn slice_copies_rows() {
        let m = ramp(10, 2);
        let s = m.slice_frames(3, 4).unwrap();
        assert_eq!(s.frames(), 4);
        assert_eq!(s.row(0), m.row(3));
        assert_eq!(s.row(3), m.row(6));
        // The slice owns its storage; dropping the source must not matter.
        drop(m);
        assert_eq!(s.row(0), &[6.0, 7.0]);
    }

    #[test]
    fn rejects_invalid_matrices() {
        assert!(FeatureMatrix::new(0, 3, DEFAULT_HOP_US, vec![]).is_err());
        assert!(FeatureMatrix::new(1, 2, 0, vec![0.0, 0.0]).is_err());
        assert!(FeatureMatrix::new(1, 2, DEFAULT_HOP_US, vec![0.0]).is_err());
        assert!(matches!(
            FeatureMatrix::new(1, 2, DEFAULT_HOP_US, vec![0.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn concat_along_time() {
        let a = ramp(2, 2);
        let b = ramp(3, 2);
        let c = FeatureMatrix::concat(&[&a, &b]).unwrap();
        assert_eq!(c.frames(), 5);
        assert_eq!(c.row(2), b.row(0));
        let d = ramp(1, 3);
        assert!(FeatureMatrix::concat(&[&a, &d]).is_err());
    }
}
