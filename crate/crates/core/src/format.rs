//! Binary file formats.
//!
//! All integers and floats are little-endian.
//!
//! Feature matrix, magic `VTF1` (28-byte header):
//!
//! ```text
//! [magic:4][version:u32][frames:u64][dim:u64][hop_us:u32][payload: frames*dim f32]
//! ```
//!
//! Codebook, magic `VTC1` (40-byte header):
//!
//! ```text
//! [magic:4][version:u32][num_centroids:u64][dim:u64][seed:u64][distortion:f64]
//! [payload: num_centroids*dim f32]
//! ```
//!
//! The converter checkpoint (`VTM1`) lives in [`crate::converter::checkpoint`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::kmeans::Codebook;

pub const FEATURE_MAGIC: [u8; 4] = *b"VTF1";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"VTC1";
pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 28;
pub const CODEBOOK_HEADER_LEN: usize = 40;

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + m.as_slice().len() * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.frames() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u64).to_le_bytes());
    out.extend_from_slice(&m.hop_us().to_le_bytes());
    put_f32s(&mut out, m.as_slice());
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let frames = r.u64_as_usize()?;
    let dim = r.u64_as_usize()?;
    let hop_us = r.u32()?;
    let data = r.f32s(frames, dim)?;
    r.finish()?;
    FeatureMatrix::new(frames, dim, hop_us, data)
}

/// Writes `m` as a `VTF1` file.
///
/// `FeatureMatrix` cannot hold non-finite values, so nothing can reach disk
/// that would fail validation on the way back in.
pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(CODEBOOK_HEADER_LEN + cb.centroids().len() * 4);
    out.extend_from_slice(&CODEBOOK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cb.len() as u64).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u64).to_le_bytes());
    out.extend_from_slice(&cb.seed().to_le_bytes());
    out.extend_from_slice(&cb.distortion().to_le_bytes());
    put_f32s(&mut out, cb.centroids());
    out
}

/// Decodes a `VTC1` codebook. Only the final distortion is persisted, so the
/// loaded codebook's trace has a single entry.
pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut r = Reader::new(bytes);
    r.magic(CODEBOOK_MAGIC)?;
    r.version()?;
    let k = r.u64_as_usize()?;
    let dim = r.u64_as_usize()?;
    let seed = r.u64()?;
    let distortion = r.f64()?;
    let centroids = r.f32s(k, dim)?;
    r.finish()?;
    Codebook::from_parts(centroids, k, dim, vec![distortion], seed)
}

pub fn write_codebook(cb: &Codebook, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_codebook(cb)).map_err(|e| Error::io(path, e))
}

pub fn read_codebook(path: impl AsRef<Path>) -> Result<Codebook> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codebook(&bytes)
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer that reports truncation against the full
/// expected length.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            expected: usize::MAX,
            found: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let found = self.u32()?;
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u64_as_usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::InvalidShape(format!("{v} exceeds usize")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, rows: usize, cols: usize) -> Result<Vec<f32>> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::InvalidShape(format!("{rows} x {cols} payload overflows")))?;
        let raw = self.take(n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(Error::TrailingBytes { extra }),
        }
    }
}
