//! `VTM1` converter checkpoint, little-endian:
//!
//! ```text
//! [magic "VTM1":4][version:u32]
//! [input_dim:u32][output_dim:u32][num_blocks:u32][hidden_dim:u32][ffn_dim:u32][max_len:u32]
//! [tap_small:u32][tap_medium:u32][tap_large:u32]
//! [vocab_small:u32][vocab_medium:u32][vocab_large:u32][attention:u32]
//! [param_count:u64][params: param_count f32]
//! ```
//!
//! Parameters are stored in the layout order documented on
//! [`crate::converter`]. They are narrowed to `f32`, so a round trip
//! preserves them to single precision. Dropout is a training setting and is
//! not stored.

use std::fs;
use std::path::Path;

use super::{ConverterConfig, ToyConverter};
use crate::error::{Error, Result};
use crate::format::{put_f32s, Reader, FORMAT_VERSION};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VTM1";
pub const CHECKPOINT_HEADER_LEN: usize = 68;

fn to_u32(v: usize, what: &str) -> u32 {
    u32::try_from(v).unwrap_or_else(|_| panic!("{what} {v} does not fit in u32"))
}

pub fn encode_checkpoint(model: &ToyConverter) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + model.num_params() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let fields = [
        c.input_dim,
        c.output_dim,
        c.num_blocks,
        c.hidden_dim,
        c.ffn_dim,
        c.max_len,
        c.tap_layers[0],
        c.tap_layers[1],
        c.tap_layers[2],
        c.vocab_sizes[0],
        c.vocab_sizes[1],
        c.vocab_sizes[2],
        usize::from(c.attention),
    ];
    for v in fields {
        out.extend_from_slice(&to_u32(v, "config field").to_le_bytes());
    }
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    let narrow: Vec<f32> = model.params().iter().map(|&p| p as f32).collect();
    put_f32s(&mut out, &narrow);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyConverter> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let mut f = [0usize; 13];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    if f[12] > 1 {
        return Err(Error::InvalidConfig(format!("attention flag {}", f[12])));
    }
    let config = ConverterConfig {
        input_dim: f[0],
        output_dim: f[1],
        num_blocks: f[2],
        hidden_dim: f[3],
        ffn_dim: f[4],
        max_len: f[5],
        tap_layers: [f[6], f[7], f[8]],
        vocab_sizes: [f[9], f[10], f[11]],
        attention: f[12] == 1,
        dropout: 0.0,
    };
    let count = r.u64_as_usize()?;
    let params = r.f32s(count, 1)?;
    r.finish()?;
    if let Some(index) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    ToyConverter::from_params(config, params.into_iter().map(f64::from).collect())
}

pub fn write_checkpoint(model: &ToyConverter, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ToyConverter> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_to_single_precision() {
        let m = ToyConverter::new(ConverterConfig::tiny(4), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        assert_eq!(bytes.len(), CHECKPOINT_HEADER_LEN + 4 * m.num_params());
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(*a as f32, *b as f32);
        }
        // a second round trip is exact
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = ToyConverter::new(ConverterConfig::tiny(4), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 2]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"VTF1");
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        // param count disagrees with the config
        bad[60..68].copy_from_slice(&1u64.to_le_bytes());
        assert!(decode_checkpoint(&bad).is_err());
        let mut bad = bytes;
        bad[CHECKPOINT_HEADER_LEN..CHECKPOINT_HEADER_LEN + 4]
            .copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::NonFinite { index: 0 })
        ));
    }
}
