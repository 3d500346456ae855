//! Binary feature files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `MFEA` |
//! | 4 | version (`u32`, currently 1) |
//! | 4 | `L` (`u32`) |
//! | 4 | `C` (`u32`) |
//! | 1 | modality tag (0 image, 1 audio, 2 time series, 3 precomputed) |
//! | 4·L·C | `f32` values, row-major |

use std::path::Path;

use super::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MFEA_MAGIC: &[u8; 4] = b"MFEA";
pub const MFEA_VERSION: u32 = 1;
const HEADER: usize = 17;

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at + n).ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        detail: format!("truncated while reading {what} (need {n} bytes at {at})"),
    })
}

fn u32_at(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, at, 4, what)?.try_into().unwrap()))
}

/// Encodes a feature sequence; values are narrowed to `f32`.
pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let (l, c) = (seq.len(), seq.width());
    let mut out = Vec::with_capacity(HEADER + 4 * l * c);
    out.extend_from_slice(MFEA_MAGIC);
    out.extend_from_slice(&MFEA_VERSION.to_le_bytes());
    out.extend_from_slice(&(l as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.push(seq.modality.tag());
    for &v in seq.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_features(bytes: &[u8], meta: &str) -> Result<FeatureSequence> {
    let magic = take(bytes, 0, 4, "magic")?;
    if magic != MFEA_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("expected magic \"MFEA\", found {magic:?}"),
        });
    }
    let version = u32_at(bytes, 4, "version")?;
    if version != MFEA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MFEA_VERSION,
        });
    }
    let l = u32_at(bytes, 8, "length")? as usize;
    let c = u32_at(bytes, 12, "width")? as usize;
    let tag = take(bytes, 16, 1, "modality tag")?[0];
    let modality = Modality::from_tag(tag).ok_or_else(|| Error::Format {
        offset: 16,
        detail: format!("unknown modality tag {tag}"),
    })?;
    let n = l.checked_mul(c).ok_or_else(|| Error::Format {
        offset: 8,
        detail: format!("size {l}×{c} overflows"),
    })?;
    let payload = take(bytes, HEADER, 4 * n, "values")?;
    if bytes.len() != HEADER + 4 * n {
        return Err(Error::Format {
            offset: (HEADER + 4 * n) as u64,
            detail: format!("{} trailing bytes", bytes.len() - HEADER - 4 * n),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureSequence::new(Tensor::matrix(l, c, data)?, modality, meta)
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    std::fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureSequence {
        let data = (0..15).map(|i| i as f64 * 0.25 - 1.0).collect();
        FeatureSequence::new(Tensor::matrix(5, 3, data).unwrap(), Modality::Audio, "t").unwrap()
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let back = parse_features(&encode_features(&s), "t").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_features(&sample());
        match parse_features(&bytes[..30], "t") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut bytes = encode_features(&sample());
        bytes[0] = b'X';
        let err = parse_features(&bytes, "t").unwrap_err().to_string();
        assert!(err.contains("MFEA"), "{err}");
    }
}
