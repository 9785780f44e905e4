//! IDX file parsing (the MNIST container format), with transparent gzip.

use std::io::Read;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};

use super::DataError;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Parsed IDX image payload: `n` images of `rows × cols`, pixels scaled
/// into [0,1] row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

/// Reads a file, gunzipping when it starts with the gzip magic bytes.
pub fn read_maybe_gzipped(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses a big-endian IDX image stream (magic 0x00000803).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let mut cur = bytes;
    let magic = cur.read_u32::<BigEndian>()?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGE_MAGIC,
            got: magic,
        });
    }
    let n = cur.read_u32::<BigEndian>()? as usize;
    let rows = cur.read_u32::<BigEndian>()? as usize;
    let cols = cur.read_u32::<BigEndian>()? as usize;
    let expected = n * rows * cols;
    if cur.len() != expected {
        return Err(DataError::Truncated {
            expected,
            got: cur.len(),
        });
    }
    let pixels = cur.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(IdxImages {
        n,
        rows,
        cols,
        pixels,
    })
}

/// Parses a big-endian IDX label stream (magic 0x00000801); labels 0–9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let mut cur = bytes;
    let magic = cur.read_u32::<BigEndian>()?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABEL_MAGIC,
            got: magic,
        });
    }
    let n = cur.read_u32::<BigEndian>()? as usize;
    if cur.len() != n {
        return Err(DataError::Truncated {
            expected: n,
            got: cur.len(),
        });
    }
    if let Some((i, &l)) = cur.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::LabelOutOfRange { label: l, index: i });
    }
    Ok(cur.to_vec())
}
