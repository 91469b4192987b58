//! `FEAT` feature files: magic, little-endian `u32` frame count and width,
//! then row-major little-endian `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"FEAT";

pub fn write_feat(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let bytes = encode_feat(features)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_feat(features: &Tensor<f32>) -> Result<Vec<u8>> {
    let shape = features.shape();
    if shape.len() != 2 {
        return Err(Error::Data(format!(
            "feature matrix must be rank 2, got shape {shape:?}"
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * features.numel());
    out.extend_from_slice(MAGIC);
    for dim in shape {
        let dim = u32::try_from(*dim).map_err(|_| Error::Data(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_feat(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open feature file {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode_feat(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn decode_feat(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a FEAT file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, dim) = (word(4), word(8));
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::Data("FEAT header overflows".into()))?;
    if frames == 0 || dim == 0 || bytes.len() != expected {
        return Err(Error::Data(format!(
            "FEAT header says {frames}x{dim} but payload is {} bytes",
            bytes.len() - 12
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[frames, dim], data)
}
