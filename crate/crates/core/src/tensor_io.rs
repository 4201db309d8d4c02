//! Binary tensor files: `"MAED"`, u16 version, u16 rank, u32 dims, then a
//! row-major little-endian f32 payload.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MAED";
pub const FORMAT_VERSION: u16 = 1;

pub fn encode_tensor(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let need = |expected: usize| {
        if bytes.len() < expected {
            Err(Error::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    need(8)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * ndim;
    need(header)?;
    let dims: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    need(header + 4 * count)?;
    let data: Vec<f32> = bytes[header..header + 4 * count]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("dims match payload"))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &ArrayD<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

pub fn save_image(path: impl AsRef<Path>, img: &Array2<f32>) -> Result<()> {
    save_tensor(path, &img.clone().into_dyn())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let t = load_tensor(path)?;
    let shape = t.shape().to_vec();
    t.into_dimensionality()
        .map_err(|_| Error::shape(&[0, 0], &shape))
}

pub fn save_mask(path: impl AsRef<Path>, mask: &Array2<bool>) -> Result<()> {
    save_image(path, &mask.mapv(|b| if b { 1.0 } else { 0.0 }))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Array2<bool>> {
    Ok(load_image(path)?.mapv(|v| v != 0.0))
}
