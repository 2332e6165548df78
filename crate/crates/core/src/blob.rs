//! Binary tensor blob format shared by the dataset and checkpoints.
//!
//! Layout (little-endian): magic `UVHT`, u32 version (= 1), u32 ndim,
//! ndim x u32 dims, then row-major f32 data.

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Scalar, Tensor4};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"UVHT";
pub const VERSION: u32 = 1;

/// Serialize dims + f32 data into the blob byte layout.
pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    let numel: usize = dims.iter().product();
    assert_eq!(numel, data.len(), "blob dims/data length mismatch");
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse a blob; the error string names what failed validation.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Vec<usize>, Vec<f32>), String> {
    let take4 = |off: usize| -> std::result::Result<[u8; 4], String> {
        bytes
            .get(off..off + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| format!("truncated at byte {off}"))
    };
    if take4(0)? != MAGIC {
        return Err("bad magic (expected UVHT)".into());
    }
    let version = u32::from_le_bytes(take4(4)?);
    if version != VERSION {
        return Err(format!("unsupported version {version} (expected {VERSION})"));
    }
    let ndim = u32::from_le_bytes(take4(8)?) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(format!("implausible ndim {ndim}"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(u32::from_le_bytes(take4(12 + 4 * i)?) as usize);
    }
    let numel: usize = dims.iter().product();
    let data_off = 12 + 4 * ndim;
    let expect = data_off + 4 * numel;
    if bytes.len() != expect {
        return Err(format!(
            "payload length {} does not match header ({} expected)",
            bytes.len(),
            expect
        ));
    }
    let data = bytes[data_off..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn write_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(dims, data))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|reason| Error::corrupt(path, reason))
}

pub fn write_tensor4<S: Scalar>(path: &Path, t: &Tensor4<S>) -> Result<()> {
    let d = t.dims();
    let data: Vec<f32> = t.data().iter().map(|v| v.as_f32()).collect();
    write_file(path, &[d.frames, d.channels, d.height, d.width], &data)
}

pub fn read_tensor4<S: Scalar>(path: &Path) -> Result<Tensor4<S>> {
    let (dims, data) = read_file(path)?;
    if dims.len() != 4 {
        return Err(Error::corrupt(path, format!("expected 4 dims, got {}", dims.len())));
    }
    let d4 = Dims4::new(dims[0], dims[1], dims[2], dims[3]);
    Tensor4::from_vec(d4, data.into_iter().map(S::from_f32).collect())
        .map_err(|e| Error::corrupt(path, e.to_string()))
}
