//! Binary blobs for the face tensor and the raw grid, plus JSON helpers.
//!
//! Both blobs are little-endian: a 4-byte magic, one `u32` per dimension, then
//! the values as `f64` in row-major order.
//!
//! | blob        | magic  | dims             |
//! |-------------|--------|------------------|
//! | face tensor | `FT3D` | 204, 50, 47      |
//! | grid tensor | `GRD1` | 9, 9, 5, 109     |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid_codec::GridTensor;
use crate::morphable_model::FaceTensor;

pub const FACE_TENSOR_MAGIC: &[u8; 4] = b"FT3D";
pub const GRID_TENSOR_MAGIC: &[u8; 4] = b"GRD1";

fn write_blob<W: Write>(mut w: W, magic: &[u8; 4], dims: &[usize], values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * dims.len() + 8 * values.len());
    buf.extend_from_slice(magic);
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_blob<R: Read>(mut r: R, what: &'static str, magic: &[u8; 4], dims: &[usize]) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let fail = |reason: String| Error::Format { what, reason };

    let header = 4 + 4 * dims.len();
    if bytes.len() < header {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    for (i, &want) in dims.iter().enumerate() {
        let at = 4 + 4 * i;
        let got = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        if got != want {
            return Err(fail(format!("dimension {i} is {got}, expected {want}")));
        }
    }
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != 8 * count {
        return Err(fail(format!("payload is {} bytes, expected {}", body.len(), 8 * count)));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_face_tensor<W: Write>(w: W, tensor: &FaceTensor) -> Result<()> {
    write_blob(w, FACE_TENSOR_MAGIC, &FaceTensor::SHAPE, tensor.values())
}

pub fn read_face_tensor<R: Read>(r: R) -> Result<FaceTensor> {
    FaceTensor::from_values(read_blob(r, "face tensor", FACE_TENSOR_MAGIC, &FaceTensor::SHAPE)?)
}

pub fn write_grid_tensor<W: Write>(w: W, grid: &GridTensor) -> Result<()> {
    write_blob(w, GRID_TENSOR_MAGIC, &GridTensor::SHAPE, grid.values())
}

pub fn read_grid_tensor<R: Read>(r: R) -> Result<GridTensor> {
    GridTensor::from_values(read_blob(r, "grid tensor", GRID_TENSOR_MAGIC, &GridTensor::SHAPE)?)
}

pub fn save_face_tensor(path: impl AsRef<Path>, tensor: &FaceTensor) -> Result<()> {
    write_face_tensor(fs::File::create(path)?, tensor)
}

pub fn load_face_tensor(path: impl AsRef<Path>) -> Result<FaceTensor> {
    read_face_tensor(fs::File::open(path)?)
}

pub fn save_grid_tensor(path: impl AsRef<Path>, grid: &GridTensor) -> Result<()> {
    write_grid_tensor(fs::File::create(path)?, grid)
}

pub fn load_grid_tensor(path: impl AsRef<Path>) -> Result<GridTensor> {
    read_grid_tensor(fs::File::open(path)?)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
