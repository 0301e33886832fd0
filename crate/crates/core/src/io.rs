//! `ddvol` volume files: a JSON header plus a raw little-endian payload.
//!
//! The header lives at the given path (conventionally `*.ddvol`) and the payload
//! next to it with `.raw` appended. Scalar volumes are written as `f32` when every
//! value is exactly representable, `f64` otherwise, so round trips are lossless.
//! Label maps use `u8`. Displacement fields carry `"components": 3` and store the
//! three vector components interleaved per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DisplacementField, Grid, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
    pub endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
}

impl Header {
    fn new(grid: &Grid, dtype: Dtype, components: Option<usize>) -> Self {
        Self {
            shape: grid.shape,
            spacing: grid.spacing,
            origin: grid.origin,
            dtype,
            order: "x-fastest".into(),
            endianness: "little".into(),
            components,
        }
    }

    fn grid(&self, path: &Path) -> Result<Grid> {
        Grid::new(self.shape, self.spacing, self.origin).map_err(|e| Error::format(path, e.to_string()))
    }

    fn element_count(&self) -> usize {
        self.shape.iter().product::<usize>() * self.components.unwrap_or(1)
    }
}

/// Payload path belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    let mut s = header.as_os_str().to_owned();
    s.push(".raw");
    PathBuf::from(s)
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: Header = serde_json::from_str(&text).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if h.order != "x-fastest" {
        return Err(Error::format(path, format!("unsupported order {:?}", h.order)));
    }
    if h.endianness != "little" {
        return Err(Error::format(
            path,
            format!("unsupported endianness {:?}", h.endianness),
        ));
    }
    Ok(h)
}

fn read_payload(path: &Path, h: &Header) -> Result<Vec<u8>> {
    let raw = payload_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let want = h.element_count() * h.dtype.size();
    if bytes.len() != want {
        return Err(Error::format(
            &raw,
            format!("payload has {} bytes, header implies {want}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn encode_floats(values: impl Iterator<Item = f64> + Clone) -> (Dtype, Vec<u8>) {
    let narrow = values.clone().all(|v| (v as f32) as f64 == v || v.is_nan());
    if narrow {
        (Dtype::F32, values.flat_map(|v| (v as f32).to_le_bytes()).collect())
    } else {
        (Dtype::F64, values.flat_map(|v| v.to_le_bytes()).collect())
    }
}

fn decode_floats(path: &Path, dtype: Dtype, bytes: &[u8]) -> Result<Vec<f64>> {
    match dtype {
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect()),
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect()),
        Dtype::U8 => Err(Error::format(path, "expected a floating-point dtype, found u8")),
    }
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let (dtype, payload) = encode_floats(v.data.iter().copied());
    write_pair(path, &Header::new(&v.grid, dtype, None), &payload)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let h = read_header(path)?;
    if h.components.unwrap_or(1) != 1 {
        return Err(Error::format(path, "expected a scalar volume"));
    }
    let grid = h.grid(path)?;
    let data = decode_floats(path, h.dtype, &read_payload(path, &h)?)?;
    Volume::new(grid, data)
}

pub fn write_labels(path: &Path, m: &LabelMap) -> Result<()> {
    write_pair(path, &Header::new(&m.grid, Dtype::U8, None), m.data())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let h = read_header(path)?;
    if h.dtype != Dtype::U8 || h.components.unwrap_or(1) != 1 {
        return Err(Error::format(path, "label maps must be scalar u8"));
    }
    let grid = h.grid(path)?;
    LabelMap::new(grid, read_payload(path, &h)?)
}

pub fn write_field(path: &Path, f: &DisplacementField) -> Result<()> {
    let (dtype, payload) = encode_floats(f.vectors.iter().flatten().copied());
    write_pair(path, &Header::new(&f.grid, dtype, Some(3)), &payload)
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let h = read_header(path)?;
    if h.components != Some(3) {
        return Err(Error::format(path, "displacement fields need \"components\": 3"));
    }
    let grid = h.grid(path)?;
    let flat = decode_floats(path, h.dtype, &read_payload(path, &h)?)?;
    let vectors = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DisplacementField::new(grid, vectors)
}
