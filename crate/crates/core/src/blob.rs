//! Binary array blobs: an 8-byte little-endian header length, a JSON header
//! naming each array and its row-major shape, then the arrays' f64 data in
//! little-endian order.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VllError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    order: String,
    arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: &str, m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)]);
            }
        }
        Self { name: name.to_string(), shape: vec![r, c], data }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            s => Err(VllError::Shape(format!("array '{}' has shape {s:?}, expected 2-d", self.name))),
        }
    }
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(VllError::Shape(format!("array '{}' data does not match its shape", a.name)));
        }
    }
    let header = Header {
        dtype: "f64le".into(),
        order: "row-major".into(),
        arrays: arrays.iter().map(|a| ArrayHeader { name: a.name.clone(), shape: a.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| VllError::Schema(e.to_string()))?;
    let total: usize = arrays.iter().map(|a| a.data.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * total);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let bad = |s: &str| VllError::Schema(format!("malformed blob: {s}"));
    if bytes.len() < 8 {
        return Err(bad("truncated length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.dtype != "f64le" || header.order != "row-major" {
        return Err(bad("unsupported dtype or order"));
    }
    let mut off = 8 + hlen;
    let mut out = Vec::with_capacity(header.arrays.len());
    for a in header.arrays {
        let n: usize = a.shape.iter().product();
        let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad("truncated data"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        off += 8 * n;
        out.push(NamedArray { name: a.name, shape: a.shape, data });
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_blob(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    write_atomic(path, &encode(arrays)?)
}

pub fn read_blob(path: &Path) -> Result<Vec<NamedArray>> {
    decode(&fs::read(path)?)
}
