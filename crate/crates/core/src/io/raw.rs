//! Headerless little-endian float32 volumes with a `<file>.dims` sidecar
//! holding `dims=D,H,W`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Dims, Volume};

/// Sidecar path: the payload path with `.dims` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dims");
    PathBuf::from(s)
}

pub fn parse_sidecar(text: &str) -> Result<Dims> {
    for line in text.lines() {
        let line = line.trim();
        if let Some(value) = line.strip_prefix("dims=") {
            return value.trim().parse();
        }
    }
    Err(Error::UnsupportedFormat(format!(
        "raw sidecar has no 'dims=D,H,W' line: {text:?}"
    )))
}

pub fn volume_from_raw<T: Scalar>(bytes: &[u8], dims: Dims) -> Result<Volume<T>> {
    let expected = 4 * dims.voxels();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Volume::new(dims, data)
}

pub fn volume_to_raw<T: Scalar>(v: &Volume<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * v.data().len());
    for x in v.data() {
        out.extend_from_slice(&x.to_f32().expect("Scalar converts to f32").to_le_bytes());
    }
    out
}

/// Reads the payload with dims taken from the sidecar.
pub fn read_raw<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    read_raw_with_dims(path, parse_sidecar(&text)?)
}

pub fn read_raw_with_dims<T: Scalar>(path: &Path, dims: Dims) -> Result<Volume<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    volume_from_raw(&bytes, dims)
}

/// Writes the payload and its sidecar.
pub fn write_raw<T: Scalar>(v: &Volume<T>, path: &Path) -> Result<()> {
    std::fs::write(path, volume_to_raw(v)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let [d, h, w] = v.dims().0;
    std::fs::write(&side, format!("dims={d},{h},{w}\n")).map_err(|e| Error::io(&side, e))
}
