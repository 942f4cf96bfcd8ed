//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FCNR"  u32 version=1  u32 flags (bit 0: optimizer state present)
//! u32 len + UTF-8 config text (the `key = value` config syntax)
//! u32 tensor count
//! per tensor: u32 len + UTF-8 name, u8 dtype, u8 rank, rank x u64 dims, payload
//! ```
//!
//! dtype 0 is float32, 1 is u64 (the optimizer step counter), 2 is float64
//! (used when the network runs in `f64`). Network tensors use the names of
//! [`RegNetParams::tensors`]; optimizer moments are `adam.m.<name>` and
//! `adam.v.<name>` for every trainable tensor, plus the scalar `adam.t`.

use std::path::Path;

use crate::config::{config_text, parse_config};
use crate::error::{Error, Result};
use crate::network::{ArchitectureVariant, RegNetParams};
use crate::scalar::Scalar;
use crate::training::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"FCNR";
pub const VERSION: u32 = 1;
const FLAG_ADAM: u32 = 1;

pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U64: u8 = 1;
pub const DTYPE_F64: u8 = 2;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub params: RegNetParams<T>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fails unless the stored network is of `variant`.
    pub fn expect_variant(&self, variant: ArchitectureVariant) -> Result<()> {
        if self.params.variant() != variant {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds a {} network, {} was requested",
                self.params.variant(),
                variant
            )));
        }
        Ok(())
    }
}

fn native_dtype<T: Scalar>() -> u8 {
    if std::mem::size_of::<T>() == 8 {
        DTYPE_F64
    } else {
        DTYPE_F32
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn header(&mut self, name: &str, dtype: u8, shape: &[usize]) {
        self.str(name);
        self.buf.push(dtype);
        self.buf.push(shape.len() as u8);
        for &d in shape {
            self.buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }

    fn floats<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        let dtype = native_dtype::<T>();
        self.header(name, dtype, shape);
        for &x in data {
            if dtype == DTYPE_F64 {
                self.buf.extend_from_slice(&x.as_f64().to_le_bytes());
            } else {
                let f = x.to_f32().expect("Scalar converts to f32");
                self.buf.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
}

pub fn to_bytes<T: Scalar>(
    params: &RegNetParams<T>,
    adam: Option<&AdamState<T>>,
    config: &TrainConfig,
) -> Result<Vec<u8>> {
    if config.variant != params.variant() {
        return Err(Error::Checkpoint(format!(
            "config names variant {} but the network is {}",
            config.variant,
            params.variant()
        )));
    }
    let tensors = params.tensors();
    let trainable: Vec<_> = tensors.iter().filter(|t| t.trainable).collect();
    if let Some(a) = adam {
        if a.m.len() != trainable.len() || a.v.len() != trainable.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer tracks {} tensors, network has {} trainable",
                a.m.len(),
                trainable.len()
            )));
        }
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(if adam.is_some() { FLAG_ADAM } else { 0 });
    w.str(&config_text(config));
    let count = tensors.len() + adam.map_or(0, |_| 2 * trainable.len() + 1);
    w.u32(count as u32);
    for t in &tensors {
        w.floats(&t.name, &t.shape, t.data);
    }
    if let Some(a) = adam {
        for (i, t) in trainable.iter().enumerate() {
            w.floats(&format!("adam.m.{}", t.name), &t.shape, &a.m[i]);
        }
        for (i, t) in trainable.iter().enumerate() {
            w.floats(&format!("adam.v.{}", t.name), &t.shape, &a.v[i]);
        }
        w.header("adam.t", DTYPE_U64, &[]);
        w.buf.extend_from_slice(&a.t.to_le_bytes());
    }
    Ok(w.buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("string is not UTF-8: {e}")))
    }
}

/// One decoded tensor record.
struct Record {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

impl Record {
    fn floats<T: Scalar>(&self) -> Result<Vec<T>> {
        match self.dtype {
            DTYPE_F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect()),
            DTYPE_F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect()),
            other => Err(Error::Checkpoint(format!(
                "tensor {} has dtype {other}, expected a float dtype",
                self.name
            ))),
        }
    }
}

fn read_record(c: &mut Cursor<'_>) -> Result<Record> {
    let name = c.str()?;
    let dtype = c.u8()?;
    let rank = c.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(c.u64()?).map_err(|_| {
            Error::Checkpoint(format!("tensor {name} has a dimension beyond usize"))
        })?);
    }
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U64 | DTYPE_F64 => 8,
        other => return Err(Error::Checkpoint(format!("tensor {name} has unknown dtype {other}"))),
    };
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is impossibly large")))?;
    let payload = c.take(count)?.to_vec();
    Ok(Record {
        name,
        dtype,
        shape,
        payload,
    })
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("missing FCNR magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let flags = c.u32()?;
    let config = parse_config(&c.str()?)?;
    let count = c.u32()? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        records.push(read_record(&mut c)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - c.pos
        )));
    }
    let mut take_record = |name: &str| -> Result<Record> {
        let i = records
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        Ok(records.swap_remove(i))
    };

    let mut params = RegNetParams::<T>::zeros(config.variant);
    params.pool = config.pool;
    let mut trainable_names = Vec::new();
    for t in params.tensors_mut() {
        let r = take_record(&t.name)?;
        if r.shape != t.shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {:?} in the file, the {} network needs {:?}",
                t.name, r.shape, config.variant, t.shape
            )));
        }
        t.data.copy_from_slice(&r.floats()?);
        if t.trainable {
            trainable_names.push((t.name, t.shape));
        }
    }
    let adam = if flags & FLAG_ADAM != 0 {
        let mut moment = |prefix: &str| -> Result<Vec<Vec<T>>> {
            trainable_names
                .iter()
                .map(|(name, shape)| {
                    let r = take_record(&format!("{prefix}.{name}"))?;
                    if &r.shape != shape {
                        return Err(Error::ShapeMismatch(format!(
                            "{prefix}.{name} has shape {:?}, expected {shape:?}",
                            r.shape
                        )));
                    }
                    r.floats()
                })
                .collect()
        };
        let m = moment("adam.m")?;
        let v = moment("adam.v")?;
        let t = take_record("adam.t")?;
        if t.dtype != DTYPE_U64 || !t.shape.is_empty() {
            return Err(Error::Checkpoint("adam.t must be a u64 scalar".into()));
        }
        let t = u64::from_le_bytes(t.payload[..8].try_into().expect("8 bytes"));
        Some(AdamState { m, v, t })
    } else {
        None
    };
    if let Some(extra) = records.first() {
        return Err(Error::ShapeMismatch(format!(
            "tensor {} does not belong to a {} network",
            extra.name, config.variant
        )));
    }
    Ok(Checkpoint {
        config,
        params,
        adam,
    })
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &RegNetParams<T>,
    adam: Option<&AdamState<T>>,
    config: &TrainConfig,
) -> Result<()> {
    let bytes = to_bytes(params, adam, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
