//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Reading accepts uint8, int16 and float32 payloads in either byte order;
//! writing always produces little-endian float32. The file's first three
//! dimensions map to `(W, H, D)`: `dim[1]` varies fastest, which is the
//! crate's raster order. Orientation matrices are neither read nor written.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Dims, LabelVolume, Volume};
use crate::warp::DeformationField;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

/// The header fields this crate interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    /// `dim[1..=dim[0]]`, fastest axis first.
    pub dim: Vec<usize>,
    pub datatype: i16,
    /// Voxel size along `dim[1..=3]`.
    pub pixdim: [f32; 3],
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
}

impl NiftiHeader {
    fn bytes_per_voxel(&self) -> Result<usize> {
        match self.datatype {
            DT_UINT8 => Ok(1),
            DT_INT16 => Ok(2),
            DT_FLOAT32 => Ok(4),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    /// Spatial dims in `(D, H, W)` order plus the count along the 4th axis.
    fn volume_dims(&self) -> Result<(Dims, usize)> {
        let get = |i: usize| self.dim.get(i).copied().unwrap_or(1);
        if self.dim.iter().skip(4).any(|&n| n != 1) {
            return Err(Error::UnsupportedFormat(format!(
                "NIfTI with more than 4 dimensions: {:?}",
                self.dim
            )));
        }
        Ok((Dims([get(2), get(1), get(0)]), get(3)))
    }

    fn spacing(&self) -> [f32; 3] {
        [self.pixdim[2], self.pixdim[1], self.pixdim[0]]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[at..at + N]);
        a
    }

    fn i16(&self, at: usize) -> i16 {
        let a = self.array(at);
        if self.big_endian {
            i16::from_be_bytes(a)
        } else {
            i16::from_le_bytes(a)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let a = self.array(at);
        if self.big_endian {
            f32::from_be_bytes(a)
        } else {
            f32::from_le_bytes(a)
        }
    }
}

/// Parses and validates the 348-byte header at the start of `bytes`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            found: bytes.len(),
        });
    }
    let size_field: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    let big_endian = if i32::from_le_bytes(size_field) == HEADER_SIZE as i32 {
        false
    } else if i32::from_be_bytes(size_field) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::UnsupportedFormat(format!(
            "header size field is {} (expected 348 in either byte order); not NIfTI-1",
            i32::from_le_bytes(size_field)
        )));
    };
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic == MAGIC_PAIR {
        return Err(Error::UnsupportedFormat(
            "magic 'ni1' marks a two-file .hdr/.img pair; only single-file 'n+1' is supported".into(),
        ));
    }
    if magic != MAGIC_SINGLE {
        return Err(Error::UnsupportedFormat(format!(
            "bad NIfTI magic {magic:?}, expected \"n+1\\0\""
        )));
    }
    let r = Reader { bytes, big_endian };
    let ndim = r.i16(OFF_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::UnsupportedFormat(format!("dim[0] = {ndim} is out of range 1..=7")));
    }
    let mut dim = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let n = r.i16(OFF_DIM + 2 * i);
        if n < 1 {
            return Err(Error::InvalidShape(format!("dim[{i}] = {n} must be positive")));
        }
        dim.push(n as usize);
    }
    let datatype = r.i16(OFF_DATATYPE);
    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::UnsupportedFormat(format!(
            "vox_offset {vox_offset} must be an integer >= 348 in a single-file NIfTI"
        )));
    }
    let header = NiftiHeader {
        dim,
        datatype,
        pixdim: [
            r.f32(OFF_PIXDIM + 4),
            r.f32(OFF_PIXDIM + 8),
            r.f32(OFF_PIXDIM + 12),
        ],
        vox_offset: vox_offset as usize,
        scl_slope: r.f32(OFF_SCL_SLOPE),
        scl_inter: r.f32(OFF_SCL_INTER),
        big_endian,
    };
    header.bytes_per_voxel()?;
    Ok(header)
}

/// Header plus decoded raw values (before any intensity scaling).
fn decode(bytes: &[u8]) -> Result<(NiftiHeader, Vec<f64>)> {
    let header = parse_header(bytes)?;
    let bpv = header.bytes_per_voxel()?;
    let count: usize = header.dim.iter().product();
    let expected = header.vox_offset + count * bpv;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[header.vox_offset..expected];
    let be = header.big_endian;
    let values = match header.datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let a = [c[0], c[1]];
                (if be { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }) as f64
            })
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| {
                let a = [c[0], c[1], c[2], c[3]];
                (if be { f32::from_be_bytes(a) } else { f32::from_le_bytes(a) }) as f64
            })
            .collect(),
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    Ok((header, values))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn apply_scaling(header: &NiftiHeader, values: &mut [f64]) {
    let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for v in values {
            *v = *v * slope + inter;
        }
    }
}

/// Decodes an intensity volume from in-memory file bytes.
pub fn volume_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Volume<T>> {
    let (header, mut values) = decode(bytes)?;
    let (dims, frames) = header.volume_dims()?;
    if frames != 1 {
        return Err(Error::InvalidShape(format!(
            "expected a 3D volume, file has {frames} frames along dim[4]"
        )));
    }
    apply_scaling(&header, &mut values);
    let mut v = Volume::new(dims, values.into_iter().map(T::of).collect())?;
    v.spacing = Some(header.spacing());
    Ok(v)
}

pub fn read_volume<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    volume_from_bytes(&read_file(path)?)
}

/// Decodes a label volume; stored values are used as-is, without scaling,
/// and must be non-negative integers.
pub fn labels_from_bytes(bytes: &[u8]) -> Result<LabelVolume> {
    let (header, values) = decode(bytes)?;
    let (dims, frames) = header.volume_dims()?;
    if frames != 1 {
        return Err(Error::InvalidShape(format!(
            "expected a 3D label volume, file has {frames} frames along dim[4]"
        )));
    }
    let labels = values
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::InvalidLabel(v))
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    LabelVolume::new(dims, labels)
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    labels_from_bytes(&read_file(path)?)
}

/// Decodes a displacement field stored as a 4D volume with 3 frames
/// holding `(Δd, Δh, Δw)` in voxels.
pub fn field_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<DeformationField<T>> {
    let (header, mut values) = decode(bytes)?;
    let (dims, frames) = header.volume_dims()?;
    if frames != 3 {
        return Err(Error::InvalidShape(format!(
            "a displacement field needs 3 frames along dim[4], file has {frames}"
        )));
    }
    apply_scaling(&header, &mut values);
    DeformationField::new(dims, values.into_iter().map(T::of).collect(), 0)
}

pub fn read_field<T: Scalar>(path: &Path) -> Result<DeformationField<T>> {
    field_from_bytes(&read_file(path)?)
}

/// Little-endian float32 file bytes for `frames` stacked volumes of `dims`.
fn encode<T: Scalar>(dims: Dims, frames: usize, spacing: [f32; 3], data: &[T]) -> Result<Vec<u8>> {
    let mut dim = [1i16; 8];
    let ndim = if frames > 1 { 4 } else { 3 };
    dim[0] = ndim;
    let axes = [dims.w(), dims.h(), dims.d(), frames];
    for (slot, &n) in dim[1..5].iter_mut().zip(&axes) {
        *slot = i16::try_from(n).map_err(|_| {
            Error::InvalidShape(format!("dimension {n} does not fit a NIfTI-1 header"))
        })?;
    }
    let mut out = vec![0u8; VOX_OFFSET + 4 * data.len()];
    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    for (i, d) in dim.iter().enumerate() {
        out[OFF_DIM + 2 * i..OFF_DIM + 2 * i + 2].copy_from_slice(&d.to_le_bytes());
    }
    out[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&DT_FLOAT32.to_le_bytes());
    out[OFF_BITPIX..OFF_BITPIX + 2].copy_from_slice(&32i16.to_le_bytes());
    // pixdim[0] is the qfac sign; pixdim[1..=3] follow dim[1..=3].
    let pixdim = [1.0f32, spacing[2], spacing[1], spacing[0], 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        out[OFF_PIXDIM + 4 * i..OFF_PIXDIM + 4 * i + 4].copy_from_slice(&p.to_le_bytes());
    }
    out[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    // Slope 0 means "no scaling", so -0.0 and every other float survive exactly.
    out[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&0f32.to_le_bytes());
    out[OFF_SCL_INTER..OFF_SCL_INTER + 4].copy_from_slice(&0f32.to_le_bytes());
    out[OFF_XYZT_UNITS] = 2; // millimetres
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC_SINGLE);
    for (chunk, v) in out[VOX_OFFSET..].chunks_exact_mut(4).zip(data) {
        let f = v.to_f32().expect("Scalar converts to f32");
        chunk.copy_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn volume_to_bytes<T: Scalar>(v: &Volume<T>) -> Result<Vec<u8>> {
    encode(v.dims(), 1, v.spacing.unwrap_or([1.0; 3]), v.data())
}

pub fn write_volume<T: Scalar>(v: &Volume<T>, path: &Path) -> Result<()> {
    write_file(path, &volume_to_bytes(v)?)
}

/// Labels are stored as float32, exact for labels below 2^24.
pub fn labels_to_bytes(l: &LabelVolume) -> Result<Vec<u8>> {
    let data: Vec<f32> = l.data().iter().map(|&x| x as f32).collect();
    encode(l.dims(), 1, [1.0; 3], &data)
}

pub fn write_labels(l: &LabelVolume, path: &Path) -> Result<()> {
    write_file(path, &labels_to_bytes(l)?)
}

pub fn field_to_bytes<T: Scalar>(f: &DeformationField<T>) -> Result<Vec<u8>> {
    encode(f.dims(), 3, [1.0; 3], f.disp())
}

pub fn write_field<T: Scalar>(f: &DeformationField<T>, path: &Path) -> Result<()> {
    write_file(path, &field_to_bytes(f)?)
}
