//! File formats: NIfTI-1 and raw volumes, binary checkpoints.
//!
//! The `*_any` helpers pick the format from the extension: `.nii` for
//! NIfTI-1, `.raw` for headerless float32 with a `.dims` sidecar.

pub mod checkpoint;
pub mod nifti;
pub mod raw;

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{LabelVolume, Volume};
use crate::warp::DeformationField;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.to_string_lossy();
        if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".raw") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::UnsupportedFormat(format!(
                "{name}: expected a .nii or .raw file"
            )))
        }
    }
}

pub fn read_volume_any<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::read_volume(path),
        VolumeFormat::Raw => raw::read_raw(path),
    }
}

pub fn write_volume_any<T: Scalar>(v: &Volume<T>, path: &Path) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::write_volume(v, path),
        VolumeFormat::Raw => raw::write_raw(v, path),
    }
}

/// Raw label files hold float32 label values.
pub fn read_labels_any(path: &Path) -> Result<LabelVolume> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::read_labels(path),
        VolumeFormat::Raw => {
            let v: Volume<f64> = raw::read_raw(path)?;
            let data = v
                .data()
                .iter()
                .map(|&x| {
                    if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                        Ok(x as u32)
                    } else {
                        Err(Error::InvalidLabel(x))
                    }
                })
                .collect::<Result<Vec<u32>>>()?;
            LabelVolume::new(v.dims(), data)
        }
    }
}

pub fn write_labels_any(l: &LabelVolume, path: &Path) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::write_labels(l, path),
        VolumeFormat::Raw => {
            let data = l.data().iter().map(|&x| x as f32).collect();
            raw::write_raw(&Volume::<f32>::new(l.dims(), data)?, path)
        }
    }
}

/// Fields are written as 4D NIfTI only.
pub fn write_field_any<T: Scalar>(f: &DeformationField<T>, path: &Path) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti => nifti::write_field(f, path),
        VolumeFormat::Raw => Err(Error::UnsupportedFormat(format!(
            "{}: displacement fields are written as .nii",
            path.display()
        ))),
    }
}
