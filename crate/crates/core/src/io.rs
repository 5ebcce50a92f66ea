//! On-disk formats: gzip-compressed NIfTI-1 volumes and JSON annotations.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::volume::ndarray::IntoNdArray;
use nifti::writer::WriterOptions;
use nifti::{NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{PetVolume, Point3, Spacing};

/// Per-case sidecar annotation: the image-level label and the one center point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub case_id: String,
    pub class_label: usize,
    pub center_voxel: [usize; 3],
}

impl Annotation {
    pub fn center(&self) -> Point3 {
        let [x, y, z] = self.center_voxel;
        Point3::new(x, y, z)
    }
}

fn header_with_spacing(spacing: Spacing) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    let [sx, sy, sz] = spacing.0;
    header.pixdim = [1.0, sx as f32, sy as f32, sz as f32, 1.0, 1.0, 1.0, 1.0];
    // NIFTI_UNITS_MM
    header.xyzt_units = 2;
    header
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Write a volume as float32 NIfTI-1. A `.nii.gz` path is gzip-compressed.
pub fn write_volume(path: &Path, vol: &PetVolume) -> Result<()> {
    ensure_parent(path)?;
    let header = header_with_spacing(vol.spacing());
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(vol.data())
        .map_err(|e| Error::format(path, e))
}

/// Write a binary mask as uint8 NIfTI-1 (1 = inside).
pub fn write_mask(path: &Path, mask: &Array3<bool>, spacing: Spacing) -> Result<()> {
    ensure_parent(path)?;
    let header = header_with_spacing(spacing);
    let bytes = mask.mapv(u8::from);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&bytes)
        .map_err(|e| Error::format(path, e))
}

fn read_array(path: &Path) -> Result<(Array3<f32>, Spacing)> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e))?;
    let header = obj.header();
    let ndim = header.dim[0];
    if ndim != 3 {
        return Err(Error::format(path, format!("expected a 3D volume, header declares {ndim} dimensions")));
    }
    let spacing = Spacing([header.pixdim[1] as f64, header.pixdim[2] as f64, header.pixdim[3] as f64]);
    let data = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| Error::format(path, e))?
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::format(path, e))?;
    // Force standard (C) layout so downstream slices are contiguous.
    Ok((data.as_standard_layout().to_owned(), spacing))
}

pub fn read_volume(path: &Path) -> Result<PetVolume> {
    let (data, spacing) = read_array(path)?;
    PetVolume::new(data, spacing).map_err(|e| Error::format(path, e))
}

pub fn read_mask(path: &Path) -> Result<Array3<bool>> {
    let (data, _) = read_array(path)?;
    Ok(data.mapv(|v| v > 0.5))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path, e))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}
