//! NIfTI-1 reading and writing (`.nii` and `.nii.gz`).
//!
//! Arrays are indexed `[i, j, k]` with `i` the first NIfTI axis. The affine is
//! read from the sform rows when `sform_code > 0`, otherwise built from the
//! voxel spacing.

use std::path::Path;

use dualview_core::{Error as CoreError, Geometry, LabelMask, Volume};
use ndarray::Array3;
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// On-disk label values of the two structures. Background is always 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelMap {
    pub left: u8,
    pub right: u8,
}

impl Default for LabelMap {
    fn default() -> Self {
        Self { left: 1, right: 2 }
    }
}

impl LabelMap {
    pub fn validate(&self) -> Result<()> {
        if self.left == 0 || self.right == 0 || self.left == self.right {
            return Err(CliError::Config(format!(
                "labels.left ({}) and labels.right ({}) must be distinct and non-zero",
                self.left, self.right
            )));
        }
        Ok(())
    }

    fn to_internal(self, value: u8) -> Option<u8> {
        match value {
            0 => Some(0),
            v if v == self.left => Some(dualview_core::LEFT_LABEL),
            v if v == self.right => Some(dualview_core::RIGHT_LABEL),
            _ => None,
        }
    }

    fn to_file(self, label: u8) -> u8 {
        match label {
            dualview_core::LEFT_LABEL => self.left,
            dualview_core::RIGHT_LABEL => self.right,
            _ => 0,
        }
    }
}

/// Case id of a NIfTI path: the file name without `.nii` / `.nii.gz`.
pub fn case_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .unwrap_or(&name)
        .to_string()
}

pub fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn read_raw(path: &Path) -> Result<(Geometry, Vec<f32>)> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| match e {
        nifti::NiftiError::Io(io) => CliError::io(path, io),
        other => CliError::format(path, other),
    })?;
    let header = obj.header().clone();
    let dims = header.dim().map_err(|e| CliError::format(path, e))?.to_vec();
    if dims.len() < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(CliError::format(
            path,
            format!("expected a single-channel 3D image, found dimensions {dims:?}"),
        ));
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let array = obj.into_volume().into_ndarray::<f32>().map_err(|e| CliError::format(path, e))?;
    let data: Vec<f32> = array.iter().copied().collect();
    let spacing = [1, 2, 3].map(|a| header.pixdim[a] as f64);
    let geometry = if header.sform_code > 0 {
        let rows = [header.srow_x, header.srow_y, header.srow_z];
        let mut affine = [[0.0; 4]; 4];
        for (r, row) in rows.iter().enumerate() {
            affine[r] = row.map(|v| v as f64);
        }
        affine[3] = [0.0, 0.0, 0.0, 1.0];
        Geometry::with_affine(shape, spacing, affine)
    } else {
        Geometry::new(shape, spacing)
    }
    .map_err(|e| CliError::format(path, e))?;
    Ok((geometry, data))
}

/// Loads a 3D image, rejecting non-finite voxels.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (geometry, data) = read_raw(path)?;
    let volume = Volume::new(case_id(path), geometry, data)?;
    volume.validate_finite()?;
    Ok(volume)
}

/// Loads a label image and maps its values through `map`.
pub fn load_labels(path: &Path, map: &LabelMap) -> Result<LabelMask> {
    let (geometry, data) = read_raw(path)?;
    let mut labels = Vec::with_capacity(data.len());
    for (index, &v) in data.iter().enumerate() {
        if !(v >= 0.0 && v <= 255.0 && v.fract() == 0.0) {
            return Err(CliError::format(path, format!("voxel {index} has non-label value {v}")));
        }
        let label = map.to_internal(v as u8).ok_or(CoreError::LabelOutOfRange {
            label: v as u8,
            index,
            classes: dualview_core::NUM_CLASSES,
        })?;
        labels.push(label);
    }
    Ok(LabelMask::new(case_id(path), geometry, labels)?)
}

fn header_for(geometry: &Geometry) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    for a in 0..3 {
        h.pixdim[a + 1] = geometry.spacing[a] as f32;
    }
    h.qform_code = 0;
    h.sform_code = 2;
    h.srow_x = geometry.affine[0].map(|v| v as f32);
    h.srow_y = geometry.affine[1].map(|v| v as f32);
    h.srow_z = geometry.affine[2].map(|v| v as f32);
    // Millimetres.
    h.xyzt_units = 2;
    h
}

fn write_error(path: &Path, e: nifti::NiftiError) -> CliError {
    match e {
        nifti::NiftiError::Io(io) => CliError::io(path, io),
        other => CliError::format(path, other),
    }
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let array = Array3::from_shape_vec(v.shape(), v.data.clone()).map_err(|e| CliError::format(path, e))?;
    let header = header_for(&v.geometry);
    WriterOptions::new(path).reference_header(&header).write_nifti(&array).map_err(|e| write_error(path, e))
}

pub fn save_labels(m: &LabelMask, path: &Path, map: &LabelMap) -> Result<()> {
    let values: Vec<u8> = m.labels.iter().map(|&l| map.to_file(l)).collect();
    let array = Array3::from_shape_vec(m.shape(), values).map_err(|e| CliError::format(path, e))?;
    let header = header_for(&m.geometry);
    WriterOptions::new(path).reference_header(&header).write_nifti(&array).map_err(|e| write_error(path, e))
}
