//! Volumetric domain types.
//!
//! All 3D arrays are stored in C order: the flat index of voxel `(i, j, k)` is
//! `(i * shape[1] + j) * shape[2] + k`. Multi-channel maps are channel-major,
//! one contiguous volume per channel.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

pub type Shape3 = [usize; 3];

pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: Shape3, i: usize, j: usize, k: usize) -> usize {
    (i * shape[1] + j) * shape[2] + k
}

/// Grid extent plus the voxel-to-world mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: Shape3,
    /// Voxel edge lengths in mm.
    pub spacing: [f64; 3],
    /// Row-major 4x4 voxel-to-world transform.
    pub affine: [[f64; 4]; 4],
}

impl Geometry {
    /// Axis-aligned geometry whose affine is `diag(spacing, 1)`.
    pub fn new(shape: Shape3, spacing: [f64; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for (a, s) in spacing.iter().enumerate() {
            affine[a][a] = *s;
        }
        affine[3][3] = 1.0;
        Self::with_affine(shape, spacing, affine)
    }

    pub fn with_affine(shape: Shape3, spacing: [f64; 3], affine: [[f64; 4]; 4]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Validation(format!("empty grid {shape:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation(format!(
                "spacing components must be positive, got {spacing:?}"
            )));
        }
        Ok(Self { shape, spacing, affine })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Same spacing and orientation, different extent, with the world origin
    /// moved so that voxel `offset` of `self` maps to voxel 0 of the result.
    pub fn sub_grid(&self, offset: [isize; 3], shape: Shape3) -> Self {
        let mut affine = self.affine;
        for r in 0..3 {
            let shift: f64 = (0..3).map(|c| self.affine[r][c] * offset[c] as f64).sum();
            affine[r][3] += shift;
        }
        Self { shape, spacing: self.spacing, affine }
    }
}

/// A single-channel scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(id: impl Into<String>, geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.voxels() {
            return Err(Error::Shape(format!(
                "{} values for grid {:?}",
                data.len(),
                geometry.shape
            )));
        }
        Ok(Self { id: id.into(), geometry, data })
    }

    pub fn filled(id: impl Into<String>, geometry: Geometry, value: f32) -> Self {
        let data = alloc::vec![value; geometry.voxels()];
        Self { id: id.into(), geometry, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.geometry.shape
    }

    /// Rejects NaN and infinite intensities.
    pub fn validate_finite(&self) -> Result<()> {
        let count = self.data.iter().filter(|v| !v.is_finite()).count();
        if count > 0 {
            return Err(Error::NonFinite { count });
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[flat_index(self.shape(), i, j, k)]
    }

    /// Copy with the same metadata and new intensities.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { id: self.id.clone(), geometry: self.geometry.clone(), data }
    }
}

/// Integer label field, background 0, left 1, right 2.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub id: String,
    pub geometry: Geometry,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(id: impl Into<String>, geometry: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geometry.voxels() {
            return Err(Error::Shape(format!(
                "{} labels for grid {:?}",
                labels.len(),
                geometry.shape
            )));
        }
        if let Some((index, &label)) =
            labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CLASSES)
        {
            return Err(Error::LabelOutOfRange { label, index, classes: NUM_CLASSES });
        }
        Ok(Self { id: id.into(), geometry, labels })
    }

    pub fn background(id: impl Into<String>, geometry: Geometry) -> Self {
        let labels = alloc::vec![0; geometry.voxels()];
        Self { id: id.into(), geometry, labels }
    }

    pub fn shape(&self) -> Shape3 {
        self.geometry.shape
    }

    /// Binary indicator of one label value.
    pub fn binary(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// K-channel binary encoding of a label field.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask {
    pub classes: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl OneHotMask {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.shape);
        &self.data[c * n..(c + 1) * n]
    }
}

/// Per-voxel class probabilities; every voxel is a point on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub shape: Shape3,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, shape: Shape3, data: Vec<f32>) -> Result<Self> {
        if data.len() != classes * voxel_count(shape) {
            return Err(Error::Shape(format!(
                "{} values for {classes} x {shape:?}",
                data.len()
            )));
        }
        Ok(Self { classes, shape, data })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.shape);
        &self.data[c * n..(c + 1) * n]
    }

    /// Voxelwise mean of two maps of the same layout.
    pub fn average(&self, other: &Self) -> Result<Self> {
        if self.classes != other.classes || self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot average {}x{:?} with {}x{:?}",
                self.classes, self.shape, other.classes, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| 0.5 * (a + b)).collect();
        Ok(Self { classes: self.classes, shape: self.shape, data })
    }
}

/// Single-channel critic output in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub shape: Shape3,
    pub data: Vec<f32>,
}
