//! High-frequency view synthesis by Fourier amplitude masking.
//!
//! A volume is transformed to the frequency domain, split into amplitude and
//! phase, the amplitude is multiplied by a binary high-pass mask, and the
//! masked amplitude is recombined with the untouched phase and transformed
//! back. Spectra are kept in the centered layout (zero frequency at index
//! `n / 2` on every axis).

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{fft3, fftshift, ifft3, ifftshift};
use crate::volume::{voxel_count, Shape3, Volume};

/// Amplitude and phase of a centered 3D spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub shape: Shape3,
    pub amplitude: Vec<f64>,
    /// Angles in (-π, π].
    pub phase: Vec<f64>,
}

impl SpectralDecomposition {
    /// Recombines `amplitude · e^{i·phase}` into a centered complex spectrum.
    pub fn to_spectrum(&self) -> Vec<Complex64> {
        self.amplitude
            .iter()
            .zip(&self.phase)
            .map(|(&a, &p)| Complex64::from_polar(a, p))
            .collect()
    }
}

pub fn decompose_values(data: &[f64], shape: Shape3) -> SpectralDecomposition {
    let mut spectrum: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft3(&mut spectrum, shape);
    let centered = fftshift(&spectrum, shape);
    let amplitude = centered.iter().map(|z| z.norm()).collect();
    let phase = centered
        .iter()
        .map(|z| {
            let p = z.arg();
            if p <= -PI { PI } else { p }
        })
        .collect();
    SpectralDecomposition { shape, amplitude, phase }
}

pub fn decompose(v: &Volume) -> Result<SpectralDecomposition> {
    v.validate_finite()?;
    let data: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    Ok(decompose_values(&data, v.shape()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterGeometry {
    /// Ball in normalized frequency space.
    #[default]
    Radial,
    /// Cube in normalized frequency space (max-axis coordinate).
    Cubic,
}

impl core::str::FromStr for FilterGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial" => Ok(Self::Radial),
            "cubic" => Ok(Self::Cubic),
            other => Err(Error::Config(format!("unknown filter geometry `{other}`"))),
        }
    }
}

/// Normalized centered frequency coordinate of index `i` on an axis of
/// length `n`; the Nyquist bin sits at -1.
pub fn normalized_frequency(i: usize, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    (i as f64 - (n / 2) as f64) / (n as f64 / 2.0)
}

/// Binary high-pass mask in centered layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HighPassFilter {
    pub cutoff: f64,
    pub geometry: FilterGeometry,
    pub shape: Shape3,
    mask: Vec<bool>,
}

impl HighPassFilter {
    /// Zeroes every bin whose normalized radius (radial) or max-axis
    /// coordinate (cubic) is at most `cutoff`. A cutoff of 0 still removes DC.
    pub fn new(shape: Shape3, cutoff: f64, geometry: FilterGeometry) -> Result<Self> {
        if !(0.0..1.0).contains(&cutoff) {
            return Err(Error::Validation(format!("cutoff {cutoff} outside [0, 1)")));
        }
        let mut mask = Vec::with_capacity(voxel_count(shape));
        for i in 0..shape[0] {
            let fi = normalized_frequency(i, shape[0]);
            for j in 0..shape[1] {
                let fj = normalized_frequency(j, shape[1]);
                for k in 0..shape[2] {
                    let fk = normalized_frequency(k, shape[2]);
                    let distance = match geometry {
                        FilterGeometry::Radial => libm::sqrt(fi * fi + fj * fj + fk * fk),
                        FilterGeometry::Cubic => fi.abs().max(fj.abs()).max(fk.abs()),
                    };
                    mask.push(distance > cutoff);
                }
            }
        }
        Ok(Self { cutoff, geometry, shape, mask })
    }

    /// All-pass mask. Not a high-pass filter: it keeps DC and is only useful
    /// as an identity reference.
    pub fn identity(shape: Shape3) -> Self {
        Self {
            cutoff: 0.0,
            geometry: FilterGeometry::Radial,
            shape,
            mask: alloc::vec![true; voxel_count(shape)],
        }
    }

    /// Centered-layout mask values.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Mean of the mask.
    pub fn pass_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

pub fn build_filter(shape: Shape3, cutoff: f64, geometry: FilterGeometry) -> Result<HighPassFilter> {
    HighPassFilter::new(shape, cutoff, geometry)
}

/// Imaginary residue left after the inverse transform, relative to the input
/// peak, above which the output is rejected.
pub const MAX_IMAGINARY_RESIDUE: f64 = 1e-5;

/// Double-precision high-frequency view of raw values.
pub fn high_frequency_values(data: &[f64], shape: Shape3, filter: &HighPassFilter) -> Result<Vec<f64>> {
    if filter.shape != shape || data.len() != voxel_count(shape) {
        return Err(Error::Shape(format!(
            "filter {:?} does not match volume {:?}",
            filter.shape, shape
        )));
    }
    let mut spectral = decompose_values(data, shape);
    for (a, &keep) in spectral.amplitude.iter_mut().zip(filter.mask()) {
        if !keep {
            *a = 0.0;
        }
    }
    let mut spectrum = ifftshift(&spectral.to_spectrum(), shape);
    ifft3(&mut spectrum, shape);

    let peak = data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let residue = spectrum.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    if residue > MAX_IMAGINARY_RESIDUE * peak + 1e-30 {
        return Err(Error::Validation(format!(
            "inverse transform left imaginary residue {residue:e} (peak {peak:e})"
        )));
    }
    Ok(spectrum.into_iter().map(|z| z.re).collect())
}

/// Real part of the inverse transform of the masked amplitude with the
/// original phase. Metadata is copied from the input.
pub fn high_frequency_view(v: &Volume, filter: &HighPassFilter) -> Result<Volume> {
    v.validate_finite()?;
    let data: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    let out = high_frequency_values(&data, v.shape(), filter)?;
    Ok(v.with_data(out.into_iter().map(|x| x as f32).collect()))
}

/// Plain min-max rescale to [0, 1]; constant input maps to zeros.
pub fn rescale_unit(v: &Volume) -> Volume {
    let (lo, hi) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return v.with_data(alloc::vec![0.0; v.data.len()]);
    }
    let scale = 1.0 / (hi as f64 - lo as f64);
    v.with_data(v.data.iter().map(|&x| ((x as f64 - lo as f64) * scale) as f32).collect())
}

/// Voxelwise `|v - vhat|`.
pub fn difference_map(v: &Volume, vhat: &Volume) -> Result<Volume> {
    if v.shape() != vhat.shape() {
        return Err(Error::Shape(format!(
            "difference of {:?} and {:?}",
            v.shape(),
            vhat.shape()
        )));
    }
    Ok(v.with_data(v.data.iter().zip(&vhat.data).map(|(a, b)| (a - b).abs()).collect()))
}

/// Sum of squared intensities.
pub fn energy(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum()
}
