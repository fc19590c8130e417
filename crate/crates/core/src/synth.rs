//! Ellipsoid phantoms with bilateral labels.
//!
//! The two structures are mirror images across the mid-plane of the first
//! axis. The image is `background + contrast * structure + smoothed noise`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Geometry, LabelMask, Shape3, Volume};
use crate::{LEFT_LABEL, RIGHT_LABEL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    /// Center of the left structure in voxel coordinates. The right center
    /// mirrors it across the first axis.
    pub left_center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub background: f32,
    pub left_contrast: f32,
    pub right_contrast: f32,
    pub noise_std: f32,
    /// Gaussian sigma in voxels applied to the noise field; 0 disables it.
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64; 3],
            spacing: [1.0; 3],
            left_center: [26.5, 31.5, 31.5],
            semi_axes: [4.5, 7.0, 6.0],
            background: 0.0,
            left_contrast: 1.0,
            right_contrast: 1.0,
            noise_std: 0.05,
            smoothing: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn right_center(&self) -> [f64; 3] {
        let [x, y, z] = self.left_center;
        [(self.shape[0] as f64 - 1.0) - x, y, z]
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("phantom shape {:?} has an empty axis", self.shape)));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config(format!("semi-axes {:?} must be positive", self.semi_axes)));
        }
        if !(self.noise_std >= 0.0) || !(self.smoothing >= 0.0) {
            return Err(Error::Config("noise and smoothing must be non-negative".into()));
        }
        let mid = (self.shape[0] as f64 - 1.0) / 2.0;
        if self.left_center[0] + self.semi_axes[0] >= mid {
            return Err(Error::Config(format!(
                "left structure at {:?} reaches the mid-plane {mid}",
                self.left_center
            )));
        }
        for a in 0..3 {
            let (c, r, n) = (self.left_center[a], self.semi_axes[a], self.shape[a] as f64);
            if c - r < 0.0 || c + r > n - 1.0 {
                return Err(Error::Config(format!(
                    "ellipsoid centered at {:?} with semi-axes {:?} leaves the {:?} grid",
                    self.left_center, self.semi_axes, self.shape
                )));
            }
        }
        Ok(())
    }
}

fn inside(p: [usize; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| (p[a] as f64 - c[a]) / r[a]).map(|x| x * x).sum::<f64>() <= 1.0
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|t| libm::exp(-(t * t) as f64 / (2.0 * sigma * sigma)) as f32)
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_smooth(data: &mut [f32], shape: Shape3, sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let (len, stride) = (shape[axis], strides[axis]);
        line.resize(len, 0.0f32);
        for base in 0..data.len() {
            if (base / stride) % len != 0 {
                continue;
            }
            for t in 0..len {
                line[t] = data[base + t * stride];
            }
            for t in 0..len {
                let mut acc = 0.0;
                for (w, off) in kernel.iter().zip(-radius..=radius) {
                    let s = (t as isize + off).clamp(0, len as isize - 1) as usize;
                    acc += w * line[s];
                }
                data[base + t * stride] = acc;
            }
        }
    }
}

/// Image and label mask for one phantom, identified by `id`.
pub fn generate(id: &str, spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let shape = spec.shape;
    let geometry = Geometry::new(shape, spec.spacing)?;
    let n = voxel_count(shape);
    let (cl, cr) = (spec.left_center, spec.right_center());
    let mut labels = vec![0u8; n];
    let mut image = vec![spec.background; n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = (i * shape[1] + j) * shape[2] + k;
                if inside([i, j, k], cl, spec.semi_axes) {
                    labels[idx] = LEFT_LABEL;
                    image[idx] += spec.left_contrast;
                } else if inside([i, j, k], cr, spec.semi_axes) {
                    labels[idx] = RIGHT_LABEL;
                    image[idx] += spec.right_contrast;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, spec.noise_std)
            .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
        let mut noise: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        gaussian_smooth(&mut noise, shape, spec.smoothing);
        for (v, e) in image.iter_mut().zip(noise) {
            *v += e;
        }
    }
    let volume = Volume::new(String::from(id), geometry.clone(), image)?;
    let mask = LabelMask::new(String::from(id), geometry, labels)?;
    Ok((volume, mask))
}

/// Ranges from which per-case phantom parameters are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomRanges {
    pub shape: Shape3,
    pub spacing: [f64; 3],
    pub semi_axes_min: [f64; 3],
    pub semi_axes_max: [f64; 3],
    /// Gap between the two structures along the first axis, in voxels.
    pub gap_min: f64,
    pub gap_max: f64,
    /// Maximum displacement of the pair's midpoint from the grid center.
    pub jitter: f64,
    pub contrast_min: f32,
    pub contrast_max: f32,
    pub noise_std: f32,
    pub smoothing: f64,
}

impl Default for PhantomRanges {
    fn default() -> Self {
        Self {
            shape: [64; 3],
            spacing: [1.0; 3],
            semi_axes_min: [4.0, 6.0, 5.0],
            semi_axes_max: [5.0, 8.0, 7.0],
            gap_min: 1.0,
            gap_max: 2.0,
            jitter: 3.0,
            contrast_min: 0.8,
            contrast_max: 1.0,
            noise_std: 0.05,
            smoothing: 1.0,
        }
    }
}

impl PhantomRanges {
    /// Draws the spec of one case. The case seed also seeds its noise.
    pub fn sample(&self, seed: u64) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let semi_axes: [f64; 3] = core::array::from_fn(|a| uniform(self.semi_axes_min[a], self.semi_axes_max[a]));
        let gap = uniform(self.gap_min, self.gap_max);
        let mid: [f64; 3] = core::array::from_fn(|a| (self.shape[a] as f64 - 1.0) / 2.0);
        // Mirroring pins the pair's midpoint to the first-axis mid-plane.
        let left_center = [
            mid[0] - semi_axes[0] - gap / 2.0,
            mid[1] + uniform(-self.jitter, self.jitter),
            mid[2] + uniform(-self.jitter, self.jitter),
        ];
        let left_contrast = uniform(self.contrast_min as f64, self.contrast_max as f64) as f32;
        let right_contrast = uniform(self.contrast_min as f64, self.contrast_max as f64) as f32;
        PhantomSpec {
            shape: self.shape,
            spacing: self.spacing,
            left_center,
            semi_axes,
            background: 0.0,
            left_contrast,
            right_contrast,
            noise_std: self.noise_std,
            smoothing: self.smoothing,
            seed,
        }
    }

    /// Specs for `n` cases with seeds `base_seed, base_seed + 1, ...`.
    pub fn dataset(&self, n: usize, base_seed: u64) -> Vec<(String, PhantomSpec)> {
        (0..n)
            .map(|i| (format!("phantom_{i:03}"), self.sample(base_seed + i as u64)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> PhantomSpec {
        PhantomSpec { noise_std: 0.0, ..PhantomSpec::default() }
    }

    #[test]
    fn noiseless_threshold_recovers_labels() {
        let (v, m) = generate("a", &noiseless()).unwrap();
        for (x, l) in v.data.iter().zip(&m.labels) {
            assert_eq!(*x > 0.5, *l != 0);
        }
    }

    #[test]
    fn seeded_generation_is_repeatable() {
        let spec = PhantomSpec { seed: 9, ..PhantomSpec::default() };
        assert_eq!(generate("a", &spec).unwrap(), generate("a", &spec).unwrap());
        let other = PhantomSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate("a", &spec).unwrap().0, generate("a", &other).unwrap().0);
    }

    #[test]
    fn voxel_count_matches_lattice_enumeration() {
        let spec = PhantomSpec {
            semi_axes: [5.0, 6.0, 7.0],
            left_center: [10.0, 30.0, 31.0],
            ..noiseless()
        };
        let (_, m) = generate("a", &spec).unwrap();
        let mut expected = 0;
        for x in -5i64..=5 {
            for y in -6i64..=6 {
                for z in -7i64..=7 {
                    // Integer form of x²/25 + y²/36 + z²/49 <= 1.
                    if x * x * 36 * 49 + y * y * 25 * 49 + z * z * 25 * 36 <= 25 * 36 * 49 {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(m.count(LEFT_LABEL), expected);
        assert_eq!(m.count(RIGHT_LABEL), expected);
    }

    #[test]
    fn out_of_bounds_is_a_config_error() {
        let spec = PhantomSpec { left_center: [3.0, 31.5, 31.5], ..PhantomSpec::default() };
        assert!(matches!(generate("a", &spec), Err(Error::Config(_))));
        let crossing = PhantomSpec { left_center: [30.0, 31.5, 31.5], ..PhantomSpec::default() };
        assert!(matches!(generate("a", &crossing), Err(Error::Config(_))));
    }

    #[test]
    fn mirror_flip_swaps_labels() {
        let (_, m) = generate("a", &noiseless()).unwrap();
        let s = m.shape();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let a = m.labels[(i * s[1] + j) * s[2] + k];
                    let b = m.labels[((s[0] - 1 - i) * s[1] + j) * s[2] + k];
                    let swapped = match a {
                        1 => 2,
                        2 => 1,
                        x => x,
                    };
                    assert_eq!(b, swapped);
                }
            }
        }
    }

    #[test]
    fn sampled_specs_are_valid_and_left_first() {
        let ranges = PhantomRanges::default();
        for (_, spec) in ranges.dataset(40, 3) {
            spec.validate().unwrap();
            assert!(spec.left_center[0] < spec.right_center()[0]);
        }
    }

    #[test]
    fn smoothing_preserves_constants() {
        let mut d = vec![2.5f32; 6 * 5 * 4];
        gaussian_smooth(&mut d, [6, 5, 4], 1.5);
        assert!(d.iter().all(|v| (v - 2.5).abs() < 1e-5));
    }
}
