//! Intensity normalization, patch extraction and label encodings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{flat_index, voxel_count, Geometry, LabelMask, OneHotMask, ProbabilityMap, Shape3, Volume};

/// Target patch geometry for the networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub target_shape: Shape3,
    /// Voxels with normalized intensity strictly above this are foreground.
    pub background_threshold: f32,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { target_shape: [128; 3], background_threshold: 0.0 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        for &n in &self.target_shape {
            if n < 16 || !n.is_power_of_two() {
                return Err(Error::Config(format!(
                    "patch extent {n} must be a power of two >= 16"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.background_threshold) {
            return Err(Error::Config(format!(
                "background threshold {} outside [0, 1]",
                self.background_threshold
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Clips to the `[clip_lo, clip_hi]` percentile range, then rescales to [0, 1].
///
/// A volume that is constant after clipping maps to all zeros.
pub fn minmax_normalize(v: &Volume, clip_lo: f64, clip_hi: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&clip_lo) || !(0.0..=100.0).contains(&clip_hi) || clip_lo >= clip_hi {
        return Err(Error::Validation(format!(
            "clip percentiles must satisfy 0 <= lo < hi <= 100, got ({clip_lo}, {clip_hi})"
        )));
    }
    v.validate_finite()?;
    let mut sorted: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&sorted, clip_lo);
    let hi = percentile_sorted(&sorted, clip_hi);
    if hi <= lo {
        log::warn!("volume `{}` is constant after clipping; normalized to zeros", v.id);
        return Ok(v.with_data(vec![0.0; v.data.len()]));
    }
    let scale = 1.0 / (hi - lo);
    let data = v
        .data
        .iter()
        .map(|&x| ((x as f64).clamp(lo, hi) - lo) * scale)
        .map(|x| x as f32)
        .collect();
    Ok(v.with_data(data))
}

/// Placement of a fixed-size patch relative to its source grid. `offset` may be
/// negative or run past the source extent, in which case the patch is padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub source: Geometry,
    pub offset: [isize; 3],
    pub shape: Shape3,
}

impl CropWindow {
    pub fn patch_geometry(&self) -> Geometry {
        self.source.sub_grid(self.offset, self.shape)
    }

    fn source_index(&self, i: usize, j: usize, k: usize) -> Option<usize> {
        let src = self.source.shape;
        let mut idx = [0usize; 3];
        for (a, p) in [i, j, k].into_iter().enumerate() {
            let s = self.offset[a] + p as isize;
            if s < 0 || s >= src[a] as isize {
                return None;
            }
            idx[a] = s as usize;
        }
        Some(flat_index(src, idx[0], idx[1], idx[2]))
    }

    /// Copies source values into the patch, filling outside voxels with `fill`.
    pub fn extract<T: Copy>(&self, source: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; voxel_count(self.shape)];
        let mut n = 0;
        for i in 0..self.shape[0] {
            for j in 0..self.shape[1] {
                for k in 0..self.shape[2] {
                    if let Some(s) = self.source_index(i, j, k) {
                        out[n] = source[s];
                    }
                    n += 1;
                }
            }
        }
        out
    }

    /// Inverse of [`CropWindow::extract`]: places patch values back on the
    /// source grid, with `fill` wherever the patch does not reach.
    pub fn restore<T: Copy>(&self, patch: &[T], fill: T) -> Vec<T> {
        let mut out = vec![fill; self.source.voxels()];
        let mut n = 0;
        for i in 0..self.shape[0] {
            for j in 0..self.shape[1] {
                for k in 0..self.shape[2] {
                    if let Some(s) = self.source_index(i, j, k) {
                        out[s] = patch[n];
                    }
                    n += 1;
                }
            }
        }
        out
    }
}

/// Chooses the crop window: the foreground bounding box centered inside a
/// `target_shape` window.
pub fn crop_window(v: &Volume, spec: &PatchSpec) -> Result<CropWindow> {
    spec.validate()?;
    let shape = v.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut any = false;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                if v.data[flat_index(shape, i, j, k)] > spec.background_threshold {
                    any = true;
                    for (a, p) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p);
                    }
                }
            }
        }
    }
    if !any {
        lo = [0; 3];
        hi = [shape[0] - 1, shape[1] - 1, shape[2] - 1];
    }
    let mut offset = [0isize; 3];
    for a in 0..3 {
        let extent = (hi[a] - lo[a] + 1) as isize;
        let target = spec.target_shape[a] as isize;
        if extent > target {
            log::warn!(
                "volume `{}`: foreground extent {extent} exceeds patch extent {target} on axis {a}; center-cropping",
                v.id
            );
        }
        // Floor division keeps the rule identical for crop and pad.
        offset[a] = lo[a] as isize + (extent - target).div_euclid(2);
    }
    Ok(CropWindow { source: v.geometry.clone(), offset, shape: spec.target_shape })
}

/// Crops (or zero-pads) the volume and its optional mask to the patch shape.
pub fn crop_or_pad(
    v: &Volume,
    mask: Option<&LabelMask>,
    spec: &PatchSpec,
) -> Result<(Volume, Option<LabelMask>, CropWindow)> {
    if let Some(m) = mask {
        if m.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match volume {:?}",
                m.shape(),
                v.shape()
            )));
        }
    }
    let window = crop_window(v, spec)?;
    let geometry = window.patch_geometry();
    let image = Volume { id: v.id.clone(), geometry: geometry.clone(), data: window.extract(&v.data, 0.0) };
    let labels = mask.map(|m| LabelMask {
        id: m.id.clone(),
        geometry,
        labels: window.extract(&m.labels, 0),
    });
    Ok((image, labels, window))
}

pub fn one_hot(m: &LabelMask, classes: usize) -> Result<OneHotMask> {
    let n = m.labels.len();
    let mut data = vec![0.0f32; classes * n];
    for (index, &label) in m.labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(Error::LabelOutOfRange { label, index, classes });
        }
        data[label as usize * n + index] = 1.0;
    }
    Ok(OneHotMask { classes, shape: m.shape(), data })
}

/// Per-voxel most probable class; ties go to the lowest class index.
pub fn argmax_labels(p: &ProbabilityMap) -> Result<Vec<u8>> {
    let n = voxel_count(p.shape);
    let mut labels = vec![0u8; n];
    for (v, label) in labels.iter_mut().enumerate() {
        let mut best = p.data[v];
        let mut sum = best;
        for c in 1..p.classes {
            let q = p.data[c * n + v];
            sum += q;
            if q > best {
                best = q;
                *label = c as u8;
            }
        }
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Validation(format!(
                "probabilities at voxel {v} sum to {sum}, not 1"
            )));
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Shape3, values: impl Fn(usize) -> f32) -> Volume {
        let g = Geometry::new(shape, [1.0; 3]).unwrap();
        Volume::new("ramp", g, (0..voxel_count(shape)).map(values).collect()).unwrap()
    }

    #[test]
    fn full_range_normalization_is_linear() {
        let v = ramp([101, 1, 1], |i| i as f32);
        let out = minmax_normalize(&v, 0.0, 100.0).unwrap();
        for (i, x) in out.data.iter().enumerate() {
            assert!((x - i as f32 / 100.0).abs() < 1e-6);
        }
        assert_eq!(out.data[0], 0.0);
        assert_eq!(out.data[100], 1.0);
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = ramp([4, 4, 4], |_| 7.5);
        let out = minmax_normalize(&v, 0.5, 99.5).unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clipped_normalization_matches_sorted_list_oracle() {
        // Shuffled 0..=100 so the implementation cannot rely on input order.
        let mut values: Vec<f32> = (0..=100).map(|i| i as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in (1..values.len()).rev() {
            values.swap(i, rng.random_range(0..=i));
        }
        let v = ramp([101, 1, 1], |i| values[i]);
        let out = minmax_normalize(&v, 0.5, 99.5).unwrap();

        // 101 sorted values: rank position q/100 * 100 = q, so P0.5 = 0.5, P99.5 = 99.5.
        let (lo, hi) = (0.5f64, 99.5f64);
        for (x, y) in values.iter().zip(&out.data) {
            let expected = ((*x as f64).clamp(lo, hi) - lo) / (hi - lo);
            assert!((*y as f64 - expected).abs() < 1e-6, "{x} -> {y} vs {expected}");
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let v = ramp([5, 6, 7], |i| ((i * 37) % 101) as f32 * 0.3 - 4.0);
        let once = minmax_normalize(&v, 0.0, 100.0).unwrap();
        let twice = minmax_normalize(&once, 0.0, 100.0).unwrap();
        assert_eq!(once.data, twice.data);
    }

    #[test]
    fn rejects_bad_percentiles_and_nonfinite() {
        let v = ramp([2, 2, 2], |i| i as f32);
        assert!(minmax_normalize(&v, 50.0, 50.0).is_err());
        assert!(minmax_normalize(&v, -1.0, 50.0).is_err());
        let mut bad = v.clone();
        bad.data[3] = f32::NAN;
        assert_eq!(minmax_normalize(&bad, 0.0, 100.0), Err(Error::NonFinite { count: 1 }));
    }

    #[test]
    fn centered_foreground_fits_in_patch() {
        let n = 160;
        let v = ramp([n, n, n], |f| {
            let (i, j, k) = (f / (n * n), (f / n) % n, f % n);
            let inside = |p: usize| (30..130).contains(&p);
            if inside(i) && inside(j) && inside(k) { 1.0 } else { 0.0 }
        });
        let (patch, _, window) = crop_or_pad(&v, None, &PatchSpec::default()).unwrap();
        assert_eq!(patch.shape(), [128; 3]);
        let fg: f32 = patch.data.iter().sum();
        assert_eq!(fg, 100.0 * 100.0 * 100.0);
        assert_eq!(window.offset, [16; 3]);
    }

    #[test]
    fn all_background_gives_centered_crop() {
        let v = ramp([160, 140, 130], |_| 0.0);
        let window = crop_window(&v, &PatchSpec::default()).unwrap();
        assert_eq!(window.offset, [16, 6, 1]);
    }

    #[test]
    fn small_volume_is_zero_padded_and_centered() {
        let v = ramp([96, 96, 96], |_| 0.5);
        let (patch, _, window) = crop_or_pad(&v, None, &PatchSpec::default()).unwrap();
        assert_eq!(window.offset, [-16; 3]);
        let zeros = patch.data.iter().filter(|&&x| x == 0.0).count();
        assert_eq!(zeros, 128usize.pow(3) - 96usize.pow(3));
        assert_eq!(patch.get(16, 16, 16), 0.5);
        assert_eq!(patch.get(15, 16, 16), 0.0);
    }

    #[test]
    fn oversized_foreground_is_center_cropped() {
        let spec = PatchSpec { target_shape: [16; 3], background_threshold: 0.0 };
        let v = ramp([40, 16, 8], |_| 1.0);
        let (patch, _, window) = crop_or_pad(&v, None, &spec).unwrap();
        assert_eq!(patch.shape(), [16; 3]);
        assert_eq!(window.offset, [12, 0, -4]);
    }

    #[test]
    fn mask_follows_the_image_window_and_restores() {
        let spec = PatchSpec { target_shape: [16; 3], background_threshold: 0.5 };
        let shape = [24, 20, 12];
        let v = ramp(shape, |f| if f % 7 == 0 { 1.0 } else { 0.0 });
        let labels: Vec<u8> = (0..voxel_count(shape)).map(|f| (f % 3) as u8).collect();
        let m = LabelMask::new("m", v.geometry.clone(), labels.clone()).unwrap();
        let (_, pm, window) = crop_or_pad(&v, Some(&m), &spec).unwrap();
        let restored = window.restore(&pm.unwrap().labels, 0);
        let kept = window.extract(&labels, 0);
        assert_eq!(window.extract(&restored, 0), kept);
    }

    #[test]
    fn patch_geometry_shifts_the_origin() {
        let g = Geometry::new([8, 8, 8], [2.0, 1.0, 0.5]).unwrap();
        let sub = g.sub_grid([-2, 1, 4], [16, 16, 16]);
        assert_eq!(sub.affine[0][3], -4.0);
        assert_eq!(sub.affine[1][3], 1.0);
        assert_eq!(sub.affine[2][3], 2.0);
    }

    #[test]
    fn one_hot_of_background() {
        let g = Geometry::new([3, 3, 3], [1.0; 3]).unwrap();
        let m = LabelMask::background("bg", g);
        let oh = one_hot(&m, 3).unwrap();
        assert!(oh.channel(0).iter().all(|&x| x == 1.0));
        assert!(oh.channel(1).iter().chain(oh.channel(2)).all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_rejects_large_labels() {
        let g = Geometry::new([1, 1, 2], [1.0; 3]).unwrap();
        let m = LabelMask::new(String::from("m"), g, alloc::vec![0, 2]).unwrap();
        assert_eq!(
            one_hot(&m, 2),
            Err(Error::LabelOutOfRange { label: 2, index: 1, classes: 2 })
        );
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let p = ProbabilityMap::new(3, [1, 1, 1], alloc::vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(argmax_labels(&p).unwrap(), alloc::vec![0]);
        let bad = ProbabilityMap::new(3, [1, 1, 1], alloc::vec![0.4, 0.4, 0.4]).unwrap();
        assert!(argmax_labels(&bad).is_err());
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let labels: Vec<u8> = (0..512).map(|_| rng.random_range(0..3)).collect();
            let g = Geometry::new([8, 8, 8], [1.0; 3]).unwrap();
            let m = LabelMask::new("r", g, labels.clone()).unwrap();
            let oh = one_hot(&m, 3).unwrap();
            let p = ProbabilityMap::new(3, oh.shape, oh.data.clone()).unwrap();
            assert_eq!(argmax_labels(&p).unwrap(), labels);
        }
    }
}
