//! Overlap and surface-distance metrics for bilateral structures.
//!
//! Conventions: boundary voxels are mask voxels with at least one
//! face-adjacent (6-connected) voxel outside the mask, the grid edge counting
//! as outside; distances are Euclidean in mm; HD95 is the larger of the two
//! directed 95th percentiles (linear interpolation); RVE is taken relative to
//! the ground-truth volume.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::percentile_sorted;
use crate::volume::{voxel_count, LabelMask, Shape3};
use crate::{LEFT_LABEL, RIGHT_LABEL};

/// Which of the two compared masks an error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Prediction,
    GroundTruth,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Prediction => "prediction",
            Side::GroundTruth => "ground-truth",
        })
    }
}

fn check_same(pred: &[bool], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", pred.len(), gt.len())));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, defined as 1 when both masks are empty.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Indices of 6-connected boundary voxels.
pub fn boundary(mask: &[bool], shape: Shape3) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = (i * shape[1] + j) * shape[2] + k;
                if !mask[idx] {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == shape[0] || j + 1 == shape[1] || k + 1 == shape[2];
                let s0 = shape[1] * shape[2];
                let s1 = shape[2];
                if edge
                    || !mask[idx - s0]
                    || !mask[idx + s0]
                    || !mask[idx - s1]
                    || !mask[idx + s1]
                    || !mask[idx - 1]
                    || !mask[idx + 1]
                {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// One axis of the exact squared Euclidean distance transform (lower envelope
/// of parabolas) on physical coordinates `q * spacing`.
fn edt_line(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * spacing;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[last] + pos(last) * pos(last))) / (2.0 * (pos(q) - pos(last)));
            if s <= *z.last().expect("boundary per parabola") {
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            z.push(s);
            break;
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * spacing;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance (mm²) from every voxel to the nearest seed voxel.
pub fn squared_distance_transform(seeds: &[usize], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let n = voxel_count(shape);
    let mut field = vec![f64::INFINITY; n];
    for &s in seeds {
        field[s] = 0.0;
    }
    let strides = [shape[1] * shape[2], shape[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = shape[axis];
        let stride = strides[axis];
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for base in 0..n {
            if (base / stride) % len != 0 {
                continue;
            }
            for t in 0..len {
                line[t] = field[base + t * stride];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
            for t in 0..len {
                field[base + t * stride] = out[t];
            }
        }
    }
    field
}

/// Directed boundary distances `(pred → gt, gt → pred)` in mm.
pub fn surface_distances(pred: &[bool], gt: &[bool], shape: Shape3, spacing: [f64; 3]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_same(pred, gt)?;
    if pred.len() != voxel_count(shape) {
        return Err(Error::Shape(format!("{} voxels for grid {shape:?}", pred.len())));
    }
    if !pred.iter().any(|&b| b) {
        return Err(Error::EmptyStructure(Side::Prediction));
    }
    if !gt.iter().any(|&b| b) {
        return Err(Error::EmptyStructure(Side::GroundTruth));
    }
    let bp = boundary(pred, shape);
    let bg = boundary(gt, shape);
    let to_gt = squared_distance_transform(&bg, shape, spacing);
    let to_pred = squared_distance_transform(&bp, shape, spacing);
    let d_pg = bp.iter().map(|&i| libm::sqrt(to_gt[i])).collect();
    let d_gp = bg.iter().map(|&i| libm::sqrt(to_pred[i])).collect();
    Ok((d_pg, d_gp))
}

fn max_of(d: &[f64]) -> f64 {
    d.iter().copied().fold(0.0, f64::max)
}

fn p95(d: &[f64]) -> f64 {
    let mut sorted = d.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, 95.0)
}

pub fn hd(d_pg: &[f64], d_gp: &[f64]) -> f64 {
    max_of(d_pg).max(max_of(d_gp))
}

pub fn hd95(d_pg: &[f64], d_gp: &[f64]) -> f64 {
    p95(d_pg).max(p95(d_gp))
}

pub fn assd(d_pg: &[f64], d_gp: &[f64]) -> f64 {
    let total: f64 = d_pg.iter().sum::<f64>() + d_gp.iter().sum::<f64>();
    total / (d_pg.len() + d_gp.len()) as f64
}

/// `| |P| - |G| | / |G|` on physical volumes. Not symmetric in its arguments.
pub fn rve(pred: &[bool], gt: &[bool], spacing: [f64; 3]) -> Result<f64> {
    check_same(pred, gt)?;
    let voxel = spacing[0] * spacing[1] * spacing[2];
    let p = pred.iter().filter(|&&b| b).count() as f64 * voxel;
    let g = gt.iter().filter(|&&b| b).count() as f64 * voxel;
    if g == 0.0 {
        return Err(Error::EmptyStructure(Side::GroundTruth));
    }
    Ok((p - g).abs() / g)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dsc: f64,
    pub hd: f64,
    pub hd95: f64,
    pub assd: f64,
    pub rve: f64,
}

impl StructureMetrics {
    pub const NAMES: [&'static str; 5] = ["dsc", "hd", "hd95", "assd", "rve"];

    pub fn values(&self) -> [f64; 5] {
        [self.dsc, self.hd, self.hd95, self.assd, self.rve]
    }

    pub fn mean(a: &Self, b: &Self) -> Self {
        Self {
            dsc: 0.5 * (a.dsc + b.dsc),
            hd: 0.5 * (a.hd + b.hd),
            hd95: 0.5 * (a.hd95 + b.hd95),
            assd: 0.5 * (a.assd + b.assd),
            rve: 0.5 * (a.rve + b.rve),
        }
    }
}

/// Why a structure's distance metrics hold the sentinel instead of a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StructureFlag {
    /// Present in the ground truth, absent from the prediction.
    MissingInPrediction,
    /// Absent from the ground truth, present in the prediction.
    MissingInGroundTruth,
    /// Absent from both.
    AbsentInBoth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: alloc::string::String,
    pub left: StructureMetrics,
    pub right: StructureMetrics,
    pub average: StructureMetrics,
    pub left_flag: Option<StructureFlag>,
    pub right_flag: Option<StructureFlag>,
}

/// Diagonal of the grid in mm; distance sentinel for missing structures.
pub fn grid_diagonal(shape: Shape3, spacing: [f64; 3]) -> f64 {
    libm::sqrt((0..3).map(|a| shape[a] as f64 * spacing[a]).map(|x| x * x).sum())
}

/// All five metrics for one binary structure.
pub fn structure_metrics(
    pred: &[bool],
    gt: &[bool],
    shape: Shape3,
    spacing: [f64; 3],
) -> Result<(StructureMetrics, Option<StructureFlag>)> {
    let has_p = pred.iter().any(|&b| b);
    let has_g = gt.iter().any(|&b| b);
    let sentinel = grid_diagonal(shape, spacing);
    let missing = |flag| {
        let m = StructureMetrics { dsc: 0.0, hd: sentinel, hd95: sentinel, assd: sentinel, rve: 1.0 };
        Ok((m, Some(flag)))
    };
    match (has_p, has_g) {
        (true, true) => {
            let (d_pg, d_gp) = surface_distances(pred, gt, shape, spacing)?;
            let m = StructureMetrics {
                dsc: dsc(pred, gt)?,
                hd: hd(&d_pg, &d_gp),
                hd95: hd95(&d_pg, &d_gp),
                assd: assd(&d_pg, &d_gp),
                rve: rve(pred, gt, spacing)?,
            };
            Ok((m, None))
        }
        (false, true) => missing(StructureFlag::MissingInPrediction),
        (true, false) => missing(StructureFlag::MissingInGroundTruth),
        (false, false) => Ok((
            StructureMetrics { dsc: 1.0, ..StructureMetrics::default() },
            Some(StructureFlag::AbsentInBoth),
        )),
    }
}

/// Per-structure metrics for the left (label 1) and right (label 2)
/// structures and their mean.
pub fn evaluate_case(pred: &LabelMask, gt: &LabelMask) -> Result<CaseReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let shape = gt.shape();
    let spacing = gt.geometry.spacing;
    let (left, left_flag) = structure_metrics(&pred.binary(LEFT_LABEL), &gt.binary(LEFT_LABEL), shape, spacing)?;
    let (right, right_flag) = structure_metrics(&pred.binary(RIGHT_LABEL), &gt.binary(RIGHT_LABEL), shape, spacing)?;
    Ok(CaseReport {
        id: gt.id.clone(),
        left,
        right,
        average: StructureMetrics::mean(&left, &right),
        left_flag,
        right_flag,
    })
}

/// Mean and population standard deviation of one metric across cases.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: libm::sqrt(var) }
}

/// Mean ± std of each case-average metric, in [`StructureMetrics::NAMES`] order.
pub fn summarize(reports: &[CaseReport]) -> [MeanStd; 5] {
    let mut out = [MeanStd::default(); 5];
    for (m, slot) in out.iter_mut().enumerate() {
        let values: Vec<f64> = reports.iter().map(|r| r.average.values()[m]).collect();
        *slot = mean_std(&values);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(shape: Shape3, lo: [usize; 3], size: usize) -> Vec<bool> {
        let mut m = vec![false; voxel_count(shape)];
        for i in lo[0]..lo[0] + size {
            for j in lo[1]..lo[1] + size {
                for k in lo[2]..lo[2] + size {
                    m[(i * shape[1] + j) * shape[2] + k] = true;
                }
            }
        }
        m
    }

    #[test]
    fn dsc_cases() {
        let a = cube([6; 3], [1, 1, 1], 3);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = cube([6; 3], [2, 1, 1], 3);
        assert!((dsc(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let far = cube([8; 3], [5, 5, 5], 2);
        let near = cube([8; 3], [0, 0, 0], 2);
        assert_eq!(dsc(&far, &near).unwrap(), 0.0);
        assert_eq!(dsc(&[false; 4], &[false; 4]).unwrap(), 1.0);
    }

    #[test]
    fn two_points_three_apart() {
        let shape = [8, 1, 1];
        let mut p = vec![false; 8];
        let mut g = vec![false; 8];
        p[1] = true;
        g[4] = true;
        let (d_pg, d_gp) = surface_distances(&p, &g, shape, [1.0; 3]).unwrap();
        assert_eq!(d_pg, vec![3.0]);
        assert_eq!(d_gp, vec![3.0]);
        assert_eq!(hd(&d_pg, &d_gp), 3.0);
        assert_eq!(hd95(&d_pg, &d_gp), 3.0);
        assert_eq!(assd(&d_pg, &d_gp), 3.0);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let m = cube([5; 3], [0, 0, 0], 5);
        let b = boundary(&m, [5; 3]);
        assert_eq!(b.len(), 125 - 27);
    }

    #[test]
    fn empty_structures_are_reported_by_side() {
        let a = cube([4; 3], [0, 0, 0], 2);
        let e = vec![false; 64];
        assert_eq!(surface_distances(&e, &a, [4; 3], [1.0; 3]), Err(Error::EmptyStructure(Side::Prediction)));
        assert_eq!(surface_distances(&a, &e, [4; 3], [1.0; 3]), Err(Error::EmptyStructure(Side::GroundTruth)));
        assert_eq!(rve(&a, &e, [1.0; 3]), Err(Error::EmptyStructure(Side::GroundTruth)));
    }

    #[test]
    fn rve_cases() {
        let g = cube([6; 3], [0, 0, 0], 2);
        let mut p = g.clone();
        for x in p.iter_mut().skip(100).take(8) {
            *x = true;
        }
        assert_eq!(rve(&g, &g, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(rve(&p, &g, [0.5; 3]).unwrap(), 1.0);
        let mut p27 = vec![false; 64];
        p27[..27].fill(true);
        let mut g30 = vec![false; 64];
        g30[..30].fill(true);
        assert!((rve(&p27, &g30, [1.0; 3]).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn anisotropic_transform_matches_brute_force() {
        let shape = [5, 4, 6];
        let spacing = [0.5, 2.0, 1.25];
        let seeds = [3usize, 40, 77, 101];
        let field = squared_distance_transform(&seeds, shape, spacing);
        for i in 0..shape[0] {
            for j in 0..shape[1] {
                for k in 0..shape[2] {
                    let best = seeds
                        .iter()
                        .map(|&s| {
                            let (si, sj, sk) = (s / 24, (s / 6) % 4, s % 6);
                            let d = [
                                (i as f64 - si as f64) * spacing[0],
                                (j as f64 - sj as f64) * spacing[1],
                                (k as f64 - sk as f64) * spacing[2],
                            ];
                            d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!((field[(i * 4 + j) * 6 + k] - best).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn missing_prediction_uses_sentinel() {
        let shape = [8; 3];
        let geometry = crate::Geometry::new(shape, [1.0; 3]).unwrap();
        let mut labels = vec![0u8; 512];
        labels[..10].fill(1);
        labels[300..310].fill(2);
        let gt = LabelMask::new("case", geometry.clone(), labels.clone()).unwrap();
        let mut pred_labels = labels;
        pred_labels[..10].fill(0);
        let pred = LabelMask::new("case", geometry, pred_labels).unwrap();
        let r = evaluate_case(&pred, &gt).unwrap();
        assert_eq!(r.left_flag, Some(StructureFlag::MissingInPrediction));
        assert_eq!(r.left.dsc, 0.0);
        assert_eq!(r.left.rve, 1.0);
        assert_eq!(r.left.hd, grid_diagonal(shape, [1.0; 3]));
        assert_eq!(r.right.dsc, 1.0);
        assert_eq!(r.average.dsc, 0.5);
        let perfect = evaluate_case(&gt, &gt).unwrap();
        assert_eq!(perfect.average, StructureMetrics { dsc: 1.0, ..Default::default() });
    }

    #[test]
    fn summary_statistics() {
        let m = mean_std(&[1.0, 3.0]);
        assert_eq!(m, MeanStd { mean: 2.0, std: 1.0 });
    }
}
