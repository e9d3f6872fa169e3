//! Evaluation metrics: per-voxel R² of the model fit, Dice overlap and
//! Hausdorff distance of myocardium masks, and T1 error against ground truth.

use serde::{Deserialize, Serialize};

use crate::datamodel::{Image, MaskSet};
use crate::deformation::{integrate_velocity, warp};
use crate::error::{Error, Result};
use crate::optimizer::JointSolution;
use crate::phantom::PhantomScene;
use crate::signal_model::r_squared;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[inline]
fn on(v: f64) -> bool {
    v > 0.5
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (on(x), on(y));
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with a 4-neighbour outside the mask (image edges count as outside).
pub fn boundary(mask: &Image) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && on(mask.get(r as usize, c as usize))
    };
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !on(mask.get(r, c)) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            if !(inside(ri - 1, ci) && inside(ri + 1, ci) && inside(ri, ci - 1) && inside(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact 1D squared distance transform of `f` under sample spacing `s`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let s2 = s * s;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let x = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                    if x <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        continue;
                    }
                    v.push(q);
                    z.push(x);
                    break;
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * s;
        *o = f[v[k]] + d * d;
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest point of
/// `points`, with anisotropic (row, col) spacing.
pub fn squared_distance_map(shape: (usize, usize), points: &[(usize, usize)], spacing: (f64, f64)) -> Image {
    let (h, w) = shape;
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in points {
        grid[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, spacing.0, &mut tmp);
        for r in 0..h {
            grid[r * w + c] = tmp[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w], spacing.1, &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    Image {
        height: h,
        width: w,
        data: grid,
    }
}

fn directed(from: &[(usize, usize)], to_map: &Image) -> Vec<f64> {
    from.iter().map(|&(r, c)| to_map.get(r, c).sqrt()).collect()
}

fn boundary_pair(a: &Image, b: &Image, spacing: (f64, f64)) -> Result<(Vec<f64>, Vec<f64>)> {
    same_shape(a, b)?;
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyMask);
    }
    let da = squared_distance_map(a.shape(), &ba, spacing);
    let db = squared_distance_map(b.shape(), &bb, spacing);
    Ok((directed(&ba, &db), directed(&bb, &da)))
}

/// Symmetric Hausdorff distance (mm) between the boundaries of two masks.
pub fn hausdorff(a: &Image, b: &Image, spacing: (f64, f64)) -> Result<f64> {
    let (ab, ba) = boundary_pair(a, b, spacing)?;
    Ok(ab.into_iter().chain(ba).fold(0.0, f64::max))
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * (v.len() - 1) as f64).round() as usize;
    v[rank.min(v.len() - 1)]
}

/// Robust variant: the larger of the two directed `q`-th percentiles.
pub fn hausdorff_percentile(a: &Image, b: &Image, spacing: (f64, f64), q: f64) -> Result<f64> {
    let (ab, ba) = boundary_pair(a, b, spacing)?;
    Ok(percentile(ab, q).max(percentile(ba, q)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    /// Also report R² pooled over all myocardial samples.
    pub pooled_r2: bool,
    /// Replace the exact Hausdorff maximum with this percentile.
    pub hausdorff_percentile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub dice: f64,
    /// `None` when the warped mask vanished.
    pub hausdorff_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub myocardium_voxels: usize,
    pub r2_mean: f64,
    pub r2_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_pooled: Option<f64>,
    pub dice_mean: f64,
    pub hausdorff_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hausdorff_percentile: Option<f64>,
    /// T1 RMSE in ms over the reference myocardium (phantom truth only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_rel_rmse: Option<f64>,
    pub frames: Vec<FrameMetrics>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-voxel R² values over `roi` between registered and synthetic frames.
pub fn myocardial_r2(solution: &JointSolution, roi: &Image) -> Vec<f64> {
    let reg = &solution.registered;
    let syn = &solution.synthetic;
    roi.data
        .iter()
        .enumerate()
        .filter(|(_, &m)| on(m))
        .filter_map(|(idx, _)| r_squared(&reg.voxel_series(idx), &syn.voxel_series(idx)).ok())
        .collect()
}

fn pooled_r2(solution: &JointSolution, roi: &Image) -> Option<f64> {
    let mut obs = Vec::new();
    let mut pred = Vec::new();
    for (idx, &m) in roi.data.iter().enumerate() {
        if on(m) {
            obs.extend(solution.registered.voxel_series(idx));
            pred.extend(solution.synthetic.voxel_series(idx));
        }
    }
    r_squared(&obs, &pred).ok()
}

/// T1 errors over `roi`: (RMSE in ms, relative RMSE).
pub fn t1_errors(estimate: &Image, truth: &Image, roi: &Image) -> (f64, f64) {
    let mut sq = 0.0;
    let mut rel = 0.0;
    let mut n = 0.0;
    for ((&e, &t), &m) in estimate.data.iter().zip(&truth.data).zip(&roi.data) {
        if on(m) {
            sq += (e - t) * (e - t);
            rel += ((e - t) / t).powi(2);
            n += 1.0;
        }
    }
    ((sq / n).sqrt(), (rel / n).sqrt())
}

/// Evaluate a solution against per-frame myocardium masks and, for
/// phantoms, the ground-truth T1 map.
pub fn evaluate(
    solution: &JointSolution,
    masks: &MaskSet,
    truth: Option<&PhantomScene>,
    options: EvalOptions,
) -> Result<EvalReport> {
    let shape = solution.maps.shape();
    let n = solution.registered.len();
    if masks.masks.len() != n {
        return Err(Error::CountMismatch {
            what: "masks",
            expected: n,
            found: masks.masks.len(),
        });
    }
    for m in &masks.masks {
        if m.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: m.shape(),
            });
        }
    }
    let r = solution.fields.reference_index;
    let fixed = &masks.masks[r];
    let r2 = myocardial_r2(solution, fixed);
    let (r2_mean, r2_std) = mean_std(&r2);
    let spacing = solution.registered.spacing;

    let mut frames = Vec::new();
    for i in (0..n).filter(|&i| i != r) {
        let v = solution.fields.for_frame(i).expect("moving frame has a field");
        let warped = warp(&masks.masks[i], &integrate_velocity(v, solution.integration_steps));
        let binary = Image {
            height: warped.height,
            width: warped.width,
            data: warped.data.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect(),
        };
        let hd = match options.hausdorff_percentile {
            Some(q) => hausdorff_percentile(fixed, &binary, spacing, q),
            None => hausdorff(fixed, &binary, spacing),
        };
        let hausdorff_mm = match hd {
            Ok(d) => Some(d),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        frames.push(FrameMetrics {
            frame: i,
            dice: dice(fixed, &binary)?,
            hausdorff_mm,
        });
    }
    let dice_mean = frames.iter().map(|f| f.dice).sum::<f64>() / frames.len().max(1) as f64;
    let hds: Vec<f64> = frames.iter().filter_map(|f| f.hausdorff_mm).collect();
    let hausdorff_mm = mean_std(&hds).0;

    let (t1_rmse, t1_rel_rmse) = match truth {
        Some(scene) => {
            let roi = scene.reference_mask();
            let (a, b) = t1_errors(&solution.maps.t1, &scene.truth_maps.t1, roi);
            (Some(a), Some(b))
        }
        None => (None, None),
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        myocardium_voxels: fixed.data.iter().filter(|&&m| on(m)).count(),
        r2_mean,
        r2_std,
        r2_pooled: if options.pooled_r2 { pooled_r2(solution, fixed) } else { None },
        dice_mean,
        hausdorff_mm,
        hausdorff_percentile: options.hausdorff_percentile,
        t1_rmse,
        t1_rel_rmse,
        frames,
    })
}
