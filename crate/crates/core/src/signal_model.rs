//! Inversion-recovery signal model `S(t) = M0 · (1 − 2·exp(−t/T1))` and
//! per-voxel least-squares fitting.
//!
//! Fitting uses damped Gauss-Newton (Levenberg-Marquardt with diagonal
//! scaling) started from a logarithmic grid of T1 values. For each grid start
//! the amplitude is initialised with its closed-form linear least-squares
//! value, so every start begins on the best point of its T1 slice.

use crate::datamodel::{FitConfig, Image, ImageSeries, ParametricMaps};
use crate::error::{Error, Result};
use crate::par;

/// Outcome of fitting one voxel time course.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub t1: f64,
    pub m0: f64,
    /// Sum of squared residuals at (`t1`, `m0`).
    pub sse: f64,
    pub r2: f64,
    /// False for degenerate voxels and for fits that ended on a T1 bound.
    pub converged: bool,
}

/// Evaluate the signal model.
pub fn ir_signal(m0: f64, t1: f64, t: f64) -> Result<f64> {
    if !(t1 > 0.0) {
        return Err(Error::NonPositiveT1(t1));
    }
    Ok(signal(m0, t1, t))
}

/// Partial derivatives `(∂S/∂M0, ∂S/∂T1)`.
pub fn ir_signal_jacobian(m0: f64, t1: f64, t: f64) -> Result<(f64, f64)> {
    if !(t1 > 0.0) {
        return Err(Error::NonPositiveT1(t1));
    }
    Ok(jacobian(m0, t1, t))
}

#[inline]
pub(crate) fn signal(m0: f64, t1: f64, t: f64) -> f64 {
    m0 * (1.0 - 2.0 * (-t / t1).exp())
}

#[inline]
pub(crate) fn jacobian(m0: f64, t1: f64, t: f64) -> (f64, f64) {
    let e = (-t / t1).exp();
    (1.0 - 2.0 * e, -2.0 * m0 * (t / (t1 * t1)) * e)
}

/// Coefficient of determination `1 − SS_res/SS_tot`.
pub fn r_squared(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(Error::CountMismatch {
            what: "predicted values",
            expected: observed.len(),
            found: predicted.len(),
        });
    }
    if observed.len() < 2 {
        return Err(Error::CountMismatch {
            what: "observed values",
            expected: 2,
            found: observed.len(),
        });
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ConstantObserved);
    }
    let ss_res: f64 = observed
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

fn sse_at(values: &[f64], times: &[f64], m0: f64, t1: f64) -> f64 {
    values
        .iter()
        .zip(times)
        .map(|(&y, &t)| {
            let r = signal(m0, t1, t) - y;
            r * r
        })
        .sum()
}

/// Best amplitude for a fixed T1 (linear least squares).
fn best_m0(values: &[f64], times: &[f64], t1: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&y, &t) in values.iter().zip(times) {
        let f = 1.0 - 2.0 * (-t / t1).exp();
        num += f * y;
        den += f * f;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// T1 grid used to seed the fitter.
pub fn t1_grid(config: &FitConfig) -> Vec<f64> {
    let n = config.t1_starts.max(1);
    if n == 1 {
        return vec![(config.t1_min * config.t1_max).sqrt()];
    }
    let ratio = config.t1_max / config.t1_min;
    (0..n)
        .map(|k| config.t1_min * ratio.powf(k as f64 / (n - 1) as f64))
        .collect()
}

struct Local {
    m0: f64,
    t1: f64,
    sse: f64,
    converged: bool,
}

const MAX_ITERS: usize = 200;

fn refine(values: &[f64], times: &[f64], m0: f64, t1: f64, config: &FitConfig) -> Local {
    let (lo, hi) = (config.t1_min, config.t1_max);
    let mut t1 = t1.clamp(lo, hi);
    let mut m0 = m0;
    let mut sse = sse_at(values, times, m0, t1);
    let mut mu = 1e-3;
    let mut converged = false;
    for _ in 0..MAX_ITERS {
        if sse == 0.0 {
            converged = true;
            break;
        }
        let (mut a00, mut a01, mut a11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&y, &t) in values.iter().zip(times) {
            let (j0, j1) = jacobian(m0, t1, t);
            let r = signal(m0, t1, t) - y;
            a00 += j0 * j0;
            a01 += j0 * j1;
            a11 += j1 * j1;
            g0 += j0 * r;
            g1 += j1 * r;
        }
        let mut improved = false;
        while mu < 1e12 {
            let b00 = a00 + mu * a00.max(1e-300);
            let b11 = a11 + mu * a11.max(1e-300);
            let det = b00 * b11 - a01 * a01;
            if !(det.is_finite() && det > 0.0) {
                mu *= 10.0;
                continue;
            }
            let d0 = -(b11 * g0 - a01 * g1) / det;
            let d1 = -(b00 * g1 - a01 * g0) / det;
            let nm0 = m0 + d0;
            let nt1 = (t1 + d1).clamp(lo, hi);
            let nsse = sse_at(values, times, nm0, nt1);
            if nsse < sse {
                let rel = (sse - nsse) / sse;
                let step_small = d0.abs() <= 1e-12 * (1.0 + m0.abs())
                    && (nt1 - t1).abs() <= 1e-10 * t1;
                m0 = nm0;
                t1 = nt1;
                sse = nsse;
                mu = (mu / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-14 || step_small {
                    converged = true;
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            // No descent direction left at any damping: a stationary point.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    Local {
        m0,
        t1,
        sse,
        converged,
    }
}

fn finish(values: &[f64], times: &[f64], best: Local, config: &FitConfig) -> VoxelFit {
    let predicted: Vec<f64> = times.iter().map(|&t| signal(best.m0, best.t1, t)).collect();
    let r2 = r_squared(values, &predicted).unwrap_or(0.0);
    let at_bound = best.t1 <= config.t1_min || best.t1 >= config.t1_max;
    VoxelFit {
        t1: best.t1,
        m0: best.m0,
        sse: best.sse,
        r2,
        converged: best.converged && !at_bound,
    }
}

fn fit_signed(values: &[f64], times: &[f64], config: &FitConfig, warm: Option<(f64, f64)>, grid: bool) -> Local {
    let mut best: Option<Local> = None;
    let starts = if grid || warm.is_none() { t1_grid(config) } else { Vec::new() };
    let seeds = warm
        .into_iter()
        .chain(starts.iter().map(|&t1| (best_m0(values, times, t1), t1)));
    for (m0, t1) in seeds {
        let local = refine(values, times, m0, t1, config);
        if best.as_ref().is_none_or(|b| local.sse < b.sse) {
            best = Some(local);
        }
    }
    best.expect("at least one start")
}

/// Fit `(T1, M0)` to one voxel time course.
///
/// Constant time courses are degenerate: M0 is set to their mean, T1 to the
/// lower bound (where the model is flattest) and `converged` is false.
pub fn fit_voxel(values: &[f64], timestamps: &[f64], config: &FitConfig) -> Result<VoxelFit> {
    fit_voxel_from(values, timestamps, config, None)
}

/// Like [`fit_voxel`], with an extra warm start `(m0, t1)` tried first.
pub fn fit_voxel_from(
    values: &[f64],
    timestamps: &[f64],
    config: &FitConfig,
    warm: Option<(f64, f64)>,
) -> Result<VoxelFit> {
    fit_voxel_seeded(values, timestamps, config, warm, true)
}

/// `grid == false` with a warm start refines from the warm start alone.
pub(crate) fn fit_voxel_seeded(
    values: &[f64],
    timestamps: &[f64],
    config: &FitConfig,
    warm: Option<(f64, f64)>,
    grid: bool,
) -> Result<VoxelFit> {
    if values.len() != timestamps.len() {
        return Err(Error::CountMismatch {
            what: "voxel samples",
            expected: timestamps.len(),
            found: values.len(),
        });
    }
    if values.len() < 3 {
        return Err(Error::TooFewFrames {
            found: values.len(),
        });
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        let m0 = values.iter().sum::<f64>() / values.len() as f64;
        let t1 = config.t1_min;
        return Ok(VoxelFit {
            t1,
            m0,
            sse: sse_at(values, timestamps, m0, t1),
            r2: 0.0,
            converged: false,
        });
    }
    if !config.magnitude {
        let best = fit_signed(values, timestamps, config, warm, grid);
        return Ok(finish(values, timestamps, best, config));
    }
    // Magnitude data: samples before the zero crossing lost their sign. Try
    // every crossing position and keep the lowest residual.
    let mut best: Option<(Local, Vec<f64>)> = None;
    for k in 0..=values.len() {
        let signed: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < k { -v.abs() } else { v.abs() })
            .collect();
        let local = fit_signed(&signed, timestamps, config, warm, grid);
        if best.as_ref().is_none_or(|(b, _)| local.sse < b.sse) {
            best = Some((local, signed));
        }
    }
    let (local, signed) = best.expect("at least one polarity");
    Ok(finish(&signed, timestamps, local, config))
}

/// Voxel-wise fit over a whole series.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFit {
    pub maps: ParametricMaps,
    pub r2: Image,
    /// Residual sum of squares per voxel (in the zero-referenced domain).
    pub sse: Image,
    pub converged: Vec<bool>,
    /// Which voxels were fitted.
    pub fitted: Vec<bool>,
}

/// Fit every voxel inside `roi` (all voxels when `None`).
///
/// Voxels outside the roi get the sentinel `t1 = 0`, `m0 = 0`, `r2 = 0`.
/// Degenerate voxels never abort the map; they are flagged instead.
pub fn fit_map(series: &ImageSeries, config: &FitConfig, roi: Option<&Image>) -> Result<MapFit> {
    fit_map_impl(series, config, roi, None, true)
}

pub(crate) fn fit_map_impl(
    series: &ImageSeries,
    config: &FitConfig,
    roi: Option<&Image>,
    warm: Option<&ParametricMaps>,
    grid: bool,
) -> Result<MapFit> {
    crate::datamodel::validate_series(series)?;
    config.validate()?;
    let (h, w) = series.shape();
    if let Some(r) = roi {
        if r.shape() != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: (h, w),
                found: r.shape(),
            });
        }
    }
    let zero = series.zero_level;
    let times = &series.timestamps;
    let fits = par::map_range(h * w, config.parallel, |idx| {
        if roi.is_some_and(|r| r.data[idx] == 0.0) {
            return None;
        }
        let values: Vec<f64> = series.frames.iter().map(|f| f.data[idx] - zero).collect();
        let start = warm.and_then(|m| {
            let (t1, m0) = (m.t1.data[idx], m.m0.data[idx]);
            (t1 > 0.0).then_some((m0, t1))
        });
        Some(fit_voxel_seeded(&values, times, config, start, grid).expect("validated series"))
    });
    let mut out = MapFit {
        maps: ParametricMaps {
            t1: Image::zeros(h, w),
            m0: Image::zeros(h, w),
        },
        r2: Image::zeros(h, w),
        sse: Image::zeros(h, w),
        converged: vec![false; h * w],
        fitted: vec![false; h * w],
    };
    for (idx, fit) in fits.into_iter().enumerate() {
        if let Some(f) = fit {
            out.maps.t1.data[idx] = f.t1;
            out.maps.m0.data[idx] = f.m0;
            out.r2.data[idx] = f.r2;
            out.sse.data[idx] = f.sse;
            out.converged[idx] = f.converged;
            out.fitted[idx] = true;
        }
    }
    Ok(out)
}

/// Model-predicted frames `zero_level + S(t_i)` for every voxel.
pub fn synthesize(maps: &ParametricMaps, timestamps: &[f64], zero_level: f64) -> Vec<Image> {
    let (h, w) = maps.shape();
    timestamps
        .iter()
        .map(|&t| {
            let data = maps
                .t1
                .data
                .iter()
                .zip(&maps.m0.data)
                .map(|(&t1, &m0)| if t1 > 0.0 { zero_level + signal(m0, t1, t) } else { zero_level })
                .collect();
            Image {
                height: h,
                width: w,
                data,
            }
        })
        .collect()
}
