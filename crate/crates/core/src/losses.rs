//! Objective terms: model-fit MSE between synthetic and registered frames,
//! velocity smoothness, and soft Dice between warped and fixed masks, with
//! analytic gradients through the signal model, bilinear sampling and the
//! scaling-and-squaring integrator.

use serde::{Deserialize, Serialize};

use crate::datamodel::{FitConfig, Image, ImageSeries, MaskSet, ParametricMaps, VectorField, VelocityField, VelocityFieldSet};
use crate::deformation::{integrate_backward, integrate_history, warp_backward, warp_with};
use crate::error::{Error, Result};
use crate::par;
use crate::signal_model::{jacobian, synthesize};

/// Guard against empty masks in the Dice denominator.
pub const DICE_EPS: f64 = 1e-7;

/// Weighted decomposition of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fit: f64,
    pub smooth: f64,
    pub seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn combine(fit: f64, smooth: f64, seg: f64, config: &FitConfig) -> Self {
        Self {
            fit,
            smooth,
            seg,
            total: config.lambda_fit * fit + config.lambda_smooth * smooth + config.lambda_seg * seg,
        }
    }
}

/// Gradient of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    /// One entry per velocity field, same order as [`VelocityFieldSet::fields`].
    pub velocity: Vec<VectorField>,
    pub t1: Image,
    pub m0: Image,
}

fn check_frames(a: &[Image], b: &[Image]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::CountMismatch {
            what: "frames",
            expected: a.len(),
            found: b.len(),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                expected: x.shape(),
                found: y.shape(),
            });
        }
    }
    Ok(())
}

fn frame_mse(s: &Image, r: &Image) -> f64 {
    let sum: f64 = s.data.iter().zip(&r.data).map(|(a, b)| (a - b) * (a - b)).sum();
    sum / s.len() as f64
}

/// `Σ_i mean_p (S_i(p) − R_i(p))²`.
pub fn fit_loss(synthetic: &[Image], registered: &[Image]) -> Result<f64> {
    check_frames(synthetic, registered)?;
    Ok(synthetic.iter().zip(registered).map(|(s, r)| frame_mse(s, r)).sum())
}

/// Mean squared forward-difference gradient of one velocity field.
pub fn field_smoothness(v: &VelocityField) -> f64 {
    let (h, w) = v.shape();
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = v.get(r, c);
            if r + 1 < h {
                let q = v.get(r + 1, c);
                sum += (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            }
            if c + 1 < w {
                let q = v.get(r, c + 1);
                sum += (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            }
        }
    }
    sum / (h * w) as f64
}

fn field_smoothness_grad(v: &VelocityField, scale: f64, grad: &mut [[f64; 2]]) {
    let (h, w) = v.shape();
    let k = 2.0 * scale / (h * w) as f64;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let p = v.data[i];
            for (ok, j) in [(r + 1 < h, i + w), (c + 1 < w, i + 1)] {
                if ok {
                    let q = v.data[j];
                    for comp in 0..2 {
                        let d = k * (q[comp] - p[comp]);
                        grad[j][comp] += d;
                        grad[i][comp] -= d;
                    }
                }
            }
        }
    }
}

/// Smoothness term summed over all velocity fields. The reference frame has
/// no field and contributes nothing.
pub fn smoothness_loss(fields: &VelocityFieldSet) -> f64 {
    fields.fields.iter().map(field_smoothness).sum()
}

/// `1 − 2·Σ(a·b) / (Σa + Σb + ε)`.
pub fn soft_dice_loss(fixed_mask: &Image, warped_mask: &Image) -> f64 {
    let (inter, total) = dice_sums(fixed_mask, warped_mask);
    1.0 - 2.0 * inter / (total + DICE_EPS)
}

fn dice_sums(a: &Image, b: &Image) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        inter += x * y;
        total += x + y;
    }
    (inter, total)
}

/// Per-frame contribution of a moving frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct FrameTerms {
    pub fit: f64,
    pub smooth: f64,
    pub seg: f64,
}

impl FrameTerms {
    pub fn weighted(&self, config: &FitConfig) -> f64 {
        config.lambda_fit * self.fit + config.lambda_smooth * self.smooth + config.lambda_seg * self.seg
    }
}

/// Loss restricted to one moving frame with the maps held fixed.
pub(crate) struct FrameObjective<'a> {
    pub image: &'a Image,
    pub synthetic: &'a Image,
    pub mask: Option<&'a Image>,
    pub fixed_mask: Option<&'a Image>,
    pub config: &'a FitConfig,
}

impl FrameObjective<'_> {
    fn seg_active(&self) -> bool {
        self.mask.is_some() && self.fixed_mask.is_some()
    }

    pub fn value(&self, v: &VelocityField) -> FrameTerms {
        let steps = self.config.integration_steps;
        let hist = integrate_history(v, steps, false);
        let u = hist.last().unwrap();
        let registered = warp_with(self.image, u, false);
        let seg = match (self.mask, self.fixed_mask) {
            (Some(m), Some(f)) => soft_dice_loss(f, &warp_with(m, u, false)),
            _ => 0.0,
        };
        FrameTerms {
            fit: frame_mse(self.synthetic, &registered),
            smooth: field_smoothness(v),
            seg,
        }
    }

    /// Value, weighted gradient w.r.t. the velocity field, and the registered
    /// frame (needed for the map gradient).
    pub fn value_and_grad(&self, v: &VelocityField) -> (FrameTerms, Vec<[f64; 2]>, Image) {
        let cfg = self.config;
        let hist = integrate_history(v, cfg.integration_steps, false);
        let u = hist.last().unwrap();
        let n = self.image.len() as f64;
        let registered = warp_with(self.image, u, false);
        let fit = frame_mse(self.synthetic, &registered);
        let mut grad_u = vec![[0.0; 2]; u.data.len()];
        if cfg.lambda_fit != 0.0 {
            let g: Vec<f64> = registered
                .data
                .iter()
                .zip(&self.synthetic.data)
                .map(|(r, s)| cfg.lambda_fit * 2.0 * (r - s) / n)
                .collect();
            warp_backward(self.image, u, &g, &mut grad_u);
        }
        let mut seg = 0.0;
        if let (Some(m), Some(f)) = (self.mask, self.fixed_mask) {
            let warped = warp_with(m, u, false);
            let (inter, total) = dice_sums(f, &warped);
            let den = total + DICE_EPS;
            seg = 1.0 - 2.0 * inter / den;
            if cfg.lambda_seg != 0.0 && self.seg_active() {
                let g: Vec<f64> = f
                    .data
                    .iter()
                    .map(|&a| cfg.lambda_seg * -2.0 * (a * den - inter) / (den * den))
                    .collect();
                warp_backward(m, u, &g, &mut grad_u);
            }
        }
        let mut grad_v = integrate_backward(&hist, grad_u);
        if cfg.lambda_smooth != 0.0 {
            field_smoothness_grad(v, cfg.lambda_smooth, &mut grad_v);
        }
        let terms = FrameTerms {
            fit,
            smooth: field_smoothness(v),
            seg,
        };
        (terms, grad_v, registered)
    }
}

fn check_inputs(
    series: &ImageSeries,
    maps: &ParametricMaps,
    fields: &VelocityFieldSet,
    masks: Option<&MaskSet>,
) -> Result<()> {
    let shape = series.shape();
    if maps.t1.shape() != shape || maps.m0.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            found: maps.t1.shape(),
        });
    }
    fields.validate(series.len(), shape)?;
    if let Some(m) = masks {
        if m.masks.len() != series.len() {
            return Err(Error::CountMismatch {
                what: "masks",
                expected: series.len(),
                found: m.masks.len(),
            });
        }
        if let Some(bad) = m.masks.iter().find(|m| m.shape() != shape) {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: bad.shape(),
            });
        }
    }
    Ok(())
}

fn objectives<'a>(
    series: &'a ImageSeries,
    synthetic: &'a [Image],
    fields: &VelocityFieldSet,
    masks: Option<&'a MaskSet>,
    config: &'a FitConfig,
) -> Vec<FrameObjective<'a>> {
    let r = fields.reference_index;
    (0..fields.fields.len())
        .map(|slot| {
            let i = fields.frame_of_slot(slot);
            FrameObjective {
                image: &series.frames[i],
                synthetic: &synthetic[i],
                mask: masks.map(|m| &m.masks[i]),
                fixed_mask: masks.map(|m| &m.masks[r]),
                config,
            }
        })
        .collect()
}

/// Full objective: synthesizes `S_i` from the maps, warps `I_i` and the
/// masks by the integrated fields and combines the weighted terms. The seg
/// term is zero when no masks are supplied.
pub fn total_loss(
    series: &ImageSeries,
    maps: &ParametricMaps,
    fields: &VelocityFieldSet,
    masks: Option<&MaskSet>,
    config: &FitConfig,
) -> Result<LossBreakdown> {
    check_inputs(series, maps, fields, masks)?;
    let synthetic = synthesize(maps, &series.timestamps, series.zero_level);
    let objs = objectives(series, &synthetic, fields, masks, config);
    let terms = par::map_range(objs.len(), config.parallel, |s| objs[s].value(&fields.fields[s]));
    Ok(assemble(series, &synthetic, fields.reference_index, &terms, config))
}

pub(crate) fn assemble(
    series: &ImageSeries,
    synthetic: &[Image],
    reference: usize,
    terms: &[FrameTerms],
    config: &FitConfig,
) -> LossBreakdown {
    let reference_fit = frame_mse(&synthetic[reference], &series.frames[reference]);
    let mut fit = 0.0;
    let mut smooth = 0.0;
    let mut seg = 0.0;
    let mut slot = 0;
    for i in 0..series.len() {
        if i == reference {
            fit += reference_fit;
        } else {
            fit += terms[slot].fit;
            smooth += terms[slot].smooth;
            seg += terms[slot].seg;
            slot += 1;
        }
    }
    LossBreakdown::combine(fit, smooth, seg, config)
}

/// Total loss and its analytic gradient with respect to every velocity
/// component and every map value.
pub fn total_loss_and_gradient(
    series: &ImageSeries,
    maps: &ParametricMaps,
    fields: &VelocityFieldSet,
    masks: Option<&MaskSet>,
    config: &FitConfig,
) -> Result<(LossBreakdown, LossGradient)> {
    check_inputs(series, maps, fields, masks)?;
    let synthetic = synthesize(maps, &series.timestamps, series.zero_level);
    let objs = objectives(series, &synthetic, fields, masks, config);
    let per_frame = par::map_range(objs.len(), config.parallel, |s| objs[s].value_and_grad(&fields.fields[s]));
    let terms: Vec<FrameTerms> = per_frame.iter().map(|p| p.0).collect();
    let loss = assemble(series, &synthetic, fields.reference_index, &terms, config);

    let (h, w) = series.shape();
    let n = (h * w) as f64;
    let mut registered: Vec<&Image> = Vec::with_capacity(series.len());
    let mut slot = 0;
    for i in 0..series.len() {
        if i == fields.reference_index {
            registered.push(&series.frames[i]);
        } else {
            registered.push(&per_frame[slot].2);
            slot += 1;
        }
    }
    let mut g_t1 = Image::zeros(h, w);
    let mut g_m0 = Image::zeros(h, w);
    for idx in 0..h * w {
        let (t1, m0) = (maps.t1.data[idx], maps.m0.data[idx]);
        if t1 <= 0.0 {
            continue;
        }
        let (mut a, mut b) = (0.0, 0.0);
        for (i, &t) in series.timestamps.iter().enumerate() {
            let res = synthetic[i].data[idx] - registered[i].data[idx];
            let (dm0, dt1) = jacobian(m0, t1, t);
            a += res * dm0;
            b += res * dt1;
        }
        g_m0.data[idx] = config.lambda_fit * 2.0 * a / n;
        g_t1.data[idx] = config.lambda_fit * 2.0 * b / n;
    }
    let velocity = per_frame
        .into_iter()
        .map(|(_, g, _)| VectorField {
            height: h,
            width: w,
            data: g,
        })
        .collect();
    Ok((
        loss,
        LossGradient {
            velocity,
            t1: g_t1,
            m0: g_m0,
        },
    ))
}

/// A single scalar coordinate of the optimisation variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Velocity { slot: usize, voxel: usize, component: usize },
    T1 { voxel: usize },
    M0 { voxel: usize },
}

/// Registered frames, warped masks and synthetic frames for one parameter set.
struct Evaluated {
    synthetic: Vec<Image>,
    registered: Vec<Image>,
    warped: Option<Vec<Image>>,
}

fn evaluated(
    series: &ImageSeries,
    maps: &ParametricMaps,
    fields: &VelocityFieldSet,
    masks: Option<&MaskSet>,
    config: &FitConfig,
) -> Evaluated {
    let mut registered = Vec::with_capacity(series.len());
    let mut warped = masks.map(|_| Vec::with_capacity(series.len()));
    for (i, frame) in series.frames.iter().enumerate() {
        match fields.for_frame(i) {
            Some(v) => {
                let u = integrate_history(v, config.integration_steps, false).pop().unwrap();
                registered.push(warp_with(frame, &u, false));
                if let (Some(w), Some(m)) = (warped.as_mut(), masks) {
                    w.push(warp_with(&m.masks[i], &u, false));
                }
            }
            None => {
                registered.push(frame.clone());
                if let (Some(w), Some(m)) = (warped.as_mut(), masks) {
                    w.push(m.masks[i].clone());
                }
            }
        }
    }
    Evaluated {
        synthetic: synthesize(maps, &series.timestamps, series.zero_level),
        registered,
        warped,
    }
}

/// Central finite-difference derivative of the total loss along one
/// coordinate; the slow cross-check for the analytic gradient.
///
/// Each term's difference is accumulated voxel by voxel as
/// `(a⁺ − a⁻)(a⁺ + a⁻)` rather than as the difference of two totals, so the
/// result keeps its precision when one voxel barely moves a large sum.
pub fn finite_difference_gradient(
    series: &ImageSeries,
    maps: &ParametricMaps,
    fields: &VelocityFieldSet,
    masks: Option<&MaskSet>,
    config: &FitConfig,
    coord: Coordinate,
    step: f64,
) -> Result<f64> {
    check_inputs(series, maps, fields, masks)?;
    let perturbed = |delta: f64| {
        let mut maps = maps.clone();
        let mut fields = fields.clone();
        match coord {
            Coordinate::Velocity { slot, voxel, component } => fields.fields[slot].data[voxel][component] += delta,
            Coordinate::T1 { voxel } => maps.t1.data[voxel] += delta,
            Coordinate::M0 { voxel } => maps.m0.data[voxel] += delta,
        }
        let ev = evaluated(series, &maps, &fields, masks, config);
        (fields, ev)
    };
    let (fields_hi, hi) = perturbed(step);
    let (fields_lo, lo) = perturbed(-step);

    let mut d_fit = 0.0;
    for i in 0..series.len() {
        let n = series.frames[i].len() as f64;
        let mut sum = 0.0;
        for p in 0..series.frames[i].len() {
            let e_hi = hi.synthetic[i].data[p] - hi.registered[i].data[p];
            let e_lo = lo.synthetic[i].data[p] - lo.registered[i].data[p];
            let de = (hi.synthetic[i].data[p] - lo.synthetic[i].data[p])
                - (hi.registered[i].data[p] - lo.registered[i].data[p]);
            sum += de * (e_hi + e_lo);
        }
        d_fit += sum / n;
    }

    let mut d_smooth = 0.0;
    for (a, b) in fields_hi.fields.iter().zip(&fields_lo.fields) {
        let (h, w) = a.shape();
        let mut sum = 0.0;
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                for (ok, j) in [(r + 1 < h, i + w), (c + 1 < w, i + 1)] {
                    if !ok {
                        continue;
                    }
                    for k in 0..2 {
                        let d_hi = a.data[j][k] - a.data[i][k];
                        let d_lo = b.data[j][k] - b.data[i][k];
                        let dd = (a.data[j][k] - b.data[j][k]) - (a.data[i][k] - b.data[i][k]);
                        sum += dd * (d_hi + d_lo);
                    }
                }
            }
        }
        d_smooth += sum / (h * w) as f64;
    }

    let mut d_seg = 0.0;
    if let (Some(m), Some(w_hi), Some(w_lo)) = (masks, &hi.warped, &lo.warped) {
        let fixed = &m.masks[fields.reference_index];
        for i in (0..series.len()).filter(|&i| i != fields.reference_index) {
            let (i_lo, d_lo) = dice_sums(fixed, &w_lo[i]);
            let (_, d_hi) = dice_sums(fixed, &w_hi[i]);
            let (d_lo, d_hi) = (d_lo + DICE_EPS, d_hi + DICE_EPS);
            let mut di = 0.0;
            let mut dd = 0.0;
            for ((&f, &b_hi), &b_lo) in fixed.data.iter().zip(&w_hi[i].data).zip(&w_lo[i].data) {
                di += f * (b_hi - b_lo);
                dd += b_hi - b_lo;
            }
            d_seg += -2.0 * (di * d_lo - i_lo * dd) / (d_hi * d_lo);
        }
    }

    let diff = config.lambda_fit * d_fit + config.lambda_smooth * d_smooth + config.lambda_seg * d_seg;
    Ok(diff / (2.0 * step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_model::signal;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(h, w, f)
    }

    #[test]
    fn fit_loss_cases() {
        let a = vec![img(4, 4, |r, c| (r * c) as f64), img(4, 4, |r, _| r as f64)];
        assert_eq!(fit_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b[1].data.iter_mut().for_each(|v| *v += 0.5);
        assert_eq!(fit_loss(&a, &b).unwrap(), 0.25);
        // Brute-force double loop.
        let c = vec![img(3, 5, |r, c| (r as f64 * 1.3 - c as f64).sin()), img(3, 5, |r, c| (r + 2 * c) as f64 * 0.1)];
        let d = vec![img(3, 5, |r, c| (c as f64 * 0.7).cos() + r as f64), img(3, 5, |_, c| c as f64)];
        let mut brute = 0.0;
        for k in 0..2 {
            let mut s = 0.0;
            for r in 0..3 {
                for cc in 0..5 {
                    s += (c[k].get(r, cc) - d[k].get(r, cc)).powi(2);
                }
            }
            brute += s / 15.0;
        }
        assert!((fit_loss(&c, &d).unwrap() - brute).abs() < 1e-12);
        assert!(matches!(fit_loss(&c, &d[..1]), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn smoothness_cases() {
        let constant = VelocityFieldSet {
            fields: vec![VectorField::constant(5, 5, [1.0, -2.0])],
            reference_index: 0,
        };
        assert_eq!(smoothness_loss(&constant), 0.0);

        // Unit step in the row component between (2,2) and (2,3).
        let mut step = VectorField::zeros(5, 5);
        step.data[2 * 5 + 3][0] = 1.0;
        // Brute force: every forward difference touching (2,3).
        let mut brute = 0.0;
        for r in 0..5usize {
            for c in 0..5usize {
                for (dr, dc) in [(1usize, 0usize), (0, 1)] {
                    if r + dr < 5 && c + dc < 5 {
                        let a = step.get(r, c);
                        let b = step.get(r + dr, c + dc);
                        brute += (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
                    }
                }
            }
        }
        assert_eq!(brute, 4.0);
        assert_eq!(field_smoothness(&step), brute / 25.0);

        let v = crate::deformation::tests::smooth_field(8, 8, 1.0, 2);
        assert_eq!(field_smoothness(&v.scaled(2.0)) / field_smoothness(&v), 4.0);
    }

    #[test]
    fn dice_loss_cases() {
        let a = img(2, 2, |r, c| if r == 0 && c < 2 { 1.0 } else { 0.0 });
        assert!(soft_dice_loss(&a, &a).abs() < 1e-7);
        let b = img(2, 2, |r, _| if r == 1 { 1.0 } else { 0.0 });
        assert!((soft_dice_loss(&a, &b) - 1.0).abs() < 1e-12);
        let c = img(2, 2, |r, c| if (r == 0 && c == 0) || (r == 1 && c == 0) { 1.0 } else { 0.0 });
        assert!((soft_dice_loss(&a, &c) - 0.5).abs() < 1e-7);
        let empty = Image::zeros(2, 2);
        assert_eq!(soft_dice_loss(&empty, &empty), 1.0);
    }

    fn static_problem() -> (ImageSeries, ParametricMaps, MaskSet) {
        let (h, w) = (12, 12);
        let times: Vec<f64> = (0..5).map(|i| 100.0 * 2f64.powi(i)).collect();
        let maps = ParametricMaps {
            t1: img(h, w, |r, c| 400.0 + 60.0 * r as f64 + 20.0 * c as f64),
            m0: img(h, w, |r, c| 0.5 + 0.02 * (r + c) as f64),
        };
        let frames = times
            .iter()
            .map(|&t| img(h, w, |r, c| signal(maps.m0.get(r, c), maps.t1.get(r, c), t)))
            .collect();
        let masks = MaskSet {
            masks: (0..5)
                .map(|_| img(h, w, |r, c| if (3..9).contains(&r) && (4..8).contains(&c) { 1.0 } else { 0.0 }))
                .collect(),
        };
        (ImageSeries::new(frames, times, (2.1, 2.1)).unwrap(), maps, masks)
    }

    #[test]
    fn static_round_trip_has_no_fit_or_smooth_loss() {
        let (s, maps, masks) = static_problem();
        let fields = VelocityFieldSet::zeros(5, 12, 12, 0);
        let l = total_loss(&s, &maps, &fields, Some(&masks), &FitConfig::default()).unwrap();
        assert!(l.fit < 1e-24);
        assert_eq!(l.smooth, 0.0);
        assert!(l.seg < 1e-6);
    }

    #[test]
    fn weights_act_linearly() {
        let (s, maps, masks) = static_problem();
        let mut fields = VelocityFieldSet::zeros(5, 12, 12, 0);
        for (k, f) in fields.fields.iter_mut().enumerate() {
            *f = crate::deformation::tests::smooth_field(12, 12, 1.5, k as u64);
        }
        let base = FitConfig::default();
        let l0 = total_loss(&s, &maps, &fields, Some(&masks), &base).unwrap();
        let no_seg = FitConfig { lambda_seg: 0.0, ..base.clone() };
        let l1 = total_loss(&s, &maps, &fields, Some(&masks), &no_seg).unwrap();
        assert_eq!(l1.total, l1.fit + 500.0 * l1.smooth);
        let doubled = FitConfig { lambda_smooth: 1000.0, ..base.clone() };
        let l2 = total_loss(&s, &maps, &fields, Some(&masks), &doubled).unwrap();
        assert!((l2.total - l0.total - 500.0 * l0.smooth).abs() <= 1e-9 * l2.total);
        assert!(l0.fit >= 0.0 && l0.smooth >= 0.0 && l0.seg >= 0.0);
    }

    #[test]
    fn shape_errors_propagate() {
        let (s, maps, _) = static_problem();
        let fields = VelocityFieldSet::zeros(4, 12, 12, 0);
        assert!(total_loss(&s, &maps, &fields, None, &FitConfig::default()).is_err());
    }
}
