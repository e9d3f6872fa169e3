//! Direct minimisation of the joint motion/relaxation objective by block
//! coordinate descent.
//!
//! Each outer iteration re-fits the parametric maps voxel by voxel on the
//! currently registered frames (block A), then takes `refit_every`
//! preconditioned gradient steps on every velocity field with the maps held
//! fixed (block B). Block B steps are backtracking line searches on the
//! frame's own loss contribution, so the total objective never increases.
//! The whole scheme runs coarse-to-fine over a resolution pyramid.

use crate::datamodel::{validate_series, FitConfig, Image, ImageSeries, MaskSet, ParametricMaps, VectorField, VelocityFieldSet};
use crate::deformation::{integrate_velocity, warp_with};
use crate::error::{Error, Result};
use crate::losses::{assemble, FrameObjective, FrameTerms, LossBreakdown};
use crate::par;
use crate::pyramid::{downsample_masks, downsample_series, upsample_field, usable_levels};
use crate::signal_model::{fit_map, fit_map_impl, signal, synthesize, MapFit};

/// Smallest image side kept in the pyramid.
const MIN_LEVEL_SIDE: usize = 16;
/// Tolerance on the [0, 1] range check of normalized inputs.
const RANGE_TOL: f64 = 1e-6;

/// Result of [`joint_fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointSolution {
    pub maps: ParametricMaps,
    pub fields: VelocityFieldSet,
    /// `I_i ∘ φ_i`; the reference frame is the untouched input frame.
    pub registered: ImageSeries,
    /// Model-predicted frames from `maps`.
    pub synthetic: ImageSeries,
    /// Finest-level loss after initialisation and after each accepted outer
    /// iteration.
    pub trace: Vec<LossBreakdown>,
    /// Traces of every pyramid level, coarsest first (the last equals `trace`).
    pub level_traces: Vec<Vec<LossBreakdown>>,
    pub converged: bool,
    pub iterations: usize,
    /// Squaring steps used to integrate `fields`.
    pub integration_steps: u32,
}

impl JointSolution {
    /// Displacement fields `exp(v_i)` for every frame; identity for the reference.
    pub fn displacements(&self, steps: u32) -> Vec<VectorField> {
        let (h, w) = self.maps.shape();
        (0..self.fields.frame_count())
            .map(|i| match self.fields.for_frame(i) {
                Some(v) => integrate_velocity(v, steps),
                None => VectorField::zeros(h, w),
            })
            .collect()
    }
}

fn check_normalized(series: &ImageSeries) -> Result<()> {
    let (lo, hi) = series.intensity_range();
    if lo < -RANGE_TOL || hi > 1.0 + RANGE_TOL {
        return Err(Error::NotNormalized { min: lo, max: hi });
    }
    Ok(())
}

/// Maps fitted to the raw frames with no registration.
pub fn fit_uncorrected(series: &ImageSeries, config: &FitConfig) -> Result<MapFit> {
    fit_map(series, config, None)
}

/// Wrap uncorrected maps as a solution with identity fields, so baseline
/// and corrected results go through the same evaluation path.
pub fn uncorrected_solution(series: &ImageSeries, config: &FitConfig) -> Result<JointSolution> {
    let fit = fit_uncorrected(series, config)?;
    let (h, w) = series.shape();
    let fields = VelocityFieldSet::zeros(series.len(), h, w, config.reference_index);
    let synthetic = series.with_frames(synthesize(&fit.maps, &series.timestamps, series.zero_level));
    let loss = crate::losses::total_loss(series, &fit.maps, &fields, None, config)?;
    Ok(JointSolution {
        maps: fit.maps,
        fields,
        registered: series.clone(),
        synthetic,
        trace: vec![loss],
        level_traces: vec![vec![loss]],
        converged: false,
        iterations: 0,
        integration_steps: config.integration_steps,
    })
}

/// Jointly estimate T1/M0 maps and one velocity field per moving frame.
pub fn joint_fit(series: &ImageSeries, config: &FitConfig, masks: Option<&MaskSet>) -> Result<JointSolution> {
    validate_series(series)?;
    config.validate()?;
    check_normalized(series)?;
    let n = series.len();
    let shape = series.shape();
    if config.reference_index >= n {
        return Err(Error::InvalidConfig(format!(
            "reference_index {} out of range for {n} frames",
            config.reference_index
        )));
    }
    if let Some(m) = masks {
        m.validate(n, shape)?;
    }

    if config.outer_iterations == 0 {
        let mut sol = uncorrected_solution(series, config)?;
        if let Some(m) = masks {
            let loss = crate::losses::total_loss(series, &sol.maps, &sol.fields, Some(m), config)?;
            sol.trace = vec![loss];
            sol.level_traces = vec![vec![loss]];
        }
        return Ok(sol);
    }

    let levels = usable_levels(shape, config.pyramid_levels, MIN_LEVEL_SIDE);
    let mut pyramid = vec![(series.clone(), masks.cloned())];
    for _ in 1..levels {
        let (s, m) = pyramid.last().unwrap();
        let next = (downsample_series(s), m.as_ref().map(downsample_masks));
        pyramid.push(next);
    }

    let mut carried: Option<VelocityFieldSet> = None;
    let mut level_traces = Vec::with_capacity(levels);
    let mut last = None;
    for (s, m) in pyramid.iter().rev() {
        let (h, w) = s.shape();
        let zero = VelocityFieldSet::zeros(n, h, w, config.reference_index);
        let mut state = LevelState::new(s, m.as_ref(), zero, config);
        if let Some(coarse) = carried.take() {
            let up = VelocityFieldSet {
                fields: coarse.fields.iter().map(|v| upsample_field(v, h, w)).collect(),
                reference_index: coarse.reference_index,
            };
            let candidate = LevelState::new(s, m.as_ref(), up, config);
            if candidate.loss.total < state.loss.total {
                state = candidate;
            }
        }
        let outcome = state.optimize(config);
        level_traces.push(outcome.trace.clone());
        carried = Some(outcome.state.fields.clone());
        last = Some(outcome);
    }
    let outcome = last.expect("at least one level");
    let state = outcome.state;
    let registered = series.with_frames(registered_frames(series, &state.fields, config));
    let synthetic = series.with_frames(state.synthetic.clone());
    Ok(JointSolution {
        maps: state.maps,
        fields: state.fields,
        registered,
        synthetic,
        trace: outcome.trace,
        level_traces,
        converged: outcome.converged,
        iterations: outcome.iterations,
        integration_steps: config.integration_steps,
    })
}

struct LevelState<'a> {
    series: &'a ImageSeries,
    masks: Option<&'a MaskSet>,
    fields: VelocityFieldSet,
    maps: ParametricMaps,
    synthetic: Vec<Image>,
    terms: Vec<FrameTerms>,
    loss: LossBreakdown,
}

struct LevelOutcome<'a> {
    state: LevelState<'a>,
    trace: Vec<LossBreakdown>,
    converged: bool,
    iterations: usize,
}

/// Accepted line-search step for one frame.
struct Step {
    field: VectorField,
    terms: FrameTerms,
    size: f64,
    halvings: u32,
}

impl<'a> LevelState<'a> {
    /// Fit maps from scratch on the frames registered by `fields`.
    fn new(
        series: &'a ImageSeries,
        masks: Option<&'a MaskSet>,
        fields: VelocityFieldSet,
        config: &FitConfig,
    ) -> Self {
        let registered = series.with_frames(registered_frames(series, &fields, config));
        let maps = fit_map(&registered, config, None).expect("validated inputs").maps;
        let mut state = Self {
            series,
            masks,
            fields,
            maps,
            synthetic: Vec::new(),
            terms: Vec::new(),
            loss: LossBreakdown::default(),
        };
        state.refresh(config);
        state
    }

    fn objective<'b>(&'b self, slot: usize, config: &'b FitConfig) -> FrameObjective<'b> {
        let i = self.fields.frame_of_slot(slot);
        let r = self.fields.reference_index;
        FrameObjective {
            image: &self.series.frames[i],
            synthetic: &self.synthetic[i],
            mask: self.masks.map(|m| &m.masks[i]),
            fixed_mask: self.masks.map(|m| &m.masks[r]),
            config,
        }
    }

    /// Recompute synthetic frames, per-frame terms and the total.
    fn refresh(&mut self, config: &FitConfig) {
        self.synthetic = synthesize(&self.maps, &self.series.timestamps, self.series.zero_level);
        let this = &*self;
        let terms = par::map_range(this.fields.fields.len(), config.parallel, |s| {
            this.objective(s, config).value(&this.fields.fields[s])
        });
        self.terms = terms;
        self.reassemble(config);
    }

    fn reassemble(&mut self, config: &FitConfig) {
        self.loss = assemble(self.series, &self.synthetic, self.fields.reference_index, &self.terms, config);
    }

    /// Block A: warm-started per-voxel re-fit, keeping a voxel's new
    /// parameters only where they lower its residual.
    fn refit_maps(&mut self, config: &FitConfig) {
        let registered = self.series.with_frames(registered_frames(self.series, &self.fields, config));
        let fit = fit_map_impl(&registered, config, None, Some(&self.maps), false).expect("validated inputs");
        let zero = self.series.zero_level;
        let times = &self.series.timestamps;
        let mut maps = self.maps.clone();
        let mut changed = false;
        for idx in 0..maps.t1.len() {
            let (t1, m0) = (self.maps.t1.data[idx], self.maps.m0.data[idx]);
            let old: f64 = registered
                .frames
                .iter()
                .zip(times)
                .map(|(f, &t)| {
                    let r = signal(m0, t1, t) - (f.data[idx] - zero);
                    r * r
                })
                .sum();
            if fit.sse.data[idx] < old {
                maps.t1.data[idx] = fit.maps.t1.data[idx];
                maps.m0.data[idx] = fit.maps.m0.data[idx];
                changed = true;
            }
        }
        if !changed {
            return;
        }
        let previous = (std::mem::replace(&mut self.maps, maps), self.synthetic.clone(), self.terms.clone(), self.loss);
        self.refresh(config);
        if self.loss.total > previous.3.total {
            self.maps = previous.0;
            self.synthetic = previous.1;
            self.terms = previous.2;
            self.loss = previous.3;
        }
    }

    /// Block B: one preconditioned gradient step per velocity field, all
    /// against the same snapshot. Returns the number of accepted steps.
    fn velocity_step(&mut self, config: &FitConfig, trial: &mut [f64], stalled: &mut [bool]) -> usize {
        let (h, w) = self.series.shape();
        let this = &*self;
        let steps = par::map_range(this.fields.fields.len(), config.parallel, |s| -> Option<Step> {
            if stalled[s] {
                return None;
            }
            let obj = this.objective(s, config);
            let v = &this.fields.fields[s];
            let (terms, grad, _) = obj.value_and_grad(v);
            let current = terms.weighted(config);
            let dir = precondition(&grad, h, w, config.gradient_smoothing);
            let norm = dir.iter().map(|d| d[0].hypot(d[1])).fold(0.0, f64::max);
            if !(norm > 0.0 && norm.is_finite()) {
                return None;
            }
            let mut size = trial[s];
            for halvings in 0..=config.max_halvings {
                let alpha = size / norm;
                let field = VectorField {
                    height: h,
                    width: w,
                    data: v
                        .data
                        .iter()
                        .zip(&dir)
                        .map(|(a, d)| [a[0] - alpha * d[0], a[1] - alpha * d[1]])
                        .collect(),
                };
                let t = obj.value(&field);
                if t.weighted(config) < current {
                    return Some(Step {
                        field,
                        terms: t,
                        size,
                        halvings,
                    });
                }
                size *= 0.5;
            }
            None
        });
        let mut accepted = 0;
        for (s, step) in steps.into_iter().enumerate() {
            match step {
                Some(step) => {
                    self.fields.fields[s] = step.field;
                    self.terms[s] = step.terms;
                    trial[s] = if step.halvings == 0 {
                        (2.0 * step.size).min(config.step_size)
                    } else {
                        step.size
                    };
                    accepted += 1;
                }
                None if !stalled[s] => {
                    stalled[s] = true;
                    trial[s] = config.step_size;
                }
                None => {}
            }
        }
        self.reassemble(config);
        accepted
    }

    fn optimize(mut self, config: &FitConfig) -> LevelOutcome<'a> {
        let slots = self.fields.fields.len();
        let mut trace = vec![self.loss];
        let mut trial = vec![config.step_size; slots];
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..config.outer_iterations {
            let before = self.loss;
            let snapshot = (self.fields.clone(), self.maps.clone(), self.synthetic.clone(), self.terms.clone());
            if it > 0 {
                self.refit_maps(config);
            }
            let mut stalled = vec![false; slots];
            for _ in 0..config.refit_every {
                if self.velocity_step(config, &mut trial, &mut stalled) == 0 {
                    break;
                }
            }
            if self.loss.total > before.total {
                // Rounding in the regrouped sum; keep the previous iterate.
                self.fields = snapshot.0;
                self.maps = snapshot.1;
                self.synthetic = snapshot.2;
                self.terms = snapshot.3;
                self.loss = before;
                converged = true;
                break;
            }
            iterations += 1;
            trace.push(self.loss);
            let rel = (before.total - self.loss.total) / before.total.abs().max(f64::MIN_POSITIVE);
            if rel < config.tolerance {
                converged = true;
                break;
            }
        }
        LevelOutcome {
            state: self,
            trace,
            converged,
            iterations,
        }
    }
}

fn registered_frames(series: &ImageSeries, fields: &VelocityFieldSet, config: &FitConfig) -> Vec<Image> {
    par::map_range(series.len(), config.parallel, |i| match fields.for_frame(i) {
        Some(v) => warp_with(&series.frames[i], &integrate_velocity(v, config.integration_steps), false),
        None => series.frames[i].clone(),
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Clamp-to-edge 1D convolution along rows (`along_rows`) or columns, or
/// its exact adjoint.
fn convolve(data: &[[f64; 2]], h: usize, w: usize, kernel: &[f64], along_rows: bool, adjoint: bool) -> Vec<[f64; 2]> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![[0.0; 2]; data.len()];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            for (k, &wk) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let j = if along_rows {
                    let rr = (r as i64 + off).clamp(0, h as i64 - 1) as usize;
                    rr * w + c
                } else {
                    let cc = (c as i64 + off).clamp(0, w as i64 - 1) as usize;
                    r * w + cc
                };
                if adjoint {
                    out[j][0] += wk * data[i][0];
                    out[j][1] += wk * data[i][1];
                } else {
                    out[i][0] += wk * data[j][0];
                    out[i][1] += wk * data[j][1];
                }
            }
        }
    }
    out
}

/// Sobolev-type preconditioner `Bᵀ B g` with `B` a separable Gaussian blur.
/// It is positive semi-definite, so the result is a descent direction
/// whenever it is nonzero.
pub(crate) fn precondition(grad: &[[f64; 2]], h: usize, w: usize, sigma: f64) -> Vec<[f64; 2]> {
    if sigma <= 0.0 {
        return grad.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let a = convolve(grad, h, w, &k, true, false);
    let b = convolve(&a, h, w, &k, false, false);
    let c = convolve(&b, h, w, &k, false, true);
    convolve(&c, h, w, &k, true, true)
}
