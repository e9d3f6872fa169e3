//! Containers shared by every stage: image series, parametric maps, vector
//! fields, masks and the fit configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::CountMismatch {
                what: "image samples",
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Dense 2D field of (row, col) vectors in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; 2]>,
}

/// A stationary velocity field; its exponential is a [`DisplacementField`].
pub type VelocityField = VectorField;
/// Backward-mapping displacement: output voxel `p` samples the input at `p + u(p)`.
pub type DisplacementField = VectorField;

impl VectorField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![[0.0; 2]; height * width],
        }
    }

    pub fn constant(height: usize, width: usize, v: [f64; 2]) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [f64; 2] {
        self.data[r * self.width + c]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| [v[0] * s, v[1] * s]).collect(),
        }
    }

    /// Largest vector norm in the field.
    pub fn max_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }
}

/// N co-located frames sampled at increasing inversion times.
///
/// `zero_level` is the intensity that corresponds to zero signal. Raw data
/// has `zero_level == 0`; after [`min_max_normalize`] it records where the
/// original zero landed, so the inversion-recovery model stays exact in
/// normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSeries {
    pub frames: Vec<Image>,
    /// Inversion times in ms.
    pub timestamps: Vec<f64>,
    /// (row, col) voxel spacing in mm.
    pub spacing: (f64, f64),
    pub zero_level: f64,
}

impl ImageSeries {
    pub fn new(frames: Vec<Image>, timestamps: Vec<f64>, spacing: (f64, f64)) -> Result<Self> {
        let s = Self {
            frames,
            timestamps,
            spacing,
            zero_level: 0.0,
        };
        validate_series(&s)?;
        Ok(s)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames.first().map(Image::shape).unwrap_or((0, 0))
    }

    /// Global (min, max) intensity over all frames.
    pub fn intensity_range(&self) -> (f64, f64) {
        self.frames.iter().map(Image::min_max).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), (a, b)| (lo.min(a), hi.max(b)),
        )
    }

    /// Time course of voxel `idx` (row-major) across frames.
    pub fn voxel_series(&self, idx: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.data[idx]).collect()
    }

    /// Same metadata, different frames.
    pub fn with_frames(&self, frames: Vec<Image>) -> Self {
        Self {
            frames,
            timestamps: self.timestamps.clone(),
            spacing: self.spacing,
            zero_level: self.zero_level,
        }
    }
}

/// Per-voxel T1 (ms) and M0 (intensity units of the fitted series).
///
/// A T1 of exactly 0 marks a voxel that was not fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricMaps {
    pub t1: Image,
    pub m0: Image,
}

impl ParametricMaps {
    pub fn shape(&self) -> (usize, usize) {
        self.t1.shape()
    }
}

/// One stationary velocity field per non-reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityFieldSet {
    /// Fields in frame order with the reference frame skipped.
    pub fields: Vec<VelocityField>,
    pub reference_index: usize,
}

impl VelocityFieldSet {
    pub fn zeros(frames: usize, height: usize, width: usize, reference_index: usize) -> Self {
        Self {
            fields: (0..frames.saturating_sub(1))
                .map(|_| VectorField::zeros(height, width))
                .collect(),
            reference_index,
        }
    }

    /// Total number of frames, including the reference.
    pub fn frame_count(&self) -> usize {
        self.fields.len() + 1
    }

    /// Position in `fields` for frame `frame`, `None` for the reference.
    pub fn slot(&self, frame: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match frame.cmp(&self.reference_index) {
            Less => Some(frame),
            Equal => None,
            Greater => Some(frame - 1),
        }
    }

    pub fn for_frame(&self, frame: usize) -> Option<&VelocityField> {
        self.slot(frame).map(|s| &self.fields[s])
    }

    /// Frame index owning `fields[slot]`.
    pub fn frame_of_slot(&self, slot: usize) -> usize {
        if slot < self.reference_index {
            slot
        } else {
            slot + 1
        }
    }

    pub fn validate(&self, frames: usize, shape: (usize, usize)) -> Result<()> {
        if self.fields.len() + 1 != frames {
            return Err(Error::CountMismatch {
                what: "velocity fields",
                expected: frames.saturating_sub(1),
                found: self.fields.len(),
            });
        }
        if self.reference_index >= frames {
            return Err(Error::InvalidConfig(format!(
                "reference index {} out of range for {frames} frames",
                self.reference_index
            )));
        }
        for (i, f) in self.fields.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    found: f.shape(),
                });
            }
            if !f.is_finite() {
                return Err(Error::NonFiniteValue {
                    what: "velocity field",
                    index: i,
                });
            }
        }
        Ok(())
    }
}

/// Per-frame myocardium masks. Values are 0 or 1 for binary masks; the
/// optimizer also uses fractional masks on coarse pyramid levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Image>,
}

impl MaskSet {
    pub fn validate(&self, frames: usize, shape: (usize, usize)) -> Result<()> {
        if self.masks.len() != frames {
            return Err(Error::CountMismatch {
                what: "masks",
                expected: frames,
                found: self.masks.len(),
            });
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    found: m.shape(),
                });
            }
            if let Some(j) = m.data.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonFiniteValue {
                    what: "binary mask",
                    index: i * m.len() + j,
                });
            }
        }
        Ok(())
    }
}

/// Optimizer and fitter settings. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda_fit: f64,
    pub lambda_smooth: f64,
    pub lambda_seg: f64,
    /// Outer iterations per pyramid level; 0 disables registration.
    pub outer_iterations: usize,
    /// Velocity steps between map re-fits.
    pub refit_every: usize,
    pub integration_steps: u32,
    /// Largest per-voxel velocity change (voxels) of a trial step.
    pub step_size: f64,
    pub max_halvings: u32,
    /// Gaussian width (voxels) of the gradient preconditioner; 0 disables it.
    pub gradient_smoothing: f64,
    pub pyramid_levels: usize,
    pub reference_index: usize,
    pub t1_min: f64,
    pub t1_max: f64,
    pub t1_starts: usize,
    pub tolerance: f64,
    /// Treat inputs as magnitude data and restore polarity while fitting.
    pub magnitude: bool,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_fit: 1.0,
            lambda_smooth: 500.0,
            lambda_seg: 70000.0,
            outer_iterations: 10,
            refit_every: 5,
            integration_steps: 7,
            step_size: 0.5,
            max_halvings: 10,
            gradient_smoothing: 2.0,
            pyramid_levels: 3,
            reference_index: 0,
            t1_min: 50.0,
            t1_max: 5000.0,
            t1_starts: 8,
            tolerance: 1e-5,
            magnitude: false,
            seed: 0,
            parallel: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("lambda_fit", self.lambda_fit),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_seg", self.lambda_seg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative weight, got {v}"));
            }
        }
        if !(self.t1_min > 0.0 && self.t1_max > self.t1_min && self.t1_max.is_finite()) {
            return bad(format!(
                "T1 range [{}, {}] must satisfy 0 < min < max",
                self.t1_min, self.t1_max
            ));
        }
        if self.integration_steps == 0 || self.integration_steps > 20 {
            return bad("integration_steps must be in 1..=20".into());
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive".into());
        }
        if self.refit_every == 0 {
            return bad("refit_every must be at least 1".into());
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be at least 1".into());
        }
        if self.t1_starts == 0 {
            return bad("t1_starts must be at least 1".into());
        }
        if !(self.gradient_smoothing >= 0.0 && self.gradient_smoothing.is_finite()) {
            return bad("gradient_smoothing must be nonnegative".into());
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be nonnegative".into());
        }
        Ok(())
    }
}

/// Check every structural invariant of an [`ImageSeries`].
pub fn validate_series(series: &ImageSeries) -> Result<()> {
    let n = series.frames.len();
    if n < 3 {
        return Err(Error::TooFewFrames { found: n });
    }
    if series.timestamps.len() != n {
        return Err(Error::CountMismatch {
            what: "timestamps",
            expected: n,
            found: series.timestamps.len(),
        });
    }
    let shape = series.frames[0].shape();
    if shape.0 == 0 || shape.1 == 0 {
        return Err(Error::ShapeMismatch {
            expected: (1, 1),
            found: shape,
        });
    }
    for f in &series.frames {
        if f.shape() != shape || f.data.len() != shape.0 * shape.1 {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: f.shape(),
            });
        }
    }
    let mut prev = 0.0;
    for (i, &t) in series.timestamps.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::NonFiniteValue {
                what: "timestamps",
                index: i,
            });
        }
        if t <= prev {
            return Err(Error::NonIncreasingTimestamps { index: i, value: t });
        }
        prev = t;
    }
    for (k, f) in series.frames.iter().enumerate() {
        if let Some(j) = f.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                what: "frame intensities",
                index: k * f.len() + j,
            });
        }
    }
    let (sr, sc) = series.spacing;
    if !(sr > 0.0 && sc > 0.0 && sr.is_finite() && sc.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "voxel spacing must be positive, got ({sr}, {sc})"
        )));
    }
    if !series.zero_level.is_finite() {
        return Err(Error::NonFiniteValue {
            what: "zero level",
            index: 0,
        });
    }
    Ok(())
}

/// Rescale the whole series with one global min/max so intensities span
/// [0, 1]. Per-frame scaling would break the relative recovery amplitudes.
pub fn min_max_normalize(series: &ImageSeries) -> Result<ImageSeries> {
    validate_series(series)?;
    let (lo, hi) = series.intensity_range();
    if hi <= lo {
        return Err(Error::ConstantSeries);
    }
    if lo == 0.0 && hi == 1.0 {
        return Ok(series.clone());
    }
    let scale = hi - lo;
    let frames = series
        .frames
        .iter()
        .map(|f| Image {
            height: f.height,
            width: f.width,
            data: f.data.iter().map(|&v| (v - lo) / scale).collect(),
        })
        .collect();
    Ok(ImageSeries {
        frames,
        timestamps: series.timestamps.clone(),
        spacing: series.spacing,
        zero_level: (series.zero_level - lo) / scale,
    })
}
