//! Synthetic short-axis phantom with known T1/M0 maps, myocardium masks and
//! per-frame motion.
//!
//! The scene is analytic: a left-ventricular blood pool inside a myocardial
//! annulus, a right-ventricular blood pool, and background tissue. Frames
//! are point-sampled from the analytic scene at `p + m_i(p)` where `m_i` is
//! the frame's motion (global translation plus a smooth low-frequency
//! deformation), so a motion-free, noise-free frame follows the signal model
//! exactly at every voxel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{DisplacementField, Image, ImageSeries, MaskSet, ParametricMaps, VectorField};
use crate::error::{Error, Result};
use crate::signal_model::signal;

use std::f64::consts::TAU;

/// `n` inversion times from 100 ms to 4000 ms in geometric progression.
pub fn default_timestamps(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n)
        .map(|k| 100.0 * 40f64.powf(k as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub timestamps: Vec<f64>,
    /// (row, col) voxel spacing in mm.
    pub spacing: (f64, f64),
    pub t1_myocardium: f64,
    pub t1_blood: f64,
    pub t1_background: f64,
    pub m0_myocardium: f64,
    pub m0_blood: f64,
    pub m0_background: f64,
    /// Relative amplitude of the smooth within-tissue T1 modulation.
    pub t1_variation: f64,
    /// Per-frame translation magnitude range in voxels.
    pub translation_min: f64,
    pub translation_max: f64,
    /// Peak amplitude of the non-rigid component in voxels.
    pub deformation: f64,
    /// Peak signal (largest M0) over noise standard deviation; `None` is noise-free.
    pub snr: Option<f64>,
    /// Frame that defines the reference anatomy; it never moves.
    pub reference_index: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 160,
            width: 160,
            timestamps: default_timestamps(11),
            spacing: (2.1, 2.1),
            t1_myocardium: 1100.0,
            t1_blood: 1700.0,
            t1_background: 300.0,
            m0_myocardium: 0.75,
            m0_blood: 1.0,
            m0_background: 0.3,
            t1_variation: 0.03,
            translation_min: 3.0,
            translation_max: 5.0,
            deformation: 1.5,
            snr: Some(30.0),
            reference_index: 0,
        }
    }
}

impl PhantomConfig {
    /// No motion and no noise.
    pub fn still(mut self) -> Self {
        self.translation_min = 0.0;
        self.translation_max = 0.0;
        self.deformation = 0.0;
        self.snr = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if self.height < 64 || self.width < 64 {
            return bad("dimensions must be at least 64×64");
        }
        if self.timestamps.len() < 3 {
            return bad("at least 3 timestamps are required");
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) || self.timestamps[0] <= 0.0 {
            return bad("timestamps must be positive and strictly increasing");
        }
        if self.reference_index >= self.timestamps.len() {
            return bad("reference index out of range");
        }
        if !(0.0 <= self.translation_min && self.translation_min <= self.translation_max) {
            return bad("translation range must satisfy 0 <= min <= max");
        }
        if self.deformation < 0.0 || self.t1_variation < 0.0 || self.t1_variation >= 1.0 {
            return bad("deformation and T1 variation must be nonnegative (variation < 1)");
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0) {
                return bad("snr must be positive");
            }
        }
        for t1 in [self.t1_myocardium, self.t1_blood, self.t1_background] {
            if !(t1 > 0.0) {
                return bad("tissue T1 values must be positive");
            }
        }
        Ok(())
    }

    pub fn noise_sigma(&self) -> f64 {
        match self.snr {
            Some(snr) => self.m0_myocardium.max(self.m0_blood).max(self.m0_background) / snr,
            None => 0.0,
        }
    }
}

/// A rendered phantom with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomScene {
    pub config: PhantomConfig,
    pub seed: u64,
    /// Maps in reference-frame coordinates.
    pub truth_maps: ParametricMaps,
    /// Myocardium masks of every frame, moved with the anatomy.
    pub truth_masks: MaskSet,
    /// Backward displacement per frame: frame `i` shows the scene at `p + m_i(p)`.
    pub truth_motion: Vec<DisplacementField>,
    /// Rendered frames in signal units (not normalized).
    pub series: ImageSeries,
}

impl PhantomScene {
    /// Myocardium mask of the reference frame.
    pub fn reference_mask(&self) -> &Image {
        &self.truth_masks.masks[self.config.reference_index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Myocardium,
    Blood,
}

/// Analytic scene geometry, scaled to the image size.
struct Anatomy {
    h: f64,
    w: f64,
    lv: (f64, f64),
    rv: (f64, f64),
    blood_radius: f64,
    myo_radius: f64,
    rv_radii: (f64, f64),
}

impl Anatomy {
    fn new(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64 / 160.0;
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0 + 8.0 * s);
        Self {
            h: h as f64,
            w: w as f64,
            lv: (cy, cx),
            rv: (cy + 2.0 * s, cx - 38.0 * s),
            blood_radius: 14.0 * s,
            myo_radius: 22.0 * s,
            rv_radii: (20.0 * s, 10.0 * s),
        }
    }

    fn tissue(&self, y: f64, x: f64) -> Tissue {
        let d = (y - self.lv.0).hypot(x - self.lv.1);
        if d < self.blood_radius {
            return Tissue::Blood;
        }
        if d < self.myo_radius {
            return Tissue::Myocardium;
        }
        let ey = (y - self.rv.0) / self.rv_radii.0;
        let ex = (x - self.rv.1) / self.rv_radii.1;
        if ey * ey + ex * ex < 1.0 {
            return Tissue::Blood;
        }
        Tissue::Background
    }

    /// (T1, M0) at a continuous location.
    fn params(&self, cfg: &PhantomConfig, y: f64, x: f64) -> (f64, f64) {
        let modulation = 1.0
            + cfg.t1_variation * (TAU * y / self.h + 0.7).sin() * (TAU * x / self.w + 0.3).cos();
        match self.tissue(y, x) {
            Tissue::Background => (cfg.t1_background * modulation, cfg.m0_background),
            Tissue::Myocardium => (cfg.t1_myocardium * modulation, cfg.m0_myocardium),
            Tissue::Blood => (cfg.t1_blood * modulation, cfg.m0_blood),
        }
    }
}

fn random_motion(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> DisplacementField {
    let (h, w) = (cfg.height, cfg.width);
    let magnitude = rng.random_range(0.0..=1.0) * (cfg.translation_max - cfg.translation_min) + cfg.translation_min;
    let angle = rng.random_range(0.0..TAU);
    let shift = [magnitude * angle.sin(), magnitude * angle.cos()];
    // Two low-frequency sinusoids per component.
    let terms: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.0..TAU),
            ]
        })
        .collect();
    let peak = cfg.deformation * rng.random_range(0.5..=1.0);
    let raw = VectorField::from_fn(h, w, |r, c| {
        let mut v = [0.0; 2];
        for (k, t) in terms.iter().enumerate() {
            let phase = TAU * (t[1] * r as f64 / h as f64 + t[2] * c as f64 / w as f64) + t[3];
            v[k / 2] += t[0] * phase.sin();
        }
        v
    });
    let max = raw.max_norm();
    let scale = if max > 0.0 { peak / max } else { 0.0 };
    VectorField {
        height: h,
        width: w,
        data: raw
            .data
            .iter()
            .map(|d| [shift[0] + scale * d[0], shift[1] + scale * d[1]])
            .collect(),
    }
}

/// Render a phantom scene. Identical `(config, seed)` give identical scenes.
pub fn generate_phantom(config: &PhantomConfig, seed: u64) -> Result<PhantomScene> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let n = config.timestamps.len();
    let anatomy = Anatomy::new(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let truth_motion: Vec<DisplacementField> = (0..n)
        .map(|i| {
            if i == config.reference_index {
                VectorField::zeros(h, w)
            } else {
                random_motion(config, &mut rng)
            }
        })
        .collect();

    let mut t1 = Image::zeros(h, w);
    let mut m0 = Image::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let (a, b) = anatomy.params(config, r as f64, c as f64);
            t1.set(r, c, a);
            m0.set(r, c, b);
        }
    }

    let sigma = config.noise_sigma();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for (i, &t) in config.timestamps.iter().enumerate() {
        let motion = &truth_motion[i];
        let mut frame = Image::zeros(h, w);
        let mut mask = Image::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let d = motion.get(r, c);
                let (y, x) = (r as f64 + d[0], c as f64 + d[1]);
                let (pt1, pm0) = anatomy.params(config, y, x);
                let noise = if sigma > 0.0 { sigma * normal.sample(&mut rng) } else { 0.0 };
                frame.set(r, c, signal(pm0, pt1, t) + noise);
                if anatomy.tissue(y, x) == Tissue::Myocardium {
                    mask.set(r, c, 1.0);
                }
            }
        }
        frames.push(frame);
        masks.push(mask);
    }

    Ok(PhantomScene {
        config: config.clone(),
        seed,
        truth_maps: ParametricMaps { t1, m0 },
        truth_masks: MaskSet { masks },
        truth_motion,
        series: ImageSeries::new(frames, config.timestamps.clone(), config.spacing)?,
    })
}
