//! Resolution pyramid for the coarse-to-fine optimizer.

use crate::datamodel::{Image, ImageSeries, MaskSet, VectorField};
use crate::deformation::Stencil;

/// Halve resolution by averaging 2×2 blocks (partial blocks at odd edges).
pub fn downsample(image: &Image) -> Image {
    let (h, w) = image.shape();
    let (ch, cw) = (h.div_ceil(2), w.div_ceil(2));
    Image::from_fn(ch, cw, |r, c| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for rr in 2 * r..(2 * r + 2).min(h) {
            for cc in 2 * c..(2 * c + 2).min(w) {
                sum += image.get(rr, cc);
                n += 1.0;
            }
        }
        sum / n
    })
}

pub fn downsample_series(series: &ImageSeries) -> ImageSeries {
    let mut out = series.with_frames(series.frames.iter().map(downsample).collect());
    out.spacing = (series.spacing.0 * 2.0, series.spacing.1 * 2.0);
    out
}

/// Downsampled masks are fractional (partial-volume occupancy).
pub fn downsample_masks(masks: &MaskSet) -> MaskSet {
    MaskSet {
        masks: masks.masks.iter().map(downsample).collect(),
    }
}

/// Resample a coarse field onto a finer grid and rescale it to fine voxel
/// units. Fine voxel `y` sits at coarse coordinate `(y − 0.5) / 2`.
pub fn upsample_field(v: &VectorField, height: usize, width: usize) -> VectorField {
    let sy = v.height as f64 / height as f64;
    let sx = v.width as f64 / width as f64;
    VectorField::from_fn(height, width, |r, c| {
        let y = (r as f64 + 0.5) * sy - 0.5;
        let x = (c as f64 + 0.5) * sx - 0.5;
        let s = Stencil::new(v.height, v.width, y, x).apply_vec(&v.data);
        [s[0] / sy, s[1] / sx]
    })
}

/// Number of levels (finest included) whose smallest side stays ≥ `min_side`.
pub fn usable_levels(shape: (usize, usize), requested: usize, min_side: usize) -> usize {
    let mut levels = 1;
    let mut side = shape.0.min(shape.1);
    while levels < requested && side.div_ceil(2) >= min_side {
        side = side.div_ceil(2);
        levels += 1;
    }
    levels
}
