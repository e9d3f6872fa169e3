//! Stationary velocity fields, scaling-and-squaring integration, backward
//! warping and Jacobian diagnostics.
//!
//! Coordinates are (row, col) in voxel units. A displacement `u` is a
//! backward map: the warped image at `p` samples the source at `p + u(p)`.
//! Sampling is bilinear with clamp-to-edge boundaries everywhere.

use crate::datamodel::{DisplacementField, Image, VectorField, VelocityField};
use crate::par;

/// Bilinear interpolation stencil at one continuous location.
///
/// `dy`/`dx` hold the derivative of each corner weight with respect to the
/// sampling coordinate; they vanish along an axis where the location was
/// clamped, matching the flat extension outside the grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dy: [f64; 4],
    pub dx: [f64; 4],
}

#[inline]
fn axis(n: usize, q: f64) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let last = (n - 1) as f64;
    let (qc, inside) = if q <= 0.0 {
        (0.0, false)
    } else if q >= last {
        (last, false)
    } else {
        (q, true)
    };
    let i0 = (qc.floor() as usize).min(n - 2);
    (i0, i0 + 1, qc - i0 as f64, inside)
}

impl Stencil {
    #[inline]
    pub fn new(height: usize, width: usize, y: f64, x: f64) -> Self {
        let (y0, y1, fy, iny) = axis(height, y);
        let (x0, x1, fx, inx) = axis(width, x);
        let (gy, gx) = (1.0 - fy, 1.0 - fx);
        let sy = if iny { 1.0 } else { 0.0 };
        let sx = if inx { 1.0 } else { 0.0 };
        Self {
            idx: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            w: [gy * gx, gy * fx, fy * gx, fy * fx],
            dy: [-sy * gx, -sy * fx, sy * gx, sy * fx],
            dx: [-sx * gy, sx * gy, -sx * fy, sx * fy],
        }
    }

    #[inline]
    pub fn apply(&self, data: &[f64]) -> f64 {
        self.w[0] * data[self.idx[0]]
            + self.w[1] * data[self.idx[1]]
            + self.w[2] * data[self.idx[2]]
            + self.w[3] * data[self.idx[3]]
    }

    /// Spatial gradient (d/drow, d/dcol) of the interpolant.
    #[inline]
    pub fn gradient(&self, data: &[f64]) -> (f64, f64) {
        let mut gy = 0.0;
        let mut gx = 0.0;
        for k in 0..4 {
            let v = data[self.idx[k]];
            gy += self.dy[k] * v;
            gx += self.dx[k] * v;
        }
        (gy, gx)
    }

    #[inline]
    pub fn apply_vec(&self, data: &[[f64; 2]]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for k in 0..4 {
            let v = data[self.idx[k]];
            out[0] += self.w[k] * v[0];
            out[1] += self.w[k] * v[1];
        }
        out
    }

    /// Jacobian of the vector interpolant: `[[da0/dy, da0/dx], [da1/dy, da1/dx]]`.
    #[inline]
    pub fn gradient_vec(&self, data: &[[f64; 2]]) -> [[f64; 2]; 2] {
        let mut g = [[0.0; 2]; 2];
        for k in 0..4 {
            let v = data[self.idx[k]];
            for c in 0..2 {
                g[c][0] += self.dy[k] * v[c];
                g[c][1] += self.dx[k] * v[c];
            }
        }
        g
    }
}

/// Bilinear sample of `image` at a continuous (row, col) location.
pub fn sample(image: &Image, y: f64, x: f64) -> f64 {
    Stencil::new(image.height, image.width, y, x).apply(&image.data)
}

fn assert_same_shape(a: (usize, usize), b: (usize, usize)) {
    assert_eq!(a, b, "field and image shapes differ");
}

/// Backward warp: `out(p) = image(p + u(p))`.
pub fn warp(image: &Image, u: &DisplacementField) -> Image {
    warp_with(image, u, true)
}

pub(crate) fn warp_with(image: &Image, u: &DisplacementField, parallel: bool) -> Image {
    assert_same_shape(image.shape(), u.shape());
    let (h, w) = image.shape();
    let mut out = vec![0.0; h * w];
    par::for_each_row(&mut out, w, parallel, |r, row| {
        for (c, o) in row.iter_mut().enumerate() {
            let d = u.data[r * w + c];
            *o = Stencil::new(h, w, r as f64 + d[0], c as f64 + d[1]).apply(&image.data);
        }
    });
    Image {
        height: h,
        width: w,
        data: out,
    }
}

/// Composition `(a ∘ b)(p) = b(p) + a(p + b(p))`.
pub fn compose(a: &DisplacementField, b: &DisplacementField) -> DisplacementField {
    compose_with(a, b, true)
}

pub(crate) fn compose_with(a: &DisplacementField, b: &DisplacementField, parallel: bool) -> DisplacementField {
    assert_same_shape(a.shape(), b.shape());
    let (h, w) = a.shape();
    let mut out = vec![[0.0; 2]; h * w];
    par::for_each_row(&mut out, w, parallel, |r, row| {
        for (c, o) in row.iter_mut().enumerate() {
            let d = b.data[r * w + c];
            let s = Stencil::new(h, w, r as f64 + d[0], c as f64 + d[1]).apply_vec(&a.data);
            *o = [d[0] + s[0], d[1] + s[1]];
        }
    });
    VectorField {
        height: h,
        width: w,
        data: out,
    }
}

/// Exponential map of a stationary velocity field by scaling and squaring:
/// `u ← v / 2^steps`, then `u ← u ∘ u` repeated `steps` times.
pub fn integrate_velocity(v: &VelocityField, steps: u32) -> DisplacementField {
    integrate_history(v, steps, true)
        .pop()
        .expect("history holds at least the scaled field")
}

/// All intermediate fields `u_0 … u_steps` of the squaring recursion.
pub(crate) fn integrate_history(v: &VelocityField, steps: u32, parallel: bool) -> Vec<DisplacementField> {
    assert!(steps >= 1, "integration needs at least one squaring step");
    let mut history = Vec::with_capacity(steps as usize + 1);
    history.push(v.scaled(0.5f64.powi(steps as i32)));
    for _ in 0..steps {
        let last = history.last().unwrap();
        let next = compose_with(last, last, parallel);
        history.push(next);
    }
    history
}

/// Accumulate `∂L/∂u` for `R = warp(image, u)` given `∂L/∂R`.
pub(crate) fn warp_backward(image: &Image, u: &DisplacementField, grad_out: &[f64], grad_u: &mut [[f64; 2]]) {
    let (h, w) = image.shape();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let g = grad_out[i];
            if g == 0.0 {
                continue;
            }
            let d = u.data[i];
            let (gy, gx) = Stencil::new(h, w, r as f64 + d[0], c as f64 + d[1]).gradient(&image.data);
            grad_u[i][0] += g * gy;
            grad_u[i][1] += g * gx;
        }
    }
}

/// Back-propagate `∂L/∂u_{k+1}` through `u_{k+1} = u_k ∘ u_k`.
fn square_backward(u: &DisplacementField, grad_next: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let (h, w) = u.shape();
    let mut grad = grad_next.to_vec();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let g = grad_next[i];
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let d = u.data[i];
            let st = Stencil::new(h, w, r as f64 + d[0], c as f64 + d[1]);
            // Sampled values: scatter to the four corners.
            for k in 0..4 {
                let j = st.idx[k];
                grad[j][0] += st.w[k] * g[0];
                grad[j][1] += st.w[k] * g[1];
            }
            // Sampling location depends on u(p).
            let jac = st.gradient_vec(&u.data);
            grad[i][0] += g[0] * jac[0][0] + g[1] * jac[1][0];
            grad[i][1] += g[0] * jac[0][1] + g[1] * jac[1][1];
        }
    }
    grad
}

/// Gradient with respect to the velocity field given the gradient with
/// respect to the integrated displacement.
pub(crate) fn integrate_backward(history: &[DisplacementField], grad_final: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let steps = history.len() - 1;
    let mut grad = grad_final;
    for k in (0..steps).rev() {
        grad = square_backward(&history[k], &grad);
    }
    let s = 0.5f64.powi(steps as i32);
    grad.iter().map(|g| [g[0] * s, g[1] * s]).collect()
}

/// `det(I + ∇u)` per voxel; central differences inside, one-sided at edges.
pub fn jacobian_determinant(u: &DisplacementField) -> Image {
    let (h, w) = u.shape();
    let d = |r: usize, c: usize, along_rows: bool, comp: usize| -> f64 {
        let (n, i) = if along_rows { (h, r) } else { (w, c) };
        if n < 2 {
            return 0.0;
        }
        let at = |k: usize| {
            if along_rows {
                u.get(k, c)[comp]
            } else {
                u.get(r, k)[comp]
            }
        };
        if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            0.5 * (at(i + 1) - at(i - 1))
        }
    };
    Image::from_fn(h, w, |r, c| {
        let a = 1.0 + d(r, c, true, 0);
        let b = d(r, c, false, 0);
        let cc = d(r, c, true, 1);
        let dd = 1.0 + d(r, c, false, 1);
        a * dd - b * cc
    })
}

/// Fraction of interior voxels (excluding a one-voxel border) with a
/// strictly positive Jacobian determinant.
pub fn positive_jacobian_fraction(u: &DisplacementField) -> f64 {
    let det = jacobian_determinant(u);
    let (h, w) = det.shape();
    if h < 3 || w < 3 {
        return 1.0;
    }
    let mut pos = 0usize;
    let mut total = 0usize;
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            total += 1;
            if det.get(r, c) > 0.0 {
                pos += 1;
            }
        }
    }
    pos as f64 / total as f64
}
