//! Laplace field across the cortical ribbon and patch orientation
//! normalisation.
//!
//! Segmentation masks use the tissue codes [`GM`], [`WM`], [`BG`]. The field
//! is 0 on the outer (background-facing) boundary and 1 on the inner
//! (white-matter-facing) one. Orientation correction rotates patches so that
//! the field gradient, which points from outer to inner, points up in the
//! output (towards row 0).

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{bail, Error, Result};
use crate::raster::Raster;

pub const GM: u8 = 0;
pub const WM: u8 = 1;
pub const BG: u8 = 2;

/// Angle of "up" in image coordinates (x right, y down): `atan2(dy, dx)`
/// of the vector (dy, dx) = (−1, 0).
pub const UP: f64 = -FRAC_PI_2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceOptions {
    /// Over-relaxation factor; 1.0 is Gauss–Seidel.
    pub omega: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Plain Jacobi sweeps instead of in-place relaxation (reference only).
    pub jacobi: bool,
    pub outer_value: f64,
    pub inner_value: f64,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self {
            omega: 1.9,
            tol: 1e-6,
            max_iter: 20_000,
            jacobi: false,
            outer_value: 0.0,
            inner_value: 1.0,
        }
    }
}

/// Field on the gray-matter domain; NaN elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Raster<f64>,
    pub iterations: usize,
    /// Largest update of the final sweep.
    pub residual: f64,
}

impl ScalarField {
    pub fn in_domain(&self, y: usize, x: usize) -> bool {
        self.values.get(y, x).is_finite()
    }
}

/// Per-pixel gradient (dy, dx); NaN outside the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub dy: Raster<f64>,
    pub dx: Raster<f64>,
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// SOR relaxation of the 5-point Laplacian over gm pixels. The boundary
/// values sit on the pixel faces shared with bg (`outer_value`) and wm
/// (`inner_value`), half a pixel from the gm pixel centre. Image borders are
/// reflecting. Gm components touching neither bg nor wm are left out of the
/// domain.
pub fn solve_laplace(mask: &Raster<u8>, opts: &LaplaceOptions) -> Result<ScalarField> {
    solve_laplace_subpixel(mask, opts, |_, _| 0.5)
}

/// [`solve_laplace`] with a known boundary: `crossing(p, q)` is the fraction
/// of the way from gm pixel `p` to its bg/wm neighbour `q` at which the
/// boundary lies (Shortley–Weller weights; clamped to [0.05, 1]).
pub fn solve_laplace_subpixel(
    mask: &Raster<u8>,
    opts: &LaplaceOptions,
    crossing: impl Fn((usize, usize), (usize, usize)) -> f64,
) -> Result<ScalarField> {
    let (h, w) = mask.dims();
    let n = h * w;
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        bail!(Invalid, "tolerance and iteration budget must be positive");
    }
    if !(opts.omega > 0.0 && opts.omega < 2.0) {
        bail!(Invalid, "relaxation factor {} outside (0, 2)", opts.omega);
    }
    let is_gm = |i: usize| mask.data()[i] == GM;
    let boundary_value = |v: Option<u8>| match v {
        Some(BG) => Some(opts.outer_value),
        Some(WM) => Some(opts.inner_value),
        _ => None,
    };

    // Keep only components that touch a boundary.
    let mut domain = vec![false; n];
    let mut stack = Vec::new();
    let mut seen = vec![false; n];
    for start in 0..n {
        if !is_gm(start) || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut anchored = false;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for (dy, dx) in NEIGHBORS {
                match mask.at(y + dy, x + dx) {
                    Some(GM) => {
                        let j = (y + dy) as usize * w + (x + dx) as usize;
                        if !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                    Some(_) => anchored = true,
                    None => {}
                }
            }
        }
        if anchored {
            for i in comp {
                domain[i] = true;
            }
        }
    }
    if !domain.iter().any(|&d| d) {
        bail!(Invalid, "Laplace domain is empty: no gray-matter pixel touches bg or wm");
    }

    // Per pixel: u = (Σ c_j u_j + b) / d.
    struct Row {
        i: usize,
        nb: [(usize, f64); 4],
        k: usize,
        b: f64,
        d: f64,
    }
    let mut rows = Vec::new();
    let mut u = vec![f64::NAN; n];
    for i in (0..n).filter(|&i| domain[i]) {
        u[i] = 0.5 * (opts.outer_value + opts.inner_value);
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let mut row = Row { i, nb: [(0, 0.0); 4], k: 0, b: 0.0, d: 0.0 };
        for axis in [[(-1isize, 0isize), (1, 0)], [(0, -1), (0, 1)]] {
            let side = |(dy, dx): (isize, isize)| {
                let v = mask.at(y + dy, x + dx);
                let j = v.map(|_| (y + dy) as usize * w + (x + dx) as usize);
                (v, j, boundary_value(v))
            };
            let (l, r) = (side(axis[0]), side(axis[1]));
            let dist = |(_, j, g): (Option<u8>, Option<usize>, Option<f64>)| match g {
                Some(_) => {
                    let j = j.expect("in raster");
                    crossing((i / w, i % w), (j / w, j % w)).clamp(0.05, 1.0)
                }
                None => 1.0,
            };
            let (hl, hr) = (dist(l), dist(r));
            let f = 2.0 / (hl * hr * (hl + hr));
            row.d += f * (hl + hr);
            for ((v, j, g), coef) in [(l, f * hr), (r, f * hl)] {
                match (v, g) {
                    (None, _) => row.d -= coef, // mirrored: ghost equals u itself
                    (Some(_), Some(g)) => row.b += coef * g,
                    (Some(_), None) => {
                        row.nb[row.k] = (j.expect("in raster"), coef);
                        row.k += 1;
                    }
                }
            }
        }
        rows.push(row);
    }

    let mut residual = 0.0;
    let mut scratch = if opts.jacobi { u.clone() } else { Vec::new() };
    for iter in 1..=opts.max_iter {
        residual = 0.0f64;
        if opts.jacobi {
            for r in &rows {
                let v = (r.nb[..r.k].iter().map(|&(j, c)| c * u[j]).sum::<f64>() + r.b) / r.d;
                residual = residual.max((v - u[r.i]).abs());
                scratch[r.i] = v;
            }
            std::mem::swap(&mut u, &mut scratch);
            for r in &rows {
                scratch[r.i] = u[r.i];
            }
        } else {
            for r in &rows {
                let v = (r.nb[..r.k].iter().map(|&(j, c)| c * u[j]).sum::<f64>() + r.b) / r.d;
                let delta = opts.omega * (v - u[r.i]);
                residual = residual.max(delta.abs());
                u[r.i] += delta;
            }
        }
        if residual < opts.tol {
            return Ok(ScalarField {
                values: Raster::new(h, w, u)?,
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Fraction `t ∈ [0, 1]` along the segment p → q (pixel centres) where it
/// crosses the circle of `radius` about `center`; for use as the crossing
/// function of [`solve_laplace_subpixel`] on circular boundaries.
pub fn circle_crossing(center: (f64, f64), radius: f64, p: (usize, usize), q: (usize, usize)) -> Option<f64> {
    let (dy, dx) = (p.0 as f64 - center.0, p.1 as f64 - center.1);
    let (ey, ex) = (q.0 as f64 - p.0 as f64, q.1 as f64 - p.1 as f64);
    let a = ey * ey + ex * ex;
    let b = dy * ey + dx * ex;
    let disc = b * b - a * (dy * dy + dx * dx - radius * radius);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| (0.0..=1.0).contains(t))
}

/// Central differences where both neighbours are in the domain, one-sided
/// where only one is, zero for isolated pixels.
pub fn gradient(field: &ScalarField) -> VectorField {
    let v = &field.values;
    let (h, w) = v.dims();
    let val = |y: isize, x: isize| v.at(y, x).filter(|u| u.is_finite());
    let diff = |y: usize, x: usize, dy: isize, dx: isize| -> f64 {
        let (y, x) = (y as isize, x as isize);
        let c = v.get(y as usize, x as usize);
        match (val(y - dy, x - dx), val(y + dy, x + dx)) {
            (Some(a), Some(b)) => 0.5 * (b - a),
            (None, Some(b)) => b - c,
            (Some(a), None) => c - a,
            (None, None) => 0.0,
        }
    };
    let mut dy = Raster::filled(h, w, f64::NAN);
    let mut dx = Raster::filled(h, w, f64::NAN);
    for y in 0..h {
        for x in 0..w {
            if v.get(y, x).is_finite() {
                dy.set(y, x, diff(y, x, 1, 0));
                dx.set(y, x, diff(y, x, 0, 1));
            }
        }
    }
    VectorField { dy, dx }
}

/// Circular mean of unit gradients inside the `h`×`w` window at (y0, x0)
/// (clipped to the raster), as `atan2(dy, dx)` in (−π, π].
pub fn dominant_orientation(vf: &VectorField, y0: isize, x0: isize, h: usize, w: usize) -> Result<f64> {
    circular_mean(vf, y0, x0, h, w, |_, _| true)
}

/// Like [`dominant_orientation`] over the pixels within `radius` of
/// `center`. Unlike a square window, the disc covers the same tissue after
/// the section is rotated about its centre.
pub fn dominant_orientation_disc(vf: &VectorField, center: (f64, f64), radius: f64) -> Result<f64> {
    let (y0, x0) = ((center.0 - radius).floor() as isize, (center.1 - radius).floor() as isize);
    let side = (2.0 * radius).ceil() as usize + 2;
    circular_mean(vf, y0, x0, side, side, |y, x| (y as f64 - center.0).hypot(x as f64 - center.1) <= radius)
}

fn circular_mean(vf: &VectorField, y0: isize, x0: isize, h: usize, w: usize, keep: impl Fn(usize, usize) -> bool) -> Result<f64> {
    let (rh, rw) = vf.dy.dims();
    let (ys, xs) = (y0.max(0) as usize, x0.max(0) as usize);
    let ye = ((y0 + h as isize).max(0) as usize).min(rh);
    let xe = ((x0 + w as isize).max(0) as usize).min(rw);
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    for y in ys..ye {
        for x in xs..xe {
            let (gy, gx) = (vf.dy.get(y, x), vf.dx.get(y, x));
            let norm = gy.hypot(gx);
            if norm.is_finite() && norm > 0.0 && keep(y, x) {
                sy += gy / norm;
                sx += gx / norm;
            }
        }
    }
    if sy.hypot(sx) < 1e-12 {
        return Err(Error::OrientationUndefined);
    }
    let a = sy.atan2(sx);
    Ok(if a <= -PI { PI } else { a })
}

/// Rotation (radians) to pass to the `rotate_*` samplers so that the
/// direction `orientation` ends up pointing up.
pub fn correction_angle(orientation: f64) -> f64 {
    orientation - UP
}

/// Source coordinate of output pixel (y, x) for a rotation by `angle`
/// about `center` (source coordinates, pixel centers at integers).
#[inline]
pub fn rotated_source(center: (f64, f64), out: (usize, usize), y: usize, x: usize, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let oy = y as f64 - (out.0 as f64 - 1.0) / 2.0;
    let ox = x as f64 - (out.1 as f64 - 1.0) / 2.0;
    (center.0 + s * ox + c * oy, center.1 + c * ox - s * oy)
}

/// Inverse of [`rotated_source`]: output coordinates of a source point.
#[inline]
pub fn rotated_target(center: (f64, f64), out: (usize, usize), sy: f64, sx: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (dy, dx) = (sy - center.0, sx - center.1);
    let ox = c * dx + s * dy;
    let oy = -s * dx + c * dy;
    (oy + (out.0 as f64 - 1.0) / 2.0, ox + (out.1 as f64 - 1.0) / 2.0)
}

/// Bilinear rotated resampling of an intensity image.
pub fn rotate_bilinear(src: &Raster<f32>, center: (f64, f64), angle: f64, out: (usize, usize), fill: f32) -> Raster<f32> {
    Raster::from_fn(out.0, out.1, |y, x| {
        let (sy, sx) = rotated_source(center, out, y, x, angle);
        src.bilinear(sy, sx, fill)
    })
}

/// Nearest-neighbour rotated resampling for labels and atlas maps.
pub fn rotate_nearest<T: Copy>(src: &Raster<T>, center: (f64, f64), angle: f64, out: (usize, usize), fill: T) -> Raster<T> {
    Raster::from_fn(out.0, out.1, |y, x| {
        let (sy, sx) = rotated_source(center, out, y, x, angle);
        src.at(sy.round() as isize, sx.round() as isize).unwrap_or(fill)
    })
}

/// Side of the enlarged crop that any rotation of a `side` patch fits in.
pub fn enlarged_side(side: usize) -> usize {
    (side as f64 * std::f64::consts::SQRT_2).ceil() as usize
}

/// Renders the field as a blue→red colour ramp (grey outside the domain).
pub fn field_to_rgb(field: &ScalarField) -> Raster<[u8; 3]> {
    field.values.map(|v| {
        if v.is_finite() {
            let t = v.clamp(0.0, 1.0);
            [(255.0 * t) as u8, (80.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8]
        } else {
            [128, 128, 128]
        }
    })
}

/// Colour-codes the local gradient direction (hue = angle).
pub fn orientation_to_rgb(vf: &VectorField) -> Raster<[u8; 3]> {
    Raster::from_fn(vf.dy.height(), vf.dy.width(), |y, x| {
        let (gy, gx) = (vf.dy.get(y, x), vf.dx.get(y, x));
        if !(gy.is_finite() && gx.is_finite()) || gy.hypot(gx) == 0.0 {
            return [128, 128, 128];
        }
        let a = gy.atan2(gx);
        let ch = |phase: f64| (127.5 * (1.0 + (a + phase).cos())) as u8;
        [ch(0.0), ch(2.0 * PI / 3.0), ch(4.0 * PI / 3.0)]
    })
}
