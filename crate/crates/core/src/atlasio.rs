//! Probabilistic atlas maps: landmark affine registration, resampling into
//! section space and training-time input dropout.
//!
//! Coordinates are (row, column) pixel positions on the respective grids.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `[y', x'] = m · [y, x, 1]`, mapping atlas coordinates to section
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform2D {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let t = Self { m };
        if t.det().abs() <= 1e-9 || !m.iter().flatten().all(|v| v.is_finite()) {
            bail!(Invalid, "affine transform is singular or non-finite: {:?}", m);
        }
        Ok(t)
    }

    pub fn translation(dy: f64, dx: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dy], [0.0, 1.0, dx]],
        }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn apply(&self, (y, x): (f64, f64)) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * y + m[0][1] * x + m[0][2], m[1][0] * y + m[1][1] * x + m[1][2])
    }

    pub fn inverse(&self) -> Result<Self> {
        let d = self.det();
        if d.abs() <= 1e-9 {
            bail!(Invalid, "affine transform is singular (det {d})");
        }
        let [[a, b, ty], [c, e, tx]] = self.m;
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Ok(Self {
            m: [[ia, ib, -(ia * ty + ib * tx)], [ic, ie, -(ic * ty + ie * tx)]],
        })
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Self { m }
    }
}

/// Least-squares fit of an affine map from (atlas, section) point pairs.
/// Returns the transform and the residual RMS.
pub fn estimate_affine(pairs: &[((f64, f64), (f64, f64))]) -> Result<(AffineTransform2D, f64)> {
    if pairs.len() < 3 {
        bail!(Invalid, "affine fit needs at least 3 point pairs, got {}", pairs.len());
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&((f64, f64), (f64, f64))) -> f64| pairs.iter().map(f).sum::<f64>() / n;
    let (sy, sx) = (mean(&|p| p.0 .0), mean(&|p| p.0 .1));
    let (dy, dx) = (mean(&|p| p.1 .0), mean(&|p| p.1 .1));
    // centred second moments
    let (mut cyy, mut cyx, mut cxx) = (0.0, 0.0, 0.0);
    let mut cross = [[0.0; 2]; 2]; // cross[out][in]
    for &((ay, ax), (by, bx)) in pairs {
        let (ay, ax, by, bx) = (ay - sy, ax - sx, by - dy, bx - dx);
        cyy += ay * ay;
        cyx += ay * ax;
        cxx += ax * ax;
        cross[0][0] += by * ay;
        cross[0][1] += by * ax;
        cross[1][0] += bx * ay;
        cross[1][1] += bx * ax;
    }
    let det = cyy * cxx - cyx * cyx;
    let scale = (cyy + cxx).max(f64::MIN_POSITIVE);
    if det <= 1e-12 * scale * scale {
        bail!(Invalid, "landmarks are collinear; affine fit is underdetermined");
    }
    let inv = [[cxx / det, -cyx / det], [-cyx / det, cyy / det]];
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        m[r][0] = cross[r][0] * inv[0][0] + cross[r][1] * inv[1][0];
        m[r][1] = cross[r][0] * inv[0][1] + cross[r][1] * inv[1][1];
    }
    m[0][2] = dy - m[0][0] * sy - m[0][1] * sx;
    m[1][2] = dx - m[1][0] * sy - m[1][1] * sx;
    let t = AffineTransform2D::new(m)?;
    let sse: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            let p = t.apply(a);
            (p.0 - b.0).powi(2) + (p.1 - b.1).powi(2)
        })
        .sum();
    Ok((t, (sse / n).sqrt()))
}

/// Per-area probability maps on the atlas grid, shape (areas, h, w).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilisticAtlas {
    pub areas: Vec<String>,
    pub maps: Tensor<f32>,
}

impl ProbabilisticAtlas {
    pub fn new(areas: Vec<String>, maps: Tensor<f32>) -> Result<Self> {
        if maps.shape().len() != 3 || maps.shape()[0] != areas.len() {
            bail!(
                Shape,
                "atlas maps of shape {:?} do not match {} area names",
                maps.shape(),
                areas.len()
            );
        }
        if let Some(v) = maps.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Invalid, "atlas probability {v} outside [0, 1]");
        }
        Ok(Self { areas, maps })
    }
}

/// Bilinear resampling of every channel of `maps` (areas, h, w) onto an
/// `out` grid, where `transform` maps atlas → output coordinates. Samples
/// outside the atlas domain read as 0; results are clamped to [0, 1].
pub fn resample_atlas(maps: &Tensor<f32>, transform: &AffineTransform2D, out: (usize, usize)) -> Result<Tensor<f32>> {
    if maps.shape().len() != 3 {
        bail!(Shape, "atlas maps must be (areas, h, w), got {:?}", maps.shape());
    }
    let (a, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let inv = transform.inverse()?;
    let d = maps.data();
    let mut res = vec![0.0f32; a * out.0 * out.1];
    for y in 0..out.0 {
        for x in 0..out.1 {
            let (sy, sx) = inv.apply((y as f64, x as f64));
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            for c in 0..a {
                let mut v = 0.0f64;
                for &(ty, tx, wgt) in &taps {
                    if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w && wgt != 0.0 {
                        v += wgt * d[(c * h + ty as usize) * w + tx as usize] as f64;
                    }
                }
                res[(c * out.0 + y) * out.1 + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[a, out.0, out.1], res)
}

/// Zeroes each scalar independently with probability `p` (no rescaling).
pub fn atlas_dropout(input: &Tensor<f32>, p: f64, rng: &mut Rng) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&p) {
        bail!(Invalid, "dropout probability {p} outside [0, 1]");
    }
    let mut out = input.clone();
    if p > 0.0 {
        for v in out.data_mut() {
            if rng.bernoulli(p) {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_affine(rng: &mut Rng) -> AffineTransform2D {
        loop {
            let m = [
                [rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0), rng.uniform_range(-20.0, 20.0)],
                [rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0), rng.uniform_range(-20.0, 20.0)],
            ];
            if let Ok(t) = AffineTransform2D::new(m) {
                if t.det().abs() > 0.1 {
                    return t;
                }
            }
        }
    }

    #[test]
    fn identity_and_translation_fits() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (0.0, 7.0), (3.0, 4.0)];
        let id: Vec<_> = pts.iter().map(|&p| (p, p)).collect();
        let (t, rms) = estimate_affine(&id).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((t.m[r][c] - AffineTransform2D::IDENTITY.m[r][c]).abs() < 1e-12);
            }
        }
        assert!(rms < 1e-12);
        let shifted: Vec<_> = pts[..3].iter().map(|&(y, x)| ((y, x), (y + 5.0, x + 7.0))).collect();
        let (t, rms) = estimate_affine(&shifted).unwrap();
        assert!((t.m[0][2] - 5.0).abs() < 1e-12 && (t.m[1][2] - 7.0).abs() < 1e-12);
        assert!((t.m[0][0] - 1.0).abs() < 1e-12 && t.m[0][1].abs() < 1e-12);
        assert!(rms < 1e-12);
    }

    #[test]
    fn random_affine_recovered_from_six_points() {
        let mut rng = Rng::new(8);
        for _ in 0..50 {
            let t = random_affine(&mut rng);
            let pairs: Vec<_> = (0..6)
                .map(|_| {
                    let a = (rng.uniform_range(0.0, 100.0), rng.uniform_range(0.0, 100.0));
                    (a, t.apply(a))
                })
                .collect();
            let (fit, rms) = estimate_affine(&pairs).unwrap();
            for r in 0..2 {
                for c in 0..3 {
                    assert!((fit.m[r][c] - t.m[r][c]).abs() < 1e-8, "{:?} vs {:?}", fit, t);
                }
            }
            assert!(rms < 1e-8);
        }
    }

    #[test]
    fn degenerate_landmarks_rejected() {
        let col: Vec<_> = (0..5).map(|i| ((i as f64, 2.0 * i as f64), (0.0, 0.0))).collect();
        assert!(estimate_affine(&col).is_err());
        assert!(estimate_affine(&col[..2]).is_err());
        assert!(AffineTransform2D::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]).is_err());
    }

    #[test]
    fn inverse_and_compose() {
        let mut rng = Rng::new(3);
        let t = random_affine(&mut rng);
        let id = t.compose(&t.inverse().unwrap());
        for r in 0..2 {
            for c in 0..3 {
                assert!((id.m[r][c] - AffineTransform2D::IDENTITY.m[r][c]).abs() < 1e-9);
            }
        }
        let p = (3.5, -2.0);
        let s = AffineTransform2D::translation(1.0, 2.0);
        let q = s.compose(&t).apply(p);
        let r = s.apply(t.apply(p));
        assert!((q.0 - r.0).abs() < 1e-12 && (q.1 - r.1).abs() < 1e-12);
    }

    #[test]
    fn resample_identity_and_constant() {
        let mut rng = Rng::new(4);
        let maps = Tensor::from_fn(&[2, 5, 6], |_| rng.uniform() as f32);
        let same = resample_atlas(&maps, &AffineTransform2D::IDENTITY, (5, 6)).unwrap();
        assert_eq!(same, maps);
        let constant = Tensor::full(&[1, 40, 40], 0.7f32);
        let t = AffineTransform2D::new([[0.9, 0.2, 3.0], [-0.1, 1.1, 2.0]]).unwrap();
        let out = resample_atlas(&constant, &t, (30, 30)).unwrap();
        let inv = t.inverse().unwrap();
        let mut inside = 0;
        for y in 0..30 {
            for x in 0..30 {
                let (sy, sx) = inv.apply((y as f64, x as f64));
                if (0.0..=39.0).contains(&sy) && (0.0..=39.0).contains(&sx) {
                    inside += 1;
                    assert!((out.data()[y * 30 + x] - 0.7).abs() < 1e-6);
                }
            }
        }
        assert!(inside > 400);
    }

    #[test]
    fn shifted_step_matches_bilinear_oracle() {
        let (h, w) = (8, 12);
        let maps = Tensor::from_fn(&[1, h, w], |i| if i % w >= 5 { 1.0 } else { 0.0 });
        let t = AffineTransform2D::translation(0.0, 2.5);
        let out = resample_atlas(&maps, &t, (h, w)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 - 2.5;
                let val = |xx: isize| {
                    if xx < 0 || xx >= w as isize {
                        0.0
                    } else if xx >= 5 {
                        1.0
                    } else {
                        0.0
                    }
                };
                let x0 = sx.floor();
                let f = sx - x0;
                let expect = (1.0 - f) * val(x0 as isize) + f * val(x0 as isize + 1);
                assert!((out.data()[y * w + x] as f64 - expect).abs() < 1e-6, "{y} {x}");
            }
        }
    }

    #[test]
    fn dropout_extremes_and_rate() {
        let x = Tensor::full(&[1000, 1000], 1.0f32);
        let mut rng = Rng::new(1);
        assert_eq!(atlas_dropout(&x, 0.0, &mut rng).unwrap(), x);
        assert!(atlas_dropout(&x, 1.0, &mut rng).unwrap().data().iter().all(|&v| v == 0.0));
        let d = atlas_dropout(&x, 0.2, &mut rng).unwrap();
        let zeros = d.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((0.19..=0.21).contains(&zeros), "{zeros}");
        assert!(d.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let a = atlas_dropout(&x, 0.2, &mut Rng::new(9)).unwrap();
        let b = atlas_dropout(&x, 0.2, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(atlas_dropout(&x, 1.5, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn refit_on_own_landmarks_is_exact(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let t = random_affine(&mut rng);
            let noisy: Vec<_> = (0..8)
                .map(|_| {
                    let a = (rng.uniform_range(0.0, 50.0), rng.uniform_range(0.0, 50.0));
                    let b = t.apply(a);
                    (a, (b.0 + rng.normal(), b.1 + rng.normal()))
                })
                .collect();
            let (fit, _) = estimate_affine(&noisy).unwrap();
            let again: Vec<_> = noisy.iter().map(|&(a, _)| (a, fit.apply(a))).collect();
            let (refit, rms) = estimate_affine(&again).unwrap();
            prop_assert!(rms < 1e-8);
            for r in 0..2 {
                for c in 0..3 {
                    prop_assert!((refit.m[r][c] - fit.m[r][c]).abs() < 1e-7);
                }
            }
        }

        #[test]
        fn resample_stays_in_unit_range(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let maps = Tensor::from_fn(&[2, 9, 9], |_| rng.uniform() as f32);
            let t = random_affine(&mut rng);
            let out = resample_atlas(&maps, &t, (11, 7)).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
