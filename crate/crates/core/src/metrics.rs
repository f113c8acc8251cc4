//! Confusion matrices, Dice, exact Euclidean distance transforms and the
//! pixel distance error ε.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::nn::IGNORE;
use crate::raster::Raster;

/// counts[t][p]: pixels with ground truth `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
            total: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            bail!(Shape, "cannot merge {}-class and {}-class matrices", self.classes(), other.classes());
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.total += other.total;
        Ok(())
    }

    pub fn misclassified(&self) -> u64 {
        self.total - (0..self.classes()).map(|c| self.counts[c][c]).sum::<u64>()
    }
}

fn evaluated(gt: u8, ignore: Option<&[bool]>, i: usize) -> bool {
    gt != IGNORE && !ignore.is_some_and(|m| m[i])
}

fn check_pair(pred: &[u8], gt: &[u8], ignore: Option<&[bool]>) -> Result<()> {
    if pred.len() != gt.len() || ignore.is_some_and(|m| m.len() != gt.len()) {
        bail!(Shape, "prediction, ground truth and ignore mask differ in size");
    }
    Ok(())
}

/// Pixels whose ground truth is [`IGNORE`] or whose `ignore` flag is set are
/// excluded.
pub fn confusion_matrix(pred: &[u8], gt: &[u8], ignore: Option<&[bool]>, classes: usize) -> Result<ConfusionMatrix> {
    check_pair(pred, gt, ignore)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (i, (&p, &t)) in pred.iter().zip(gt).enumerate() {
        if !evaluated(t, ignore, i) {
            continue;
        }
        if p as usize >= classes || t as usize >= classes {
            bail!(Invalid, "label {} out of range for {} classes", p.max(t), classes);
        }
        cm.counts[t as usize][p as usize] += 1;
        cm.total += 1;
    }
    Ok(cm)
}

/// Per-class Dice (None for classes absent from both prediction and ground
/// truth) and their mean over the present classes.
pub fn dice(cm: &ConfusionMatrix) -> (Vec<Option<f64>>, f64) {
    let n = cm.classes();
    let per: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let fn_: u64 = cm.counts[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..n).map(|t| cm.counts[t][c]).sum::<u64>() - tp;
            let denom = 2 * tp + fp + fn_;
            (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, mean)
}

/// Squared distance of 1-D lower envelope of parabolas (exact EDT pass).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = if f[v[k]].is_infinite() { f64::INFINITY } else { d * d + f[v[k]] };
    }
}

/// Exact squared Euclidean distance to the nearest `true` pixel.
pub fn squared_distance_transform(mask: &Raster<bool>) -> Result<Raster<f64>> {
    let (h, w) = mask.dims();
    if !mask.data().iter().any(|&b| b) {
        bail!(Invalid, "distance transform of an empty mask is undefined");
    }
    let mut g: Vec<f64> = mask.data().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            g[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&g[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        g[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    Raster::new(h, w, g)
}

pub fn distance_transform(mask: &Raster<bool>) -> Result<Raster<f64>> {
    Ok(squared_distance_transform(mask)?.map(f64::sqrt))
}

/// Sum of squared distances ε_τ and evaluated pixel count A of one image;
/// the building block of [`pixel_distance_error`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceErrorTerms {
    pub eps_tau: f64,
    pub evaluated: u64,
    pub misclassified: u64,
}

impl DistanceErrorTerms {
    /// ε = 100·√ε_τ / A.
    pub fn eps(&self) -> Result<f64> {
        if self.evaluated == 0 {
            bail!(Invalid, "pixel distance error over zero evaluated pixels");
        }
        Ok(100.0 * self.eps_tau.sqrt() / self.evaluated as f64)
    }
}

/// Each misclassified evaluated pixel contributes the squared distance to
/// the nearest evaluated ground-truth pixel of its predicted class, or the
/// squared image diagonal when that class is absent from the ground truth.
pub fn distance_error_terms(
    pred: &Raster<u8>,
    gt: &Raster<u8>,
    ignore: Option<&[bool]>,
) -> Result<DistanceErrorTerms> {
    if pred.dims() != gt.dims() {
        bail!(Shape, "prediction {:?} and ground truth {:?} differ in size", pred.dims(), gt.dims());
    }
    check_pair(pred.data(), gt.data(), ignore)?;
    let (h, w) = gt.dims();
    let diag2 = (h * h + w * w) as f64;
    let mut terms = DistanceErrorTerms::default();
    let mut wrong_by_class: Vec<Vec<usize>> = vec![Vec::new(); 256];
    for i in 0..h * w {
        let t = gt.data()[i];
        if !evaluated(t, ignore, i) {
            continue;
        }
        terms.evaluated += 1;
        let p = pred.data()[i];
        if p != t {
            wrong_by_class[p as usize].push(i);
        }
    }
    for (c, wrong) in wrong_by_class.iter().enumerate() {
        if wrong.is_empty() {
            continue;
        }
        terms.misclassified += wrong.len() as u64;
        let mask = Raster::from_fn(h, w, |y, x| {
            let i = y * w + x;
            gt.data()[i] == c as u8 && evaluated(gt.data()[i], ignore, i)
        });
        if !mask.data().iter().any(|&b| b) {
            terms.eps_tau += diag2 * wrong.len() as f64;
            continue;
        }
        let d2 = squared_distance_transform(&mask)?;
        terms.eps_tau += wrong.iter().map(|&i| d2.data()[i]).sum::<f64>();
    }
    Ok(terms)
}

/// (ε_τ, ε) for one image.
pub fn pixel_distance_error(pred: &Raster<u8>, gt: &Raster<u8>, ignore: Option<&[bool]>) -> Result<(f64, f64)> {
    let t = distance_error_terms(pred, gt, ignore)?;
    Ok((t.eps_tau, t.eps()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub per_class_dice: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub eps_tau: f64,
    pub eps: f64,
    /// Evaluated pixel count A.
    pub evaluated: u64,
    /// Misclassified pixel count N.
    pub misclassified: u64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    /// Mean Dice over a subset of classes (ignoring absent ones).
    pub fn mean_dice_of(&self, classes: &[usize]) -> f64 {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.per_class_dice.get(c).copied().flatten()).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Sums confusion matrices and ε terms over several images before computing
/// the scores.
#[derive(Clone, Debug)]
pub struct EvalAccumulator {
    class_names: Vec<String>,
    cm: ConfusionMatrix,
    terms: DistanceErrorTerms,
}

impl EvalAccumulator {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            class_names,
            cm: ConfusionMatrix::new(n),
            terms: DistanceErrorTerms::default(),
        }
    }

    pub fn add(&mut self, pred: &Raster<u8>, gt: &Raster<u8>, ignore: Option<&[bool]>) -> Result<()> {
        let cm = confusion_matrix(pred.data(), gt.data(), ignore, self.class_names.len())?;
        let t = distance_error_terms(pred, gt, ignore)?;
        self.cm.merge(&cm)?;
        self.terms.eps_tau += t.eps_tau;
        self.terms.evaluated += t.evaluated;
        self.terms.misclassified += t.misclassified;
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        let (per, mean) = dice(&self.cm);
        Ok(EvalReport {
            class_names: self.class_names.clone(),
            per_class_dice: per,
            mean_dice: mean,
            eps_tau: self.terms.eps_tau,
            eps: self.terms.eps()?,
            evaluated: self.terms.evaluated,
            misclassified: self.terms.misclassified,
            confusion: self.cm.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn brute_edt(mask: &Raster<bool>) -> Raster<f64> {
        let (h, w) = mask.dims();
        let pts: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.data()[i]).map(|i| (i / w, i % w)).collect();
        Raster::from_fn(h, w, |y, x| {
            pts.iter()
                .map(|&(py, px)| (py as f64 - y as f64).powi(2) + (px as f64 - x as f64).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
    }

    fn half_grid() -> Raster<u8> {
        Raster::from_fn(4, 4, |_, x| (x >= 2) as u8)
    }

    #[test]
    fn three_four_five() {
        let mut m = Raster::filled(6, 6, false);
        m.set(0, 0, true);
        assert_eq!(distance_transform(&m).unwrap().get(3, 4), 5.0);
        let all = Raster::filled(3, 3, true);
        assert!(distance_transform(&all).unwrap().data().iter().all(|&d| d == 0.0));
        assert!(distance_transform(&Raster::filled(2, 2, false)).is_err());
    }

    #[test]
    fn edt_matches_brute_force_on_random_masks() {
        let mut rng = Rng::new(11);
        for k in 0..50 {
            let density = [0.01, 0.05, 0.2, 0.5][k % 4];
            let mut mask = Raster::from_fn(48, 48, |_, _| rng.bernoulli(density));
            if !mask.data().iter().any(|&b| b) {
                mask.set(7, 9, true);
            }
            assert_eq!(squared_distance_transform(&mask).unwrap(), brute_edt(&mask));
        }
    }

    #[test]
    fn distance_error_hand_cases() {
        let gt = half_grid();
        assert_eq!(pixel_distance_error(&gt, &gt, None).unwrap(), (0.0, 0.0));
        let mut pred = gt.clone();
        pred.set(0, 1, 1);
        assert_eq!(pixel_distance_error(&pred, &gt, None).unwrap(), (1.0, 6.25));
        let mut pred = gt.clone();
        pred.set(0, 0, 1);
        assert_eq!(pixel_distance_error(&pred, &gt, None).unwrap(), (4.0, 12.5));
    }

    #[test]
    fn absent_class_gets_diagonal_cap_and_empty_is_rejected() {
        let gt = half_grid();
        let mut pred = gt.clone();
        pred.set(3, 3, 5);
        let (tau, _) = pixel_distance_error(&pred, &gt, None).unwrap();
        assert_eq!(tau, 32.0);
        let ignore = vec![true; 16];
        assert!(pixel_distance_error(&gt, &gt, Some(&ignore)).is_err());
    }

    #[test]
    fn dice_hand_case() {
        let cm = confusion_matrix(&[0, 1, 1, 1], &[0, 0, 1, 1], None, 2).unwrap();
        let (per, mean) = dice(&cm);
        assert_eq!(per, vec![Some(2.0 / 3.0), Some(4.0 / 5.0)]);
        assert!((mean - 11.0 / 15.0).abs() < 1e-15);
        let cm = confusion_matrix(&[1, 1], &[0, 0], None, 3).unwrap();
        assert_eq!(dice(&cm).0, vec![Some(0.0), Some(0.0), None]);
    }

    #[test]
    fn confusion_respects_ignore() {
        let cm = confusion_matrix(&[0, 1], &[0, 1], Some(&[true, true]), 2).unwrap();
        assert_eq!(cm.total, 0);
        assert!(cm.counts.iter().flatten().all(|&c| c == 0));
        let cm = confusion_matrix(&[0, 1, 1], &[0, IGNORE, 1], None, 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0], vec![0, 1]]);
        assert!(confusion_matrix(&[3], &[0], None, 2).is_err());
    }

    #[test]
    fn confusion_matches_brute_force() {
        let mut rng = Rng::new(2);
        let pred: Vec<u8> = (0..256).map(|_| rng.below(4) as u8).collect();
        let gt: Vec<u8> = (0..256).map(|_| rng.below(4) as u8).collect();
        let cm = confusion_matrix(&pred, &gt, None, 4).unwrap();
        for t in 0..4u8 {
            for p in 0..4u8 {
                let n = pred.iter().zip(&gt).filter(|&(&a, &b)| a == p && b == t).count() as u64;
                assert_eq!(cm.counts[t as usize][p as usize], n);
            }
        }
        assert_eq!(cm.total, 256);
    }

    #[test]
    fn accumulator_equals_merged_matrix() {
        let mut rng = Rng::new(6);
        let a = (Raster::from_fn(8, 8, |_, _| rng.below(3) as u8), Raster::from_fn(8, 8, |_, _| rng.below(3) as u8));
        let b = (Raster::from_fn(8, 8, |_, _| rng.below(3) as u8), Raster::from_fn(8, 8, |_, _| rng.below(3) as u8));
        let names: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let mut acc = EvalAccumulator::new(names);
        acc.add(&a.0, &a.1, None).unwrap();
        acc.add(&b.0, &b.1, None).unwrap();
        let rep = acc.report().unwrap();
        let mut cm = confusion_matrix(a.0.data(), a.1.data(), None, 3).unwrap();
        cm.merge(&confusion_matrix(b.0.data(), b.1.data(), None, 3).unwrap()).unwrap();
        assert_eq!(rep.confusion, cm);
        assert_eq!(rep.mean_dice, dice(&cm).1);
        let ta = distance_error_terms(&a.0, &a.1, None).unwrap();
        let tb = distance_error_terms(&b.0, &b.1, None).unwrap();
        assert_eq!(rep.eps, 100.0 * (ta.eps_tau + tb.eps_tau).sqrt() / 128.0);
        assert_eq!(rep.misclassified, cm.misclassified());
        let json = serde_json::to_string(&rep).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn dice_equals_set_overlap(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let k = 2 + rng.below(4);
            let pred: Vec<u8> = (0..100).map(|_| rng.below(k) as u8).collect();
            let gt: Vec<u8> = (0..100).map(|_| rng.below(k) as u8).collect();
            let (per, _) = dice(&confusion_matrix(&pred, &gt, None, k).unwrap());
            for c in 0..k as u8 {
                let a = pred.iter().filter(|&&p| p == c).count();
                let b = gt.iter().filter(|&&t| t == c).count();
                let both = pred.iter().zip(&gt).filter(|&(&p, &t)| p == c && t == c).count();
                if a + b == 0 {
                    prop_assert_eq!(per[c as usize], None);
                } else {
                    prop_assert!((per[c as usize].unwrap() - 2.0 * both as f64 / (a + b) as f64).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn eps_zero_iff_equal_and_label_permutation_invariant(seed in 0u64..100_000) {
            let mut rng = Rng::new(seed);
            let gt = Raster::from_fn(10, 10, |_, _| rng.below(3) as u8);
            let mut pred = gt.clone();
            let flips = rng.below(4);
            for _ in 0..flips {
                let (y, x) = (rng.below(10), rng.below(10));
                pred.set(y, x, rng.below(3) as u8);
            }
            let (tau, eps) = pixel_distance_error(&pred, &gt, None).unwrap();
            prop_assert_eq!(eps == 0.0, pred == gt);
            let perm = [2u8, 0, 1];
            let (tau2, _) = pixel_distance_error(&pred.map(|v| perm[v as usize]), &gt.map(|v| perm[v as usize]), None).unwrap();
            prop_assert_eq!(tau, tau2);
        }

        #[test]
        fn farther_error_never_costs_less(col in 2usize..12) {
            // gt: class 1 on columns >= 12, class 0 elsewhere; one pixel predicted 1
            let gt = Raster::from_fn(5, 16, |_, x| (x >= 12) as u8);
            let at = |c: usize| {
                let mut p = gt.clone();
                p.set(2, c, 1);
                pixel_distance_error(&p, &gt, None).unwrap().1
            };
            prop_assert!(at(col - 1) >= at(col));
        }
    }
}
