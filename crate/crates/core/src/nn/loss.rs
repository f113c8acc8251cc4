use crate::error::{bail, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Class-weighted softmax cross-entropy over (N, C, h, w) logits.
///
/// `targets` holds one label per (n, y, x) in row-major order; [`IGNORE`]
/// pixels contribute nothing. The loss is the mean over non-ignored pixels
/// of `w[t] * -log softmax(logits)[t]`, and the returned gradient is the
/// exact derivative of that mean.
pub fn softmax_weighted_ce<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    class_weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        bail!(
            Shape,
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        );
    }
    if class_weights.len() != c {
        bail!(Shape, "{} class weights for {} classes", class_weights.len(), c);
    }
    if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE && t as usize >= c) {
        bail!(Invalid, "target label {} out of range for {} classes", bad, c);
    }
    let count = targets.iter().filter(|&&t| t != IGNORE).count();
    let mut grad = vec![T::zero(); logits.len()];
    if count == 0 {
        return Ok((0.0, Tensor::new(logits.shape(), grad)?));
    }
    let inv = 1.0 / count as f64;
    let ld = logits.data();
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; c];
    for i in 0..n {
        for p in 0..hw {
            let t = targets[i * hw + p];
            if t == IGNORE {
                continue;
            }
            let at = |k: usize| (i * c + k) * hw + p;
            let max = (0..c).map(|k| ld[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pr) in probs.iter_mut().enumerate() {
                *pr = (ld[at(k)].as_f64() - max).exp();
                z += *pr;
            }
            let t = t as usize;
            let wt = class_weights[t];
            total += wt * (z.ln() - (ld[at(t)].as_f64() - max));
            for (k, pr) in probs.iter().enumerate() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                grad[at(k)] = T::cast_from(wt * (pr / z - onehot) * inv);
            }
        }
    }
    Ok((total * inv, Tensor::new(logits.shape(), grad)?))
}
