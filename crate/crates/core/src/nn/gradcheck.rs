//! Central-difference gradient verification in 64-bit arithmetic.

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic[i]` against central differences of `loss` with respect
/// to `inputs[i]`, at up to `samples` random coordinates per tensor (all of
/// them when the tensor is smaller).
pub fn grad_check<F>(
    inputs: &mut [Tensor<f64>],
    analytic: &[Vec<f64>],
    mut loss: F,
    samples: usize,
    step: f64,
    rng: &mut Rng,
) -> GradCheckReport
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for ti in 0..inputs.len() {
        let len = inputs[ti].len();
        let coords: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|_| rng.below(len)).collect()
        };
        for j in coords {
            let orig = inputs[ti].data()[j];
            inputs[ti].data_mut()[j] = orig + step;
            let plus = loss(inputs);
            inputs[ti].data_mut()[j] = orig - step;
            let minus = loss(inputs);
            inputs[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[ti][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, j));
            }
        }
    }
    report
}

/// Which single layer to check with [`check_layer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Convolution with the given kernel size, stride and padding.
    Conv { k: usize, stride: usize, pad: usize },
    Upsample2,
    MaxPool2,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Concat,
}

fn build_layer(tape: &mut Tape<f64>, kind: LayerKind, ts: &[Tensor<f64>], stats: &(Vec<f64>, Vec<f64>)) -> Result<(Vec<Var>, Var)> {
    let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = match kind {
        LayerKind::Conv { stride, pad, .. } => tape.conv2d(vars[0], vars[1], vars[2], stride, pad)?,
        LayerKind::Upsample2 => tape.upsample2(vars[0], vars[1], vars[2])?,
        LayerKind::MaxPool2 => tape.maxpool2(vars[0])?,
        LayerKind::BatchNormTrain => tape.batchnorm_train(vars[0], vars[1], vars[2], 1e-5)?.0,
        LayerKind::BatchNormEval => tape.batchnorm_eval(vars[0], vars[1], vars[2], &stats.0, &stats.1, 1e-5)?,
        LayerKind::Relu => tape.relu(vars[0]),
        LayerKind::Concat => tape.concat(vars[0], vars[1])?,
    };
    Ok((vars, y))
}

/// Gradient check of one layer under the loss `sum(y * r)` for a random
/// projection `r`. Every input and parameter tensor is checked.
pub fn check_layer(kind: LayerKind, seed: u64, samples: usize) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let normal = |shape: &[usize], rng: &mut Rng| Tensor::<f64>::from_fn(shape, |_| rng.normal());
    let (n, c, h, w) = (2, 3, 6, 6);
    let mut inputs: Vec<Tensor<f64>> = match kind {
        LayerKind::Conv { k, .. } => vec![
            normal(&[n, c, h, w], &mut rng),
            normal(&[4, c, k, k], &mut rng),
            normal(&[4], &mut rng),
        ],
        LayerKind::Upsample2 => vec![
            normal(&[n, c, 3, 3], &mut rng),
            normal(&[c, 2, 2, 2], &mut rng),
            normal(&[2], &mut rng),
        ],
        LayerKind::BatchNormTrain | LayerKind::BatchNormEval => vec![
            normal(&[n, c, 4, 4], &mut rng),
            Tensor::from_fn(&[c], |_| 1.0 + 0.3 * rng.normal()),
            normal(&[c], &mut rng),
        ],
        LayerKind::Concat => vec![normal(&[n, 2, 3, 3], &mut rng), normal(&[n, 1, 3, 3], &mut rng)],
        LayerKind::MaxPool2 | LayerKind::Relu => vec![normal(&[n, c, h, w], &mut rng)],
    };
    let stats = (
        (0..c).map(|_| 0.2 * rng.normal()).collect::<Vec<_>>(),
        (0..c).map(|_| 0.5 + rng.uniform()).collect::<Vec<_>>(),
    );
    if kind == LayerKind::Relu {
        // keep coordinates away from the kink so central differences are valid
        for v in inputs[0].data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
    }

    let mut tape = Tape::new();
    let (vars, y) = build_layer(&mut tape, kind, &inputs, &stats)?;
    let proj: Vec<f64> = (0..tape.value(y).len()).map(|_| rng.normal()).collect();
    let grads = tape.backward(y, &proj)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v).unwrap_or(&[]).to_vec()).collect();

    let loss = |ts: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let (_, y) = build_layer(&mut tape, kind, ts, &stats).expect("layer rebuild");
        tape.value(y).data().iter().zip(&proj).map(|(a, b)| a * b).sum::<f64>()
    };
    // linear layers are exact under any step, so a large one minimizes rounding
    let step = match kind {
        LayerKind::Conv { .. } | LayerKind::Upsample2 | LayerKind::Concat | LayerKind::BatchNormEval => 1e-2,
        LayerKind::BatchNormTrain => 1e-5,
        LayerKind::MaxPool2 | LayerKind::Relu => 1e-6,
    };
    Ok(grad_check(&mut inputs, &analytic, loss, samples, step, &mut rng))
}
