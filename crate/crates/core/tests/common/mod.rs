#![allow(dead_code)]

use fedsynth::autodiff::{Architecture, Layer, Model};
use fedsynth::seed::stream;
use fedsynth::Tensor;
use rand::Rng;

/// Denominator floor for relative errors; below it the comparison is
/// effectively absolute at 1e-10.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// 2 or 3 dense layers in total, widths at most 32.
pub fn random_model(seed: u64, input: usize, classes: usize) -> Model {
    let mut rng = stream(seed);
    let feature = rng.random_range(2..=32);
    let hidden: Vec<usize> = if rng.random_bool(0.5) { vec![rng.random_range(2..=32)] } else { vec![] };
    Model::init(Architecture::mlp(input, &hidden, feature, classes), &mut rng).unwrap()
}

pub fn random_matrix(seed: u64, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let mut rng = stream(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub struct OracleOut {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    /// Sign of every pre-activation feeding a ReLU, in evaluation order.
    pub pattern: Vec<bool>,
}

fn run_stack(layers: &[Layer], params: &[fedsynth::autodiff::Param], rows: Vec<Vec<f64>>, pattern: &mut Vec<bool>) -> Vec<Vec<f64>> {
    let mut rows = rows;
    let mut p = 0;
    for layer in layers {
        match *layer {
            Layer::Dense { input, output } => {
                let w = params[p].tensor.data();
                let b = params[p + 1].tensor.data();
                p += 2;
                rows = rows
                    .iter()
                    .map(|x| {
                        (0..output)
                            .map(|j| {
                                let mut acc = 0.0;
                                for i in 0..input {
                                    acc += x[i] * w[i * output + j];
                                }
                                acc + b[j]
                            })
                            .collect()
                    })
                    .collect();
            }
            Layer::Relu => {
                for r in rows.iter_mut() {
                    for v in r.iter_mut() {
                        pattern.push(*v > 0.0);
                        *v = v.max(0.0);
                    }
                }
            }
        }
    }
    rows
}

/// Plain nested-loop forward pass, independent of the library's kernels.
pub fn oracle_forward(model: &Model, x: &Tensor) -> OracleOut {
    let rows: Vec<Vec<f64>> = x.rows().map(<[f64]>::to_vec).collect();
    let mut pattern = Vec::new();
    let arch = model.architecture();
    let features = run_stack(&arch.extractor, &model.extractor_params, rows, &mut pattern);
    let logits = run_stack(&arch.classifier, &model.classifier_params, features.clone(), &mut pattern);
    OracleOut { features, logits, pattern }
}

/// Stable log-sum-exp cross-entropy against a hard label.
pub fn oracle_ce(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

pub fn oracle_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// `sum_i b_i (ln(b_i + eps) - ln(a_i + eps))` over softmaxed masked vectors.
pub fn oracle_masked_kl(zhat: &[f64], target: &[f64], cam: &[f64], eps: f64) -> f64 {
    let mask: Vec<f64> = cam.iter().map(|g| g.max(0.0)).collect();
    if mask.iter().all(|&m| m == 0.0) {
        return 0.0;
    }
    let a = oracle_softmax(&zhat.iter().zip(&mask).map(|(z, m)| z * m).collect::<Vec<_>>());
    let b = oracle_softmax(&target.iter().zip(&mask).map(|(z, m)| z * m).collect::<Vec<_>>());
    a.iter().zip(&b).map(|(a, b)| b * ((b + eps).ln() - (a + eps).ln())).sum()
}
