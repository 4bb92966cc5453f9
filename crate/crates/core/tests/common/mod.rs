#![allow(dead_code)]

use focuslab::data::{GeneratorFamily, Sample};
use focuslab::eval;

/// Logistic regression on raw pixels, fit by full-batch gradient descent on
/// `train`, scored by AUROC on the real and `family` samples of `test`.
pub fn linear_pixel_auroc(train: &[Sample], test: &[Sample], family: GeneratorFamily, steps: usize) -> f64 {
    let d = train[0].image.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|s| s.image[j]).sum::<f64>() / n).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for s in train {
            let z: f64 = b + s.image.iter().zip(&mean).zip(&w).map(|((x, m), w)| (x - m) * w).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - s.label as f64;
            gb += err;
            for j in 0..d {
                gw[j] += err * (s.image[j] - mean[j]);
            }
        }
        b -= lr * gb / n;
        for j in 0..d {
            w[j] -= lr * (gw[j] / n + 1e-4 * w[j]);
        }
    }
    let held: Vec<&Sample> = test
        .iter()
        .filter(|s| s.generator.is_none() || s.generator == Some(family))
        .collect();
    let scores: Vec<f64> = held
        .iter()
        .map(|s| b + s.image.iter().zip(&mean).zip(&w).map(|((x, m), w)| (x - m) * w).sum::<f64>())
        .collect();
    let labels: Vec<usize> = held.iter().map(|s| s.label).collect();
    eval::auroc(&scores, &labels).unwrap()
}
