//! One-vs-rest linear SVM trained with the Pegasos stochastic subgradient
//! method, on standardized features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-column mean and standard deviation of a set of training rows.
/// Constant columns get a unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Argument("cannot standardize zero rows".into()));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(*r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(*r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// Linear scores `w_c · [x, 1]` for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub standardizer: Standardizer,
    /// One weight vector per class, bias last.
    pub weights: Vec<Vec<f64>>,
    /// Class ids of the rows of `weights`.
    pub classes: Vec<usize>,
}

impl LinearSvm {
    pub fn predict(&self, row: &[f64]) -> usize {
        let x = self.standardizer.apply(row);
        let mut best = (f64::NEG_INFINITY, self.classes[0]);
        for (w, &c) in self.weights.iter().zip(&self.classes) {
            let s = score(w, &x);
            if s > best.0 {
                best = (s, c);
            }
        }
        best.1
    }

    pub fn accuracy(&self, rows: &[&[f64]], labels: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let correct = rows
            .iter()
            .zip(labels)
            .filter(|(r, &y)| self.predict(r) == y)
            .count();
        correct as f64 / rows.len() as f64
    }
}

fn score(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

/// Minimizes `(λ/2)‖w‖² + (1/T) Σ_t max(0, 1 − y_t w·x_t)` per class with
/// `λ = 1/(C·T)`, running `epochs · T` Pegasos steps and returning the
/// average of the second half of the iterates.
pub fn linear_svm_train(
    rows: &[&[f64]],
    labels: &[usize],
    c: f64,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LinearSvm> {
    if rows.len() != labels.len() {
        return Err(Error::dim(
            "linear_svm_train",
            &[rows.len()],
            &[labels.len()],
        ));
    }
    if !(c > 0.0) {
        return Err(Error::Argument(format!("C must be positive, got {c}")));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 classes to train, got {}",
            classes.len()
        )));
    }
    let standardizer = Standardizer::fit(rows)?;
    let x: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
    let t_count = x.len();
    let d = x[0].len();
    let lambda = 1.0 / (c * t_count as f64);
    let steps = (epochs * t_count).max(1);
    let average_from = steps / 2;

    let mut weights = Vec::with_capacity(classes.len());
    for &class in &classes {
        let mut w = vec![0.0; d + 1];
        let mut avg = vec![0.0; d + 1];
        let mut averaged = 0usize;
        for t in 1..=steps {
            let i = rng.gen_range(0..t_count);
            let y = if labels[i] == class { 1.0 } else { -1.0 };
            let eta = 1.0 / (lambda * t as f64);
            let margin = y * score(&w, &x[i]);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += eta * y * xj;
                }
                w[d] += eta * y;
            }
            // projection onto the ball of radius 1/sqrt(λ)
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let radius = 1.0 / lambda.sqrt();
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            if t > average_from {
                averaged += 1;
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += (v - *a) / averaged as f64;
                }
            }
        }
        weights.push(avg);
    }
    Ok(LinearSvm {
        standardizer,
        weights,
        classes,
    })
}
