//! Linear SVM trained in the primal by averaged stochastic subgradient descent.
//!
//! Objective, with `lambda = 1 / (c * n)` and an unregularized bias:
//!
//! ```text
//! J(w, b) = lambda / 2 * |w|^2 + 1/n * sum_i max(0, 1 - y_i (w . x_i + b))
//! ```
//!
//! Features are centered internally; since the bias is unregularized this
//! changes nothing but the conditioning. Steps follow
//! `eta_t = eta0 / (1 + max(lambda * eta0, 1/n) * t)`, and the returned model is
//! the average of the iterates over the second half of the epochs. `eta0` is
//! picked from a grid scaled by `1 / R^2` (`R` the largest centered row norm)
//! by a short trial run, and the bias steps by `0.1 * eta * R^2`. Both scalings
//! make the iterates equivariant under feature scaling, so rescaling features
//! by `s` and `c` by `1 / s^2` reproduces the same decision boundary.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::dot;
use crate::error::{Error, Result};
use crate::seed;

const ETA0_GRID_LOG2: std::ops::RangeInclusive<i32> = -8..=6;
const TRIAL_EPOCHS: usize = 3;
const BIAS_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { epochs: 50, seed: 0 }
    }
}

/// Borrowed training rows with ±1 labels.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet<'a> {
    pub rows: Vec<&'a [f32]>,
    pub labels: Vec<f64>,
}

impl<'a> TrainingSet<'a> {
    pub fn from_classes(positives: &[&'a [f32]], negatives: &[&'a [f32]]) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::EmptyClass(format!(
                "{} positives, {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        let dim = positives[0].len();
        for r in positives.iter().chain(negatives) {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
        }
        let rows: Vec<&[f32]> = positives.iter().chain(negatives).copied().collect();
        let labels = std::iter::repeat_n(1.0, positives.len())
            .chain(std::iter::repeat_n(-1.0, negatives.len()))
            .collect();
        Ok(Self { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], bias: 0.0 }
    }

    pub fn margin(&self, f: &[f32]) -> f64 {
        dot(&self.w, f) + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub model: LinearSvm,
    pub objective: f64,
    pub eta0: f64,
    /// Objective of the averaged iterate at the end of every averaged epoch.
    pub checkpoints: Vec<f64>,
}

pub fn regularization(c: f64, n: usize) -> f64 {
    1.0 / (c * n as f64)
}

pub fn objective(model: &LinearSvm, data: &TrainingSet<'_>, lambda: f64) -> f64 {
    let n = data.len() as f64;
    let reg = 0.5 * lambda * model.w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = data
        .rows
        .iter()
        .zip(&data.labels)
        .map(|(x, y)| (1.0 - y * model.margin(x)).max(0.0))
        .sum();
    reg + hinge / n
}

/// A subgradient of `objective`; the true gradient wherever no margin equals 1.
pub fn subgradient(model: &LinearSvm, data: &TrainingSet<'_>, lambda: f64) -> LinearSvm {
    let n = data.len() as f64;
    let mut g = LinearSvm { w: model.w.iter().map(|v| lambda * v).collect(), bias: 0.0 };
    for (x, y) in data.rows.iter().zip(&data.labels) {
        if y * model.margin(x) < 1.0 {
            for (gw, xv) in g.w.iter_mut().zip(x.iter()) {
                *gw -= y * *xv as f64 / n;
            }
            g.bias -= y / n;
        }
    }
    g
}

/// Trains a linear SVM separating `positives` from `negatives`.
pub fn train_svm(positives: &[&[f32]], negatives: &[&[f32]], c: f64, cfg: &SvmConfig) -> Result<SvmFit> {
    let data = TrainingSet::from_classes(positives, negatives)?;
    train_on(&data, c, cfg)
}

pub fn train_on(data: &TrainingSet<'_>, c: f64, cfg: &SvmConfig) -> Result<SvmFit> {
    if data.is_empty() {
        return Err(Error::EmptyClass("no training rows".into()));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::validation(format!("SVM regularization c must be positive, got {c}")));
    }
    let n = data.len();
    let lambda = regularization(c, n);
    let dim = data.dim();
    let mut mean = vec![0.0; dim];
    for x in &data.rows {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let radius2 = data
        .rows
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(v, m)| (*v as f64 - m).powi(2)).sum::<f64>())
        .fold(0.0, f64::max)
        .max(1e-12);
    let problem = Problem { data, mean: &mean, lambda, radius2 };

    let mut eta0 = 0.0;
    let mut best = f64::INFINITY;
    for k in ETA0_GRID_LOG2 {
        let candidate = 2f64.powi(k) / radius2;
        let trial = problem.run(candidate, TRIAL_EPOCHS, seed::derive(cfg.seed, &[0]), false);
        let obj = objective(&trial.0, data, lambda);
        if obj < best {
            best = obj;
            eta0 = candidate;
        }
    }

    let (model, checkpoints) = problem.run(eta0, cfg.epochs.max(1), seed::derive(cfg.seed, &[1]), true);
    if model.w.iter().any(|v| !v.is_finite()) || !model.bias.is_finite() {
        return Err(Error::Numerical("SVM weights diverged".into()));
    }
    let objective = objective(&model, data, lambda);
    Ok(SvmFit { model, objective, eta0, checkpoints })
}

struct Problem<'a> {
    data: &'a TrainingSet<'a>,
    mean: &'a [f64],
    lambda: f64,
    radius2: f64,
}

impl Problem<'_> {
    /// Averaged SGD for `epochs` epochs; returns the average of the second
    /// half of the iterates in uncentered form, plus its objective after every
    /// averaged epoch when `track` is set.
    fn run(&self, eta0: f64, epochs: usize, seed_: u64, track: bool) -> (LinearSvm, Vec<f64>) {
        let n = self.data.len();
        let mut rng = seed::rng(seed_);
        let mut order: Vec<usize> = (0..n).collect();
        let decay = (self.lambda * eta0).max(1.0 / n as f64);
        // iterate and average in centered coordinates
        let mut w = vec![0.0; self.mean.len()];
        let mut b = 0.0;
        let mut avg = LinearSvm::zeros(self.mean.len());
        let mut count = 0.0;
        let mut t = 0.0;
        let mut checkpoints = Vec::new();
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let averaging = epoch >= epochs / 2;
            for &i in &order {
                let eta = eta0 / (1.0 + decay * t);
                let x = self.data.rows[i];
                let y = self.data.labels[i];
                let margin: f64 = w.iter().zip(x.iter()).zip(self.mean).map(|((wv, xv), m)| wv * (*xv as f64 - m)).sum::<f64>() + b;
                let violated = y * margin < 1.0;
                let shrink = 1.0 - eta * self.lambda;
                for ((wv, xv), m) in w.iter_mut().zip(x.iter()).zip(self.mean) {
                    *wv *= shrink;
                    if violated {
                        *wv += eta * y * (*xv as f64 - m);
                    }
                }
                if violated {
                    b += BIAS_STEP * eta * self.radius2 * y;
                }
                t += 1.0;
                if averaging {
                    count += 1.0;
                    let k = 1.0 / count;
                    for (a, v) in avg.w.iter_mut().zip(&w) {
                        *a += (v - *a) * k;
                    }
                    avg.bias += (b - avg.bias) * k;
                }
            }
            if averaging && track {
                checkpoints.push(objective(&self.uncentered(&avg), self.data, self.lambda));
            }
        }
        (self.uncentered(&avg), checkpoints)
    }

    fn uncentered(&self, m: &LinearSvm) -> LinearSvm {
        let shift: f64 = m.w.iter().zip(self.mean).map(|(w, mu)| w * mu).sum();
        LinearSvm { w: m.w.clone(), bias: m.bias - shift }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn toy() -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut rng = seed::rng(1);
        let pos = (0..40).map(|_| vec![rng.random_range(1.2..4.0), rng.random_range(-3.0..3.0)]).collect();
        let neg = (0..40).map(|_| vec![rng.random_range(-4.0..-1.2), rng.random_range(-3.0..3.0)]).collect();
        (pos, neg)
    }

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let (pos, neg) = toy();
        let fit = train_svm(&refs(&pos), &refs(&neg), 1.0, &SvmConfig::default()).unwrap();
        assert!(pos.iter().all(|x| fit.model.margin(x) > 0.0));
        assert!(neg.iter().all(|x| fit.model.margin(x) < 0.0));
    }

    #[test]
    fn errors() {
        let (pos, _) = toy();
        assert!(matches!(train_svm(&refs(&pos), &[], 1.0, &SvmConfig::default()), Err(Error::EmptyClass(_))));
        let short = [0.0f32];
        assert!(matches!(
            train_svm(&refs(&pos), &[&short[..]], 1.0, &SvmConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn noisy(n: usize, dim: usize, seed_: u64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        let mut rng = seed::rng(seed_);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mean: Vec<f32> = (0..dim).map(|_| rng.random_range(-0.6..0.6)).collect();
        let mut draw = |sign: f32| -> Vec<f32> {
            mean.iter().map(|m| sign * m + noise.sample(&mut rng) as f32).collect()
        };
        let pos = (0..n).map(|_| draw(1.0)).collect();
        let neg = (0..n).map(|_| draw(-1.0)).collect();
        (pos, neg)
    }

    #[test]
    fn matches_long_run_objective() {
        let (pos, neg) = noisy(150, 8, 3);
        let cfg = SvmConfig { epochs: 50, seed: 2 };
        let short = train_svm(&refs(&pos), &refs(&neg), 1.0, &cfg).unwrap();
        let long = train_svm(&refs(&pos), &refs(&neg), 1.0, &SvmConfig { epochs: 500, ..cfg }).unwrap();
        assert!(short.objective <= long.objective * 1.01, "{} vs {}", short.objective, long.objective);
    }


    #[test]
    fn checkpoints_do_not_increase() {
        for (data_seed, run_seed, c) in (0..40u64).map(|k| (k, k * 7 + 1, [0.01, 0.1, 1.0, 10.0][k as usize % 4])) {
            let (pos, neg) = noisy(120, 6, data_seed);
            let fit = train_svm(&refs(&pos), &refs(&neg), c, &SvmConfig { epochs: 60, seed: run_seed }).unwrap();
            // sampling noise leaves wobbles of a few 1e-4 near the optimum
            for w in fit.checkpoints.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 5e-4), "c={c}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (pos, neg) = noisy(50, 4, 5);
        let cfg = SvmConfig { epochs: 10, seed: 77 };
        let a = train_svm(&refs(&pos), &refs(&neg), 1.0, &cfg).unwrap();
        let b = train_svm(&refs(&pos), &refs(&neg), 1.0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subgradient_matches_finite_differences() {
        let (pos, neg) = noisy(30, 5, 11);
        let data = TrainingSet::from_classes(&refs(&pos), &refs(&neg)).unwrap();
        let lambda = regularization(0.7, data.len());
        let mut rng = seed::rng(12);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 20 {
            let m = LinearSvm {
                w: (0..5).map(|_| rng.random_range(-1.5..1.5)).collect(),
                bias: rng.random_range(-1.0..1.0),
            };
            // stay clear of kinks so the objective is smooth around the point
            let near_kink = data.rows.iter().zip(&data.labels).any(|(x, y)| (1.0 - y * m.margin(x)).abs() < 1e-3);
            if near_kink {
                continue;
            }
            let g = subgradient(&m, &data, lambda);
            let mut fd = Vec::new();
            for k in 0..=5 {
                let shifted = |d: f64| {
                    let mut p = m.clone();
                    if k < 5 {
                        p.w[k] += d;
                    } else {
                        p.bias += d;
                    }
                    objective(&p, &data, lambda)
                };
                fd.push((shifted(h) - shifted(-h)) / (2.0 * h));
            }
            let analytic: Vec<f64> = g.w.iter().copied().chain([g.bias]).collect();
            let diff = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / norm <= 1e-4, "relative error {}", diff / norm);
            checked += 1;
        }
    }

    #[test]
    fn duplicated_data_with_half_c_reaches_same_optimum() {
        let (pos, neg) = noisy(80, 4, 13);
        let cfg = SvmConfig { epochs: 100, seed: 3 };
        let once = train_svm(&refs(&pos), &refs(&neg), 1.0, &cfg).unwrap();
        let pos2: Vec<Vec<f32>> = pos.iter().chain(&pos).cloned().collect();
        let neg2: Vec<Vec<f32>> = neg.iter().chain(&neg).cloned().collect();
        let twice = train_svm(&refs(&pos2), &refs(&neg2), 0.5, &cfg).unwrap();
        // same objective function, so both fits are judged on the original data
        let data = TrainingSet::from_classes(&refs(&pos), &refs(&neg)).unwrap();
        let lambda = regularization(1.0, data.len());
        let a = objective(&once.model, &data, lambda);
        let b = objective(&twice.model, &data, lambda);
        assert!((a - b).abs() <= 0.01 * a.min(b), "{a} vs {b}");
        assert!((twice.objective - b).abs() < 1e-9);
    }

    #[test]
    fn feature_scaling_with_rescaled_c_keeps_boundary() {
        let (pos, neg) = noisy(60, 3, 17);
        let cfg = SvmConfig { epochs: 30, seed: 5 };
        let base = train_svm(&refs(&pos), &refs(&neg), 1.0, &cfg).unwrap();
        for s in [0.25f32, 3.0, 8.0] {
            let scale = |v: &Vec<Vec<f32>>| -> Vec<Vec<f32>> { v.iter().map(|r| r.iter().map(|x| x * s).collect()).collect() };
            let (sp, sn) = (scale(&pos), scale(&neg));
            let c = 1.0 / (s as f64).powi(2);
            let scaled = train_svm(&refs(&sp), &refs(&sn), c, &cfg).unwrap();
            for (x, sx) in pos.iter().chain(&neg).zip(sp.iter().chain(&sn)) {
                let m0 = base.model.margin(x);
                let m1 = scaled.model.margin(sx);
                assert!((m0 - m1).abs() <= 1e-4 * (1.0 + m0.abs()), "s={s}: {m0} vs {m1}");
            }
        }
    }
}
