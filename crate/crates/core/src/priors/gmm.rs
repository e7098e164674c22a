//! Full-covariance 2-D Gaussian mixtures: EM fitting, BIC, and component
//! count selection.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Slack allowed when asserting that EM never lowers the log-likelihood.
pub const EM_MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop once the relative log-likelihood gain of an iteration drops below this.
    pub em_tol: f64,
    pub max_iters: usize,
    /// Minimum eigenvalue of every component covariance (px²).
    pub covariance_floor: f64,
    /// A component whose responsibility mass falls below `mass_floor_fraction * n`
    /// is removed and the fit restarts with one component fewer.
    pub mass_floor_fraction: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { em_tol: 1e-6, max_iters: 200, covariance_floor: 1e-4, mass_floor_fraction: 1e-3 }
    }
}

pub type Cov2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub covariance: Cov2,
}

impl GmmComponent {
    fn log_density(&self, x: [f64; 2]) -> f64 {
        let [[a, b], [_, c]] = self.covariance;
        let det = a * c - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -LN_2PI - 0.5 * det.ln() - 0.5 * maha
    }
}

/// A mixture of full-covariance bivariate Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGmm", into = "RawGmm")]
pub struct Gmm2D {
    components: Vec<GmmComponent>,
}

#[derive(Serialize, Deserialize)]
struct RawGmm {
    components: Vec<GmmComponent>,
}

impl TryFrom<RawGmm> for Gmm2D {
    type Error = Error;
    fn try_from(raw: RawGmm) -> Result<Self> {
        Gmm2D::new(raw.components)
    }
}

impl From<Gmm2D> for RawGmm {
    fn from(g: Gmm2D) -> Self {
        RawGmm { components: g.components }
    }
}

impl Gmm2D {
    /// Validates weights (positive, summing to 1 within 1e-9) and covariances
    /// (symmetric positive definite).
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::validation("mixture needs at least one component"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &components {
            let [[a, b], [b2, d]] = c.covariance;
            let finite = c.weight.is_finite()
                && c.mean.iter().all(|v| v.is_finite())
                && [a, b, b2, d].iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteInput("mixture parameters"));
            }
            if c.weight <= 0.0 {
                return Err(Error::validation("mixture weights must be positive"));
            }
            if b != b2 || a <= 0.0 || a * d - b * b <= 0.0 {
                return Err(Error::validation("mixture covariance is not symmetric positive definite"));
            }
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.weight.ln() + c.log_density(x)))
    }

    pub fn pdf(&self, x: [f64; 2]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn log_likelihood(&self, data: &[[f64; 2]]) -> f64 {
        data.iter().map(|&x| self.log_pdf(x)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                pick = c;
                break;
            }
        }
        sample_normal_2d(rng, pick.mean, pick.covariance)
    }
}

pub(crate) fn sample_normal_2d<R: Rng + ?Sized>(rng: &mut R, mean: [f64; 2], cov: Cov2) -> [f64; 2] {
    let [[a, b], [_, c]] = cov;
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (c - l21 * l21).max(0.0).sqrt();
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    [mean[0] + l11 * z1, mean[1] + l21 * z1 + l22 * z2]
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Raises every eigenvalue of a symmetric 2x2 matrix to at least `floor`.
/// This is also the exact likelihood maximizer under that eigenvalue constraint,
/// so flooring inside the M-step keeps EM monotone.
pub fn floor_eigenvalues(cov: Cov2, floor: f64) -> Cov2 {
    let [[a, b], [_, c]] = cov;
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    if l2 >= floor {
        return [[a, b], [b, c]];
    }
    let (vx, vy) = if b != 0.0 {
        let (x, y) = (l1 - c, b);
        let n = x.hypot(y);
        (x / n, y / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (l1, l2) = (l1.max(floor), l2.max(floor));
    // v2 = (-vy, vx)
    let xx = l1 * vx * vx + l2 * vy * vy;
    let xy = (l1 - l2) * vx * vy;
    let yy = l1 * vy * vy + l2 * vx * vx;
    [[xx, xy], [xy, yy]]
}

/// Number of free parameters of an `m`-component full-covariance 2-D mixture.
pub fn free_parameters(m: usize) -> usize {
    6 * m - 1
}

/// `-2 logL + p ln n` with `p = 6m - 1`. Lower is better.
pub fn bic(log_likelihood: f64, m: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + free_parameters(m) as f64 * (n as f64).ln()
}

/// Outcome of one EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub gmm: Gmm2D,
    pub log_likelihood: f64,
    /// Log-likelihood after initialization and after every M-step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub requested_components: usize,
    /// Components dropped because their responsibility mass collapsed.
    pub removed_components: usize,
}

/// Fits an `m`-component mixture by EM from a seeded k-means++ initialization.
///
/// A component whose mass collapses is removed and the fit restarts with one
/// component fewer; `removed_components` records how many were dropped.
pub fn gmm_em_fit(offsets: &[[f64; 2]], m: usize, seed: u64, cfg: &EmConfig) -> Result<EmFit> {
    if m == 0 {
        return Err(Error::validation("component count must be at least 1"));
    }
    if offsets.len() < 4 * m {
        return Err(Error::TooFewSamples { needed: 4 * m, got: offsets.len() });
    }
    if offsets.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFiniteInput("mixture training data"));
    }
    let mut current = m;
    loop {
        match em_run(offsets, current, seed, cfg) {
            Ok((gmm, trace, iterations, converged)) => {
                return Ok(EmFit {
                    gmm,
                    log_likelihood: *trace.last().expect("trace is never empty"),
                    trace,
                    iterations,
                    converged,
                    requested_components: m,
                    removed_components: m - current,
                });
            }
            Err(Error::DegenerateComponent { component, mass, floor }) => {
                log::debug!(
                    "component {component} of {current} collapsed (mass {mass:.3e} < {floor:.3e}); refitting with {}",
                    current - 1
                );
                if current == 1 {
                    return Err(Error::DegenerateComponent { component, mass, floor });
                }
                current -= 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn em_run(data: &[[f64; 2]], m: usize, seed: u64, cfg: &EmConfig) -> Result<(Gmm2D, Vec<f64>, usize, bool)> {
    let n = data.len();
    let mass_floor = cfg.mass_floor_fraction * n as f64;
    let mut comps = initialize(data, m, seed, cfg.covariance_floor);
    let mut resp = vec![0.0; n * m];

    let mut ll = e_step(data, &comps, &mut resp);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        m_step(data, &resp, &mut comps, mass_floor, cfg.covariance_floor)?;
        iterations += 1;
        let next = e_step(data, &comps, &mut resp);
        if !next.is_finite() {
            return Err(Error::Numerical("EM log-likelihood is not finite".into()));
        }
        if next < ll - EM_MONOTONE_SLACK * ll.abs().max(1.0) {
            return Err(Error::Numerical(format!("EM log-likelihood decreased from {ll} to {next}")));
        }
        trace.push(next);
        let gain = next - ll;
        ll = next;
        if gain < cfg.em_tol * ll.abs() {
            converged = true;
            break;
        }
    }
    Ok((Gmm2D { components: comps }, trace, iterations, converged))
}

/// Fills `resp` (row-major n x m) with responsibilities and returns the total
/// log-likelihood.
fn e_step(data: &[[f64; 2]], comps: &[GmmComponent], resp: &mut [f64]) -> f64 {
    let m = comps.len();
    let log_w: Vec<f64> = comps.iter().map(|c| c.weight.ln()).collect();
    let mut total = 0.0;
    for (i, &x) in data.iter().enumerate() {
        let row = &mut resp[i * m..(i + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for (k, c) in comps.iter().enumerate() {
            row[k] = log_w[k] + c.log_density(x);
            max = max.max(row[k]);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        total += max + sum.ln();
    }
    total
}

fn m_step(
    data: &[[f64; 2]],
    resp: &[f64],
    comps: &mut [GmmComponent],
    mass_floor: f64,
    cov_floor: f64,
) -> Result<()> {
    let m = comps.len();
    let n = data.len() as f64;
    for (k, comp) in comps.iter_mut().enumerate() {
        let mut mass = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for (i, x) in data.iter().enumerate() {
            let r = resp[i * m + k];
            mass += r;
            sx += r * x[0];
            sy += r * x[1];
        }
        if mass < mass_floor || mass <= 0.0 {
            return Err(Error::DegenerateComponent { component: k, mass, floor: mass_floor });
        }
        let mean = [sx / mass, sy / mass];
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for (i, x) in data.iter().enumerate() {
            let r = resp[i * m + k];
            let dx = x[0] - mean[0];
            let dy = x[1] - mean[1];
            xx += r * dx * dx;
            xy += r * dx * dy;
            yy += r * dy * dy;
        }
        comp.weight = mass / n;
        comp.mean = mean;
        comp.covariance = floor_eigenvalues([[xx / mass, xy / mass], [xy / mass, yy / mass]], cov_floor);
    }
    // renormalize away rounding drift
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    for c in comps.iter_mut() {
        c.weight /= total;
    }
    Ok(())
}

/// k-means++ seeding, then per-seed statistics of the hard assignment.
fn initialize(data: &[[f64; 2]], m: usize, seed: u64, cov_floor: f64) -> Vec<GmmComponent> {
    let mut rng = seed::rng(seed);
    let n = data.len();
    let dist2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);

    let mut centers = vec![data[rng.random_range(0..n)]];
    let mut nearest: Vec<f64> = data.iter().map(|&x| dist2(x, centers[0])).collect();
    while centers.len() < m {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            data[idx]
        } else {
            data[rng.random_range(0..n)]
        };
        for (i, &x) in data.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(x, next));
        }
        centers.push(next);
    }

    let global = scatter(data.iter().copied(), mean_of(data.iter().copied()));
    let mut assigned: Vec<Vec<[f64; 2]>> = vec![Vec::new(); m];
    for &x in data {
        let k = (0..m)
            .min_by(|&a, &b| dist2(x, centers[a]).total_cmp(&dist2(x, centers[b])))
            .expect("m >= 1");
        assigned[k].push(x);
    }
    let mut comps: Vec<GmmComponent> = assigned
        .iter()
        .zip(&centers)
        .map(|(pts, &center)| {
            let (mean, cov) = if pts.len() >= 3 {
                let mean = mean_of(pts.iter().copied());
                (mean, scatter(pts.iter().copied(), mean))
            } else {
                let s = 1.0 / (m * m) as f64;
                (center, [[global[0][0] * s, global[0][1] * s], [global[1][0] * s, global[1][1] * s]])
            };
            GmmComponent {
                weight: (pts.len() as f64 + 1.0) / (n + m) as f64,
                mean,
                covariance: floor_eigenvalues(cov, cov_floor),
            }
        })
        .collect();
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    for c in &mut comps {
        c.weight /= total;
    }
    comps
}

fn mean_of(points: impl Iterator<Item = [f64; 2]>) -> [f64; 2] {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for p in points {
        sx += p[0];
        sy += p[1];
        n += 1;
    }
    [sx / n as f64, sy / n as f64]
}

fn scatter(points: impl Iterator<Item = [f64; 2]>, mean: [f64; 2]) -> Cov2 {
    let (mut xx, mut xy, mut yy, mut n) = (0.0, 0.0, 0.0, 0usize);
    for p in points {
        let dx = p[0] - mean[0];
        let dy = p[1] - mean[1];
        xx += dx * dx;
        xy += dx * dy;
        yy += dy * dy;
        n += 1;
    }
    let n = n as f64;
    [[xx / n, xy / n], [xy / n, yy / n]]
}

/// One row of a BIC sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub requested: usize,
    /// Component count actually fitted (lower than `requested` if any collapsed).
    pub components: usize,
    pub log_likelihood: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSelection {
    pub fit: EmFit,
    pub bic: f64,
    pub table: Vec<BicRow>,
}

/// Sweeps `m = 1..=m_max` (skipping counts with fewer than `4m` samples),
/// keeps the best of `restarts` seeded EM fits per count, and returns the
/// count with minimal BIC. Ties go to the smaller count.
pub fn select_components(
    offsets: &[[f64; 2]],
    m_max: usize,
    restarts: usize,
    seed: u64,
    cfg: &EmConfig,
) -> Result<ComponentSelection> {
    let n = offsets.len();
    if n < 4 {
        return Err(Error::TooFewSamples { needed: 4, got: n });
    }
    let restarts = restarts.max(1);
    let mut table = Vec::new();
    let mut best: Option<(EmFit, f64)> = None;

    for m in (1..=m_max.max(1)).take_while(|&m| n >= 4 * m) {
        let mut best_m: Option<EmFit> = None;
        for r in 0..restarts {
            let fit = gmm_em_fit(offsets, m, seed::derive(seed, &[m as u64, r as u64]), cfg)?;
            if best_m.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
                best_m = Some(fit);
            }
        }
        let fit = best_m.expect("restarts >= 1");
        let k = fit.gmm.component_count();
        let score = bic(fit.log_likelihood, k, n);
        table.push(BicRow { requested: m, components: k, log_likelihood: fit.log_likelihood, bic: score });
        if best.as_ref().is_none_or(|(_, b)| score < *b) {
            best = Some((fit, score));
        }
    }

    let (fit, bic) = best.expect("m = 1 always runs");
    Ok(ComponentSelection { fit, bic, table })
}
