//! Gaussian-process Bayesian optimization with expected improvement.
//!
//! Inputs are rescaled to the unit cube (dimensions with zero width are held
//! fixed and left out of the model), targets are standardized, and the kernel
//! is squared-exponential with unit signal variance and per-dimension length
//! scales chosen from a small grid by log marginal likelihood.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightVector;

pub const LENGTH_SCALE_GRID: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
const BASE_NOISE: f64 = 1e-6;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[max(0, Y - best)]` for `Y ~ N(mu, sigma²)`; `max(0, mu - best)` when
/// `sigma == 0`.
pub fn expected_improvement_closed(mu: f64, sigma: f64, best: f64) -> f64 {
    let d = mu - best;
    if sigma <= 0.0 {
        return d.max(0.0);
    }
    let z = d / sigma;
    (d * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// GP regression model over a box-bounded input space.
#[derive(Debug, Clone)]
pub struct GpSurrogate {
    bounds: Vec<(f64, f64)>,
    active: Vec<usize>,
    x: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    length_scales: Vec<f64>,
    noise: f64,
    l: DMatrix<f64>,
    alpha: DVector<f64>,
}

struct Factor {
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    noise: f64,
    lml: f64,
}

fn sq_exp(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / ls[i];
        s += d * d;
    }
    (-0.5 * s).exp()
}

fn factorize(x: &[Vec<f64>], y: &DVector<f64>, ls: &[f64]) -> Option<Factor> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| sq_exp(&x[i], &x[j], ls));
    let mut noise = BASE_NOISE;
    while noise <= 1e-1 {
        let mut kn = k.clone();
        for i in 0..n {
            kn[(i, i)] += noise;
        }
        if let Some(ch) = kn.cholesky() {
            let alpha = ch.solve(y);
            let l = ch.unpack();
            let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
            let lml = -0.5 * y.dot(&alpha) - log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Some(Factor {
                l,
                alpha,
                noise,
                lml,
            });
        }
        noise *= 10.0;
    }
    None
}

impl GpSurrogate {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Invalid(format!("bad bound [{lo}, {hi}]")));
            }
        }
        let active: Vec<usize> = (0..bounds.len()).filter(|&i| bounds[i].1 > bounds[i].0).collect();
        let d = active.len();
        Ok(GpSurrogate {
            bounds,
            active,
            x: Vec::new(),
            y_mean: 0.0,
            y_scale: 1.0,
            length_scales: vec![1.0; d],
            noise: BASE_NOISE,
            l: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
        })
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn is_fitted(&self) -> bool {
        !self.x.is_empty()
    }

    pub fn length_scales(&self) -> &[f64] {
        &self.length_scales
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Maps a point to unit-cube coordinates over the active dimensions.
    fn to_unit(&self, theta: &[f64]) -> Vec<f64> {
        self.active
            .iter()
            .map(|&i| {
                let (lo, hi) = self.bounds[i];
                (theta[i] - lo) / (hi - lo)
            })
            .collect()
    }

    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        let mut theta: Vec<f64> = self.bounds.iter().map(|b| b.0).collect();
        for (k, &i) in self.active.iter().enumerate() {
            let (lo, hi) = self.bounds[i];
            theta[i] = (lo + u[k].clamp(0.0, 1.0) * (hi - lo)).clamp(lo, hi);
        }
        theta
    }

    /// Fits the model to `(theta, value)` observations, selecting length
    /// scales by coordinate ascent over the grid.
    pub fn fit(&mut self, observations: &[(Vec<f64>, f64)]) -> Result<()> {
        if observations.is_empty() {
            return Err(Error::UnfittedSurrogate);
        }
        for (theta, _) in observations {
            if theta.len() != self.bounds.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.bounds.len(),
                    actual: theta.len(),
                });
            }
        }
        let n = observations.len() as f64;
        let mean = observations.iter().map(|o| o.1).sum::<f64>() / n;
        let var = observations.iter().map(|o| (o.1 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        let x: Vec<Vec<f64>> = observations.iter().map(|o| self.to_unit(&o.0)).collect();
        let y = DVector::from_iterator(
            observations.len(),
            observations.iter().map(|o| (o.1 - mean) / scale),
        );

        let d = self.active.len();
        let mut ls = vec![1.0; d];
        let mut best = factorize(&x, &y, &ls);
        for _sweep in 0..3 {
            let mut changed = false;
            for dim in 0..d {
                for &g in &LENGTH_SCALE_GRID {
                    if g == ls[dim] {
                        continue;
                    }
                    let mut trial = ls.clone();
                    trial[dim] = g;
                    if let Some(f) = factorize(&x, &y, &trial) {
                        let better = match &best {
                            Some(b) => f.lml > b.lml + 1e-9,
                            None => true,
                        };
                        if better {
                            best = Some(f);
                            ls = trial;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let f = best.ok_or_else(|| Error::Invalid("kernel matrix not positive definite".into()))?;
        self.x = x;
        self.y_mean = mean;
        self.y_scale = scale;
        self.length_scales = ls;
        self.noise = f.noise;
        self.l = f.l;
        self.alpha = f.alpha;
        Ok(())
    }

    fn predict_unit(&self, u: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let k = DVector::from_iterator(n, self.x.iter().map(|xi| sq_exp(xi, u, &self.length_scales)));
        let mu = k.dot(&self.alpha);
        let v = self
            .l
            .solve_lower_triangular(&k)
            .unwrap_or_else(|| DVector::zeros(n));
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.y_mean + mu * self.y_scale, var.sqrt() * self.y_scale)
    }

    /// Posterior mean and standard deviation at `theta`.
    pub fn predict(&self, theta: &[f64]) -> Result<(f64, f64)> {
        if !self.is_fitted() {
            return Err(Error::UnfittedSurrogate);
        }
        Ok(self.predict_unit(&self.to_unit(theta)))
    }

    pub fn expected_improvement(&self, theta: &[f64], best: f64) -> Result<f64> {
        let (mu, sigma) = self.predict(theta)?;
        Ok(expected_improvement_closed(mu, sigma, best))
    }

    fn ei_unit(&self, u: &[f64], best: f64) -> f64 {
        let (mu, sigma) = self.predict_unit(u);
        expected_improvement_closed(mu, sigma, best)
    }

    /// Approximate EI maximizer: `starts` seeded random points, then compass
    /// search from the most promising of them.
    pub fn propose_next(&self, best: f64, starts: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if !self.is_fitted() {
            return Err(Error::UnfittedSurrogate);
        }
        let d = self.active.len();
        if d == 0 {
            return Ok(self.from_unit(&[]));
        }
        let mut pts: Vec<(f64, Vec<f64>)> = (0..starts.max(1))
            .map(|_| {
                let u: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
                (self.ei_unit(&u, best), u)
            })
            .collect();
        pts.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut incumbent = pts[0].clone();
        for (ei0, u0) in pts.into_iter().take(8) {
            let (ei, u) = self.compass_search(u0, ei0, best);
            if ei > incumbent.0 {
                incumbent = (ei, u);
            }
        }
        Ok(self.from_unit(&incumbent.1))
    }

    /// Pattern search on EI in the unit cube. Steps halve from 0.05 down to
    /// 1e-4 and the number of EI evaluations is capped, since a nearly flat
    /// EI surface would otherwise admit very long walks of tiny gains.
    fn compass_search(&self, mut u: Vec<f64>, mut value: f64, best: f64) -> (f64, Vec<f64>) {
        const MAX_EVALS: usize = 2000;
        let mut step = 0.05;
        let mut evals = 0;
        while step >= 1e-4 && evals < MAX_EVALS {
            let mut improved = false;
            for dim in 0..u.len() {
                for dir in [1.0, -1.0] {
                    let mut t = u.clone();
                    t[dim] = (t[dim] + dir * step).clamp(0.0, 1.0);
                    if t[dim] == u[dim] {
                        continue;
                    }
                    let v = self.ei_unit(&t, best);
                    evals += 1;
                    if v > value {
                        value = v;
                        u = t;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        (value, u)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunerConfig {
    pub bounds: Vec<(f64, f64)>,
    pub budget: usize,
    pub initial_designs: usize,
    pub seed: u64,
    pub random_starts: usize,
    /// Points evaluated before the Latin-hypercube designs (they count
    /// towards `initial_designs`).
    #[serde(default)]
    pub warm_start: Vec<Vec<f64>>,
}

impl TunerConfig {
    pub fn new(bounds: Vec<(f64, f64)>, seed: u64) -> Self {
        TunerConfig {
            bounds,
            budget: 120,
            initial_designs: 20,
            seed,
            random_starts: 256,
            warm_start: Vec::new(),
        }
    }

    /// Default bounds over `(α, β, w_test, w_sample, w_unit)`.
    pub fn for_weights(seed: u64) -> Self {
        TunerConfig::new(WeightVector::bounds().to_vec(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_designs < 2 || self.budget < self.initial_designs {
            return Err(Error::Invalid(format!(
                "need budget >= initial designs >= 2, got {} and {}",
                self.budget, self.initial_designs
            )));
        }
        if self.bounds.is_empty() {
            return Err(Error::Invalid("no dimensions to tune".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Invalid(format!("bad bound [{lo}, {hi}]")));
            }
        }
        for p in &self.warm_start {
            if p.len() != self.bounds.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.bounds.len(),
                    actual: p.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub incumbent: f64,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best_theta: Vec<f64>,
    pub best_value: f64,
    pub trace: Vec<Observation>,
}

/// Latin-hypercube sample of `n` points inside `bounds`.
pub fn latin_hypercube(n: usize, bounds: &[(f64, f64)], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; bounds.len()]; n];
    for (dim, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            strata.swap(i, j);
        }
        for (p, s) in pts.iter_mut().zip(strata) {
            let u = (s as f64 + rng.gen::<f64>()) / n as f64;
            p[dim] = (lo + u * (hi - lo)).clamp(lo, hi);
        }
    }
    pts
}

/// Maximizes `objective` over the configured box.
pub fn tune<F>(mut objective: F, cfg: &TunerConfig) -> Result<TuneResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut designs: Vec<Vec<f64>> = cfg
        .warm_start
        .iter()
        .take(cfg.initial_designs)
        .map(|p| {
            p.iter()
                .zip(&cfg.bounds)
                .map(|(x, (lo, hi))| x.clamp(*lo, *hi))
                .collect()
        })
        .collect();
    let n_lhs = cfg.initial_designs - designs.len();
    designs.extend(latin_hypercube(n_lhs, &cfg.bounds, &mut rng));

    let mut observations: Vec<(Vec<f64>, f64)> = Vec::with_capacity(cfg.budget);
    let mut trace: Vec<Observation> = Vec::with_capacity(cfg.budget);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut gp = GpSurrogate::new(cfg.bounds.clone())?;

    let mut evaluate = |theta: Vec<f64>,
                        observations: &mut Vec<(Vec<f64>, f64)>,
                        trace: &mut Vec<Observation>,
                        best: &mut Option<(Vec<f64>, f64)>|
     -> Result<()> {
        let value = objective(&theta).map_err(|e| match e {
            e @ Error::ObjectiveFailure { .. } => e,
            other => Error::ObjectiveFailure {
                theta: theta.clone(),
                message: other.to_string(),
            },
        })?;
        if !value.is_finite() {
            return Err(Error::ObjectiveFailure {
                theta,
                message: format!("objective returned {value}"),
            });
        }
        if best.as_ref().map_or(true, |b| value > b.1) {
            *best = Some((theta.clone(), value));
        }
        trace.push(Observation {
            iteration: trace.len() + 1,
            theta: theta.clone(),
            objective: value,
            incumbent: best.as_ref().map_or(value, |b| b.1),
        });
        observations.push((theta, value));
        Ok(())
    };

    for theta in designs {
        evaluate(theta, &mut observations, &mut trace, &mut best)?;
    }
    while trace.len() < cfg.budget {
        gp.fit(&observations)?;
        let incumbent = best.as_ref().map_or(0.0, |b| b.1);
        let theta = gp.propose_next(incumbent, cfg.random_starts, &mut rng)?;
        log::debug!("tuner iteration {}: proposing {:?}", trace.len() + 1, theta);
        evaluate(theta, &mut observations, &mut trace, &mut best)?;
    }
    let (best_theta, best_value) = best.ok_or(Error::UnfittedSurrogate)?;
    Ok(TuneResult {
        best_theta,
        best_value,
        trace,
    })
}

/// Tunes a [`WeightVector`]; `cfg.bounds` must have five entries.
pub fn tune_weights<F>(mut objective: F, cfg: &TunerConfig) -> Result<(WeightVector, f64, Vec<Observation>)>
where
    F: FnMut(&WeightVector) -> Result<f64>,
{
    if cfg.bounds.len() != 5 {
        return Err(Error::DimensionMismatch {
            expected: 5,
            actual: cfg.bounds.len(),
        });
    }
    let res = tune(|theta| objective(&WeightVector::from_slice(theta)?), cfg)?;
    Ok((WeightVector::from_slice(&res.best_theta)?, res.best_value, res.trace))
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[Observation]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for o in trace {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
