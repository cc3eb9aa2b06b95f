//! Posterior diagnostics: HPD coverage, posterior predictive bands, corner
//! data export and a rejection-ABC reference posterior.
//!
//! Everything here is written against [`ConditionalDensity`], so the trained
//! mixture network and analytic test densities go through the same code.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::{
    generate_dataset_opts, parallel_map, simulate_opts, CostParams, Dataset, ForwardError, Observation, PriorConfig, Record,
};
use crate::milp::MilpOptions;
use crate::npe::{featurize, split_indices, Mixture, NpeError, PosteriorModel};
use crate::system::UcInstance;

/// Default number of posterior draws per HPD test.
pub const DEFAULT_N_MC: usize = 4096;
/// Default nominal levels for coverage curves.
pub const DEFAULT_LEVELS: [f64; 4] = [0.5, 0.8, 0.9, 0.95];
/// Corner samples must lie within this many prior widths of the box.
pub const CORNER_GUARD_WIDTHS: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Npe(#[from] NpeError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("only {accepted} of {wanted} posterior draws fell inside the prior box after {tried} attempts")]
    Rejection { accepted: usize, wanted: usize, tried: usize },
    #[error("posterior sample {index} lies {widths:.1} prior widths outside the box")]
    Degenerate { index: usize, widths: f64 },
}

/// A density over `θ` for one fixed observation.
pub trait Density {
    fn log_prob(&self, theta: &[f64]) -> f64;
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>>;
}

/// A family of densities indexed by observations.
pub trait ConditionalDensity: Sync {
    type Conditioned: Density;
    fn condition(&self, obs: &Observation) -> Result<Self::Conditioned, DiagnosticsError>;
}

impl Density for Mixture {
    fn log_prob(&self, theta: &[f64]) -> f64 {
        Mixture::log_prob(self, theta)
    }
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        Mixture::sample(self, n, rng)
    }
}

impl ConditionalDensity for PosteriorModel {
    type Conditioned = Mixture;
    fn condition(&self, obs: &Observation) -> Result<Mixture, DiagnosticsError> {
        Ok(PosteriorModel::condition(self, obs)?)
    }
}

/// The `q`-quantile of `sorted` (ascending) with linear interpolation.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Density threshold of the `level` HPD region from ascending sample
/// log-densities: the order statistic at index `⌊(1 − level)·n⌋`.
fn hpd_threshold(sorted_lp: &[f64], level: f64) -> f64 {
    let n = sorted_lp.len();
    let k = (((1.0 - level) * n as f64).floor() as usize).min(n - 1);
    sorted_lp[k]
}

fn sorted_sample_log_probs<D: Density>(d: &D, n_mc: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut lp: Vec<f64> = d.sample(n_mc, rng).iter().map(|t| d.log_prob(t)).collect();
    lp.sort_by(f64::total_cmp);
    lp
}

fn check_level(level: f64) -> Result<(), DiagnosticsError> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(DiagnosticsError::Invalid(format!("level {level} outside (0, 1]")));
    }
    Ok(())
}

/// Sample-based HPD membership: draws `n_mc` samples, takes the
/// `(1 − level)`-quantile of their log-densities as threshold and tests
/// `log q(θ*) ≥ threshold`.
pub fn hpd_contains<D: Density>(
    density: &D,
    theta_star: &[f64],
    level: f64,
    n_mc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<bool, DiagnosticsError> {
    check_level(level)?;
    if n_mc == 0 {
        return Err(DiagnosticsError::Invalid("n_mc must be positive".into()));
    }
    let lp = sorted_sample_log_probs(density, n_mc, rng);
    Ok(density.log_prob(theta_star) >= hpd_threshold(&lp, level))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Binomial standard error `√(p(1 − p)/n)` per level.
    pub stderr: Vec<f64>,
    pub n_test: usize,
}

impl CoverageCurve {
    /// Largest `nominal − empirical` over the levels; positive means the
    /// regions are too narrow (overconfidence).
    pub fn max_deficit(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.empirical)
            .map(|(l, e)| l - e)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV with header `level,empirical,stderr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,empirical,stderr\n");
        for i in 0..self.levels.len() {
            let _ = writeln!(s, "{},{},{}", self.levels[i], self.empirical[i], self.stderr[i]);
        }
        s
    }
}

/// Coverage over given `(θ, x)` test points. Point `i` draws its posterior
/// samples from a ChaCha8 stream seeded with `seed + i`; every level reuses
/// the same samples, so the curve is non-decreasing in the level.
pub fn coverage_from_points<C: ConditionalDensity>(
    model: &C,
    points: &[(Vec<f64>, Observation)],
    levels: &[f64],
    n_mc: usize,
    seed: u64,
    jobs: usize,
) -> Result<CoverageCurve, DiagnosticsError> {
    for &l in levels {
        check_level(l)?;
    }
    if points.is_empty() || n_mc == 0 {
        return Err(DiagnosticsError::Invalid("coverage needs test points and n_mc > 0".into()));
    }
    let idx: Vec<usize> = (0..points.len()).collect();
    let hits = parallel_map(&idx, jobs, |&i| -> Result<Vec<bool>, DiagnosticsError> {
        let (theta, obs) = &points[i];
        let d = model.condition(obs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let lp = sorted_sample_log_probs(&d, n_mc, &mut rng);
        let own = d.log_prob(theta);
        Ok(levels.iter().map(|&l| own >= hpd_threshold(&lp, l)).collect())
    });
    let mut counts = vec![0usize; levels.len()];
    for h in hits {
        for (c, inside) in counts.iter_mut().zip(h?) {
            *c += inside as usize;
        }
    }
    let n = points.len() as f64;
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let stderr = empirical.iter().map(|p| (p * (1.0 - p) / n).sqrt()).collect();
    Ok(CoverageCurve { levels: levels.to_vec(), empirical, stderr, n_test: points.len() })
}

/// Coverage on already simulated records.
pub fn coverage_from_records<C: ConditionalDensity>(
    model: &C,
    records: &[Record],
    levels: &[f64],
    n_mc: usize,
    seed: u64,
    jobs: usize,
) -> Result<CoverageCurve, DiagnosticsError> {
    let points: Vec<(Vec<f64>, Observation)> = records.iter().map(|r| (r.theta.to_vec(), r.obs.clone())).collect();
    coverage_from_points(model, &points, levels, n_mc, seed, jobs)
}

/// The records a model held out for validation, in dataset order.
pub fn validation_records<'a>(ds: &'a Dataset, model: &PosteriorModel) -> Vec<&'a Record> {
    let cfg = &model.meta.config;
    let (_, mut val) = split_indices(ds.len(), cfg.validation_fraction, cfg.seed);
    val.sort_unstable();
    val.into_iter().map(|i| &ds.records[i]).collect()
}

/// Expected coverage on `n_test` fresh simulations: `θ⁽ⁱ⁾` from the prior,
/// `x⁽ⁱ⁾` from the forward model, both keyed by seed `base_seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn expected_coverage<C: ConditionalDensity>(
    model: &C,
    inst: &UcInstance,
    prior: &PriorConfig,
    n_test: usize,
    levels: &[f64],
    n_mc: usize,
    base_seed: u64,
    jobs: usize,
    solver: &MilpOptions,
) -> Result<CoverageCurve, DiagnosticsError> {
    if n_test == 0 {
        return Err(DiagnosticsError::Invalid("n_test must be positive".into()));
    }
    let ds = generate_dataset_opts(inst, prior, n_test, base_seed, false, jobs, solver)?;
    coverage_from_records(model, &ds.records, levels, n_mc, base_seed, jobs)
}

/// Per-cell quantiles of predicted dispatch, MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveBand {
    pub q05: Array2<f64>,
    pub q25: Array2<f64>,
    pub q50: Array2<f64>,
    pub q75: Array2<f64>,
    pub q95: Array2<f64>,
    pub n: usize,
}

impl PredictiveBand {
    /// Fraction of `(t, j)` cells with `q05 − tol ≤ g ≤ q95 + tol`.
    pub fn fraction_inside(&self, dispatch: &Array2<f64>, tol: f64) -> f64 {
        let inside = ndarray::Zip::from(dispatch)
            .and(&self.q05)
            .and(&self.q95)
            .fold(0usize, |acc, &g, &lo, &hi| acc + (g >= lo - tol && g <= hi + tol) as usize);
        inside as f64 / dispatch.len() as f64
    }

    /// CSV with header `t,j,q05,q25,q50,q75,q95`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,j,q05,q25,q50,q75,q95\n");
        let (nt, nj) = self.q50.dim();
        for t in 0..nt {
            for j in 0..nj {
                let c = [t, j];
                let _ = writeln!(
                    s,
                    "{t},{j},{},{},{},{},{}",
                    self.q05[c], self.q25[c], self.q50[c], self.q75[c], self.q95[c]
                );
            }
        }
        s
    }
}

/// Draws `n` posterior samples that fall inside the prior box, rejecting the
/// rest; fails after `max_tries` total draws.
pub fn sample_in_box<D: Density>(
    d: &D,
    prior: &PriorConfig,
    n: usize,
    max_tries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CostParams>, DiagnosticsError> {
    let mut out = Vec::with_capacity(n);
    let mut tried = 0;
    while out.len() < n && tried < max_tries {
        let batch = (n - out.len()).max(64).min(max_tries - tried);
        tried += batch;
        for v in d.sample(batch, rng) {
            let theta = CostParams::from_slice(&v);
            if prior.contains(&theta) && out.len() < n {
                out.push(theta);
            }
        }
    }
    if out.len() < n {
        return Err(DiagnosticsError::Rejection { accepted: out.len(), wanted: n, tried });
    }
    Ok(out)
}

/// Posterior predictive band: `n` draws from `q(θ | x_obs)` restricted to the
/// prior box, each pushed through the forward model with its own seed.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predictive<C: ConditionalDensity>(
    model: &C,
    inst: &UcInstance,
    prior: &PriorConfig,
    x_obs: &Observation,
    n: usize,
    seed: u64,
    jobs: usize,
    solver: &MilpOptions,
) -> Result<PredictiveBand, DiagnosticsError> {
    if n == 0 {
        return Err(DiagnosticsError::Invalid("n must be positive".into()));
    }
    let d = model.condition(x_obs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thetas = sample_in_box(&d, prior, n, 1000 * n, &mut rng)?;
    let jobs_in: Vec<(CostParams, u64)> = thetas.into_iter().map(|t| (t, rng.random::<u64>())).collect();
    let outcomes = parallel_map(&jobs_in, jobs, |(theta, s)| simulate_opts(inst, theta, prior, *s, solver));
    let dispatches = outcomes
        .into_iter()
        .map(|o| o.map(|x| x.schedule.dispatch))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(band_from_dispatches(&dispatches))
}

/// Per-cell quantiles over a set of dispatch matrices of equal shape.
pub fn band_from_dispatches(dispatches: &[Array2<f64>]) -> PredictiveBand {
    let dim = dispatches[0].dim();
    let mut qs: [Array2<f64>; 5] = std::array::from_fn(|_| Array2::zeros(dim));
    let mut cell = Vec::with_capacity(dispatches.len());
    for t in 0..dim.0 {
        for j in 0..dim.1 {
            cell.clear();
            cell.extend(dispatches.iter().map(|g| g[[t, j]]));
            cell.sort_by(f64::total_cmp);
            for (q, p) in qs.iter_mut().zip([0.05, 0.25, 0.5, 0.75, 0.95]) {
                q[[t, j]] = quantile_sorted(&cell, p);
            }
        }
    }
    let [q05, q25, q50, q75, q95] = qs;
    PredictiveBand { q05, q25, q50, q75, q95, n: dispatches.len() }
}

/// Accepted draws of a rejection-ABC run.
#[derive(Debug, Clone, PartialEq)]
pub struct AbcPosterior {
    pub accepted: Vec<CostParams>,
    pub distances: Vec<f64>,
    /// Largest accepted distance.
    pub threshold: f64,
    pub n_draws: usize,
}

impl AbcPosterior {
    pub fn mean(&self) -> Vec<f64> {
        column_stats(&self.accepted).0
    }

    pub fn std(&self) -> Vec<f64> {
        column_stats(&self.accepted).1
    }
}

fn column_stats(thetas: &[CostParams]) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<Vec<f64>> = thetas.iter().map(|t| t.to_vec()).collect();
    let n = rows.len() as f64;
    let p = rows[0].len();
    let mean: Vec<f64> = (0..p).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n).collect();
    let std = (0..p)
        .map(|i| (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Rejection ABC on existing prior-predictive draws: keeps the
/// `⌈accept_frac · n⌉` draws nearest to `x_obs` in L2 distance over the
/// observation features, each feature scaled by its std across the draws
/// (constant features are ignored). Ties go to the earlier draw.
pub fn abc_from_draws(draws: &Dataset, x_obs: &Observation, accept_frac: f64) -> Result<AbcPosterior, DiagnosticsError> {
    if !(accept_frac > 0.0 && accept_frac <= 1.0) {
        return Err(DiagnosticsError::Invalid(format!("accept_frac {accept_frac} outside (0, 1]")));
    }
    if draws.is_empty() {
        return Err(DiagnosticsError::Invalid("no prior draws".into()));
    }
    let feats: Vec<Vec<f64>> = draws.records.iter().map(|r| featurize(&r.obs)).collect();
    let target = featurize(x_obs);
    if target.len() != feats[0].len() {
        return Err(DiagnosticsError::Invalid(format!(
            "observation has {} features, draws have {}",
            target.len(),
            feats[0].len()
        )));
    }
    let n = feats.len() as f64;
    let inv_std: Vec<f64> = (0..target.len())
        .map(|i| {
            let m = feats.iter().map(|f| f[i]).sum::<f64>() / n;
            let s = (feats.iter().map(|f| (f[i] - m).powi(2)).sum::<f64>() / n).sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    let mut dist: Vec<(f64, usize)> = feats
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let d2: f64 = f
                .iter()
                .zip(&target)
                .zip(&inv_std)
                .map(|((a, b), w)| ((a - b) * w).powi(2))
                .sum();
            (d2.sqrt(), k)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((accept_frac * n).ceil() as usize).clamp(1, feats.len());
    let mut accepted_idx: Vec<(f64, usize)> = dist[..keep].to_vec();
    let threshold = accepted_idx.last().map_or(0.0, |d| d.0);
    accepted_idx.sort_by_key(|d| d.1);
    Ok(AbcPosterior {
        accepted: accepted_idx.iter().map(|&(_, k)| draws.records[k].theta.clone()).collect(),
        distances: accepted_idx.iter().map(|d| d.0).collect(),
        threshold,
        n_draws: feats.len(),
    })
}

/// Rejection ABC reference posterior with `n_draws` fresh prior-predictive
/// simulations keyed by seeds `base_seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn abc_reference_posterior(
    inst: &UcInstance,
    prior: &PriorConfig,
    x_obs: &Observation,
    n_draws: usize,
    accept_frac: f64,
    base_seed: u64,
    jobs: usize,
    solver: &MilpOptions,
) -> Result<AbcPosterior, DiagnosticsError> {
    if n_draws == 0 {
        return Err(DiagnosticsError::Invalid("n_draws must be positive".into()));
    }
    let draws = generate_dataset_opts(inst, prior, n_draws, base_seed, false, jobs, solver)?;
    abc_from_draws(&draws, x_obs, accept_frac)
}

/// Data behind a corner plot.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerData {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub theta_star: Option<Vec<f64>>,
    pub theta_invopt: Option<Vec<f64>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub const MARKER_SAMPLE: &str = "sample";
pub const MARKER_TRUE: &str = "theta_star";
pub const MARKER_INVOPT: &str = "theta_invopt";

impl CornerData {
    /// Checks that every sample lies within [`CORNER_GUARD_WIDTHS`] prior
    /// widths of the box.
    pub fn check(&self) -> Result<(), DiagnosticsError> {
        for (index, s) in self.samples.iter().enumerate() {
            for (p, &v) in s.iter().enumerate() {
                let w = (self.hi[p] - self.lo[p]).max(f64::MIN_POSITIVE);
                let out = ((self.lo[p] - v).max(v - self.hi[p])).max(0.0) / w;
                if !(out <= CORNER_GUARD_WIDTHS) {
                    return Err(DiagnosticsError::Degenerate { index, widths: out });
                }
            }
        }
        Ok(())
    }

    /// CSV: the parameter columns and a trailing `marker` column. Values are
    /// printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = self.names.join(",");
        s.push_str(",marker\n");
        let mut row = |v: &[f64], tag: &str| {
            for x in v {
                let _ = write!(s, "{x},");
            }
            s.push_str(tag);
            s.push('\n');
        };
        for v in &self.samples {
            row(v, MARKER_SAMPLE);
        }
        if let Some(t) = &self.theta_star {
            row(t, MARKER_TRUE);
        }
        if let Some(t) = &self.theta_invopt {
            row(t, MARKER_INVOPT);
        }
        s
    }
}

/// Rows of a corner CSV grouped by marker: `(names, rows)`.
pub fn parse_corner_csv(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>), DiagnosticsError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DiagnosticsError::Invalid("empty corner file".into()))?;
    let mut names: Vec<String> = header.split(',').map(str::to_string).collect();
    if names.pop().as_deref() != Some("marker") {
        return Err(DiagnosticsError::Invalid("last column must be 'marker'".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells: Vec<&str> = line.split(',').collect();
        let tag = cells.pop().unwrap_or_default().to_string();
        if cells.len() != names.len() {
            return Err(DiagnosticsError::Invalid(format!("row {} has {} values", i + 1, cells.len())));
        }
        let vals = cells
            .iter()
            .map(|c| c.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DiagnosticsError::Invalid(format!("row {}: {e}", i + 1)))?;
        rows.push((tag, vals));
    }
    Ok((names, rows))
}

/// Samples `n` draws from `q(θ | x_obs)` and writes them with the optional
/// `θ*` and `θ̂` marker rows to `path`.
#[allow(clippy::too_many_arguments)]
pub fn export_corner(
    model: &PosteriorModel,
    prior: &PriorConfig,
    x_obs: &Observation,
    theta_star: Option<&CostParams>,
    theta_invopt: Option<&CostParams>,
    n: usize,
    seed: u64,
    path: &Path,
) -> Result<CornerData, DiagnosticsError> {
    let d = PosteriorModel::condition(model, x_obs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = prior.bounds(model.meta.gens);
    let data = CornerData {
        names: model.meta.param_names.clone(),
        samples: Density::sample(&d, n, &mut rng),
        theta_star: theta_star.map(CostParams::to_vec),
        theta_invopt: theta_invopt.map(CostParams::to_vec),
        lo,
        hi,
    };
    data.check()?;
    fs::write(path, data.to_csv())?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert_eq!(quantile_sorted(&v, 0.125), 0.5);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    }

    #[test]
    fn threshold_extremes() {
        let lp = [-3.0, -2.0, -1.0];
        assert_eq!(hpd_threshold(&lp, 1.0), -3.0);
        assert_eq!(hpd_threshold(&lp, 1e-9), -1.0);
    }

    #[test]
    fn corner_csv_round_trips() {
        let data = CornerData {
            names: vec!["c_a".into(), "s_a".into()],
            samples: vec![vec![0.1 + 0.2, 1e-300]],
            theta_star: Some(vec![std::f64::consts::PI, 1234.5678]),
            theta_invopt: None,
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 1.0],
        };
        let (names, rows) = parse_corner_csv(&data.to_csv()).unwrap();
        assert_eq!(names, data.names);
        assert_eq!(rows[0].1, data.samples[0]);
        assert_eq!(rows[1], (MARKER_TRUE.to_string(), data.theta_star.clone().unwrap()));
    }
}
