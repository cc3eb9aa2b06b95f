//! Inverse optimization by polar-cone refinement.
//!
//! The observed schedule is optimal for `θ` exactly when
//! `θᵀ(F(g) − F(g_obs)) ≥ 0` for every feasible `g`, where `F` maps a
//! schedule to per-unit energy and start counts so that `θᵀF(g)` is the UC
//! objective. Starting from the prior box, each iteration projects a fresh
//! prior draw onto the current outer approximation, re-solves the UC at the
//! projected point and either stops (the observation is ε-optimal) or adds
//! the violated cut.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::{parallel_map, sample_prior, CostParams, Observation, PriorConfig};
use crate::milp::{solve_lp, LinearProgram, LpError, LpStatus, MilpOptions, Sense};
use crate::scuc::{derive_startups, solve_uc_with, Availability, Schedule, ScucError};
use crate::system::UcInstance;

/// Dispatch at or below this is treated as exactly zero.
const ZERO_MW: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InverseError {
    #[error(transparent)]
    Scuc(#[from] ScucError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("ambiguous commitment for generator {gen} in period {period}: dispatch {value} MW")]
    AmbiguousCommitment { period: usize, gen: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// No cost vector in the box satisfies the accumulated cuts; the
    /// observation is not optimal for any admissible θ.
    #[error("polar cone approximation became empty after {iterations} iterations")]
    InfeasibleCone {
        iterations: usize,
        last: Option<CostParams>,
    },
}

/// `F(g)`: energy (MWh) and start count per generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFeatures {
    pub energy: Vec<f64>,
    pub starts: Vec<u32>,
}

impl ScheduleFeatures {
    /// `[energy.., starts..]`, aligned with [`CostParams::to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        self.energy
            .iter()
            .copied()
            .chain(self.starts.iter().map(|&s| s as f64))
            .collect()
    }

    /// `θᵀF`.
    pub fn cost(&self, theta: &CostParams) -> f64 {
        let e: f64 = theta.marginal.iter().zip(&self.energy).map(|(c, e)| c * e).sum();
        let s: f64 = theta.startup.iter().zip(&self.starts).map(|(s, n)| s * *n as f64).sum();
        e + s
    }
}

pub fn features(schedule: &Schedule) -> ScheduleFeatures {
    let energy = schedule.dispatch.sum_axis(ndarray::Axis(0)).to_vec();
    let starts = schedule
        .startup
        .sum_axis(ndarray::Axis(0))
        .iter()
        .map(|&n| n as u32)
        .collect();
    ScheduleFeatures { energy, starts }
}

/// Commitment recovered from dispatch alone: a unit is on when it produces
/// more than `tol` MW. Requires `g_min > tol` for every unit.
pub fn derive_commitment(dispatch: &Array2<f64>, tol: f64) -> Result<Array2<u8>, InverseError> {
    let mut v = Array2::zeros(dispatch.dim());
    for ((t, j), &g) in dispatch.indexed_iter() {
        if g > tol {
            v[[t, j]] = 1;
        } else if g > ZERO_MW {
            return Err(InverseError::AmbiguousCommitment { period: t, gen: j, value: g });
        }
    }
    Ok(v)
}

pub fn derive_observed_features(
    dispatch: &Array2<f64>,
    inst: &UcInstance,
    tol: f64,
) -> Result<ScheduleFeatures, InverseError> {
    let (nt, nj) = dispatch.dim();
    if nt != inst.horizon || nj != inst.network.num_generators() {
        return Err(InverseError::Dimension(format!(
            "dispatch is {nt}x{nj}, instance has T={} J={}",
            inst.horizon,
            inst.network.num_generators()
        )));
    }
    let v = derive_commitment(dispatch, tol)?;
    let v_init: Vec<u8> = inst.network.generators.iter().map(|g| g.v_init).collect();
    let (y, _) = derive_startups(&v, &v_init);
    let energy = dispatch.sum_axis(ndarray::Axis(0)).to_vec();
    let starts = y.sum_axis(ndarray::Axis(0)).iter().map(|&n| n as u32).collect();
    Ok(ScheduleFeatures { energy, starts })
}

/// Outer approximation `Θ⁽ᵏ⁾`: the prior box cut by half-spaces `θᵀd ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarConeApprox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cuts: Vec<Vec<f64>>,
}

impl PolarConeApprox {
    pub fn from_prior(prior: &PriorConfig, j: usize) -> Self {
        let (lo, hi) = prior.bounds(j);
        Self { lo, hi, cuts: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn width(&self, i: usize) -> f64 {
        let w = self.hi[i] - self.lo[i];
        if w > 0.0 {
            w
        } else {
            1.0
        }
    }

    /// Whether `theta` lies in the box and satisfies every cut to `tol`
    /// (cuts are compared after scaling to unit box widths).
    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        let in_box = theta
            .iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i] - tol * self.width(i) && v <= self.hi[i] + tol * self.width(i));
        in_box
            && self.cuts.iter().all(|d| {
                let scale = self.cut_scale(d);
                d.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() / scale >= -tol
            })
    }

    fn cut_scale(&self, d: &[f64]) -> f64 {
        let s = d
            .iter()
            .enumerate()
            .fold(0.0f64, |a, (i, v)| a.max((v * self.width(i)).abs()));
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn add_cut(&mut self, d: Vec<f64>) {
        self.cuts.push(d);
    }
}

/// Projection of `theta_ref` onto `cone` in the width-scaled L1 norm
/// `Σ |θ_i − ref_i| / w_i`. Among L1 minimizers the one with the smallest
/// scaled L∞ distance is returned, which makes the answer unique in the
/// usual symmetric cases.
pub fn project(theta_ref: &[f64], cone: &PolarConeApprox) -> Result<Option<Vec<f64>>, InverseError> {
    let p = cone.dim();
    if theta_ref.len() != p {
        return Err(InverseError::Dimension(format!(
            "reference has {} entries, cone has {p}",
            theta_ref.len()
        )));
    }
    if cone.contains(theta_ref, 0.0) {
        return Ok(Some(theta_ref.to_vec()));
    }

    // Variables u_i = (θ_i − lo_i) / w_i ∈ [0, 1], deviations t_i ≥ |u_i − r_i|, and m ≥ t_i.
    let r: Vec<f64> = (0..p).map(|i| (theta_ref[i] - cone.lo[i]) / cone.width(i)).collect();
    let mut lp = LinearProgram::new();
    let u: Vec<usize> = (0..p)
        .map(|i| {
            let hi = if cone.hi[i] > cone.lo[i] { 1.0 } else { 0.0 };
            lp.add_var(format!("u{i}"), 0.0, hi, 0.0)
        })
        .collect();
    let t: Vec<usize> = (0..p).map(|i| lp.add_var(format!("t{i}"), 0.0, f64::INFINITY, 1.0)).collect();
    let m = lp.add_var("m", 0.0, f64::INFINITY, 0.0);
    for i in 0..p {
        lp.add_constraint(format!("dev_up{i}"), &[(t[i], 1.0), (u[i], -1.0)], Sense::Ge, -r[i]);
        lp.add_constraint(format!("dev_dn{i}"), &[(t[i], 1.0), (u[i], 1.0)], Sense::Ge, r[i]);
        lp.add_constraint(format!("max{i}"), &[(m, 1.0), (t[i], -1.0)], Sense::Ge, 0.0);
    }
    for (k, d) in cone.cuts.iter().enumerate() {
        let scale = cone.cut_scale(d);
        let row: Vec<(usize, f64)> = (0..p).map(|i| (u[i], d[i] * cone.width(i) / scale)).collect();
        let rhs = -(0..p).map(|i| d[i] * cone.lo[i]).sum::<f64>() / scale;
        lp.add_constraint(format!("cut{k}"), &row, Sense::Ge, rhs);
    }

    let opts = Default::default();
    let first = solve_lp(&lp, &opts)?;
    if first.status != LpStatus::Optimal {
        return Ok(None);
    }
    // Second stage: keep the L1 distance, minimize the largest deviation.
    let l1 = first.objective;
    let row: Vec<(usize, f64)> = t.iter().map(|&ti| (ti, 1.0)).collect();
    lp.add_constraint("l1", &row, Sense::Le, l1 + 1e-9 * (1.0 + l1));
    // A small weight on the deviations keeps the L1 row tight.
    for &ti in &t {
        lp.objective[ti] = 1e-6;
    }
    lp.objective[m] = 1.0;
    let second = solve_lp(&lp, &opts)?;
    let x = if second.status == LpStatus::Optimal { second.primal } else { first.primal };
    Ok(Some(
        (0..p)
            .map(|i| {
                let v = cone.lo[i] + cone.width(i) * x[u[i]].clamp(0.0, 1.0);
                if cone.hi[i] > cone.lo[i] {
                    v.clamp(cone.lo[i], cone.hi[i])
                } else {
                    cone.lo[i]
                }
            })
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseOptions {
    pub eps: f64,
    pub max_iter: usize,
    /// Dispatch above this many MW counts as committed.
    pub commit_tol: f64,
    /// Options for the UC re-solves.
    pub solver: MilpOptions,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_iter: 100_000,
            commit_tol: 1e-4,
            solver: MilpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseResult {
    pub theta_hat: CostParams,
    pub iterations: usize,
    /// `θ̂ᵀ(F(g⁽ᵏ⁾) − F(g_obs))` at the returned iterate.
    pub final_violation: f64,
    pub converged: bool,
    pub num_cuts: usize,
}

/// The cone and the iterate that produced each cut, for auditing a run.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseTrace {
    pub cone: PolarConeApprox,
    pub cut_points: Vec<Vec<f64>>,
}

/// Runs the cutting-plane loop on one observation. The UC is re-solved
/// with every unit and line available and the observed demand.
pub fn estimate<R: Rng + ?Sized>(
    inst: &UcInstance,
    obs: &Observation,
    prior: &PriorConfig,
    opts: &InverseOptions,
    rng: &mut R,
) -> Result<InverseResult, InverseError> {
    estimate_traced(inst, obs, prior, opts, rng).map(|(r, _)| r)
}

pub fn estimate_traced<R: Rng + ?Sized>(
    inst: &UcInstance,
    obs: &Observation,
    prior: &PriorConfig,
    opts: &InverseOptions,
    rng: &mut R,
) -> Result<(InverseResult, InverseTrace), InverseError> {
    let nj = inst.network.num_generators();
    let f_obs = derive_observed_features(&obs.dispatch, inst, opts.commit_tol)?;
    let f_obs_vec = f_obs.to_vec();
    let avail = Availability::all(inst);
    let mut cone = PolarConeApprox::from_prior(prior, nj);
    let mut cut_points = Vec::new();
    let mut best: Option<(f64, CostParams)> = None;
    let mut last = None;

    for k in 1..=opts.max_iter {
        let reference = sample_prior(prior, nj, rng).to_vec();
        let Some(theta) = project(&reference, &cone)? else {
            return Err(InverseError::InfeasibleCone {
                iterations: k - 1,
                last: best.map(|(_, t)| t).or(last),
            });
        };
        let theta_cp = CostParams::from_slice(&theta);
        let g = solve_uc_with(inst, &theta_cp, &avail, &obs.demand, &opts.solver)?;
        let d: Vec<f64> = features(&g).to_vec().iter().zip(&f_obs_vec).map(|(a, b)| a - b).collect();
        let check: f64 = theta.iter().zip(&d).map(|(a, b)| a * b).sum();
        if check >= -opts.eps {
            let result = InverseResult {
                theta_hat: theta_cp,
                iterations: k,
                final_violation: check,
                converged: true,
                num_cuts: cone.cuts.len(),
            };
            return Ok((result, InverseTrace { cone, cut_points }));
        }
        if best.as_ref().is_none_or(|(b, _)| check > *b) {
            best = Some((check, theta_cp.clone()));
        }
        last = Some(theta_cp);
        cone.add_cut(d);
        cut_points.push(theta);
    }
    let (check, theta_hat) = best.expect("at least one iteration");
    let result = InverseResult {
        theta_hat,
        iterations: opts.max_iter,
        final_violation: check,
        converged: false,
        num_cuts: cone.cuts.len(),
    };
    Ok((result, InverseTrace { cone, cut_points }))
}

/// Estimates for several observations; observation `i` uses its own RNG
/// seeded with `seeds[i]`, so the result does not depend on `jobs`.
pub fn estimate_many(
    inst: &UcInstance,
    observations: &[Observation],
    prior: &PriorConfig,
    opts: &InverseOptions,
    seeds: &[u64],
    jobs: usize,
) -> Vec<Result<InverseResult, InverseError>> {
    let items: Vec<(usize, u64)> = seeds.iter().copied().enumerate().collect();
    parallel_map(&items, jobs, |&(i, seed)| {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        estimate(inst, &observations[i], prior, opts, &mut rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn all_zero_schedule_has_zero_features() {
        let inst = UcInstance::from_json(include_str!("../data/toy1.sys")).unwrap();
        let f = derive_observed_features(&Array2::zeros((4, 1)), &inst, 1e-4).unwrap();
        assert_eq!(f.energy, vec![0.0]);
        assert_eq!(f.starts, vec![0]);
    }

    #[test]
    fn three_periods_at_100_with_one_start() {
        let inst = UcInstance::from_json(include_str!("../data/toy1.sys")).unwrap();
        let g = array![[0.0], [100.0], [100.0], [100.0]];
        let f = derive_observed_features(&g, &inst, 1e-4).unwrap();
        assert_eq!(f.energy, vec![300.0]);
        assert_eq!(f.starts, vec![1]);
        let theta = CostParams { marginal: vec![20.0], startup: vec![700.0] };
        assert_eq!(f.cost(&theta), 6700.0);
    }

    #[test]
    fn half_tolerance_dispatch_is_ambiguous() {
        let inst = UcInstance::from_json(include_str!("../data/toy1.sys")).unwrap();
        let g = array![[0.0], [5e-5], [50.0], [50.0]];
        match derive_observed_features(&g, &inst, 1e-4) {
            Err(InverseError::AmbiguousCommitment { period: 1, gen: 0, .. }) => {}
            other => panic!("expected ambiguity, got {other:?}"),
        }
    }

    fn cone_2d() -> PolarConeApprox {
        PolarConeApprox { lo: vec![0.0, 0.0], hi: vec![10.0, 10.0], cuts: Vec::new() }
    }

    #[test]
    fn inside_point_is_returned_unchanged() {
        let mut cone = cone_2d();
        cone.add_cut(vec![1.0, -1.0]);
        let p = project(&[7.25, 3.5], &cone).unwrap().unwrap();
        assert_eq!(p, vec![7.25, 3.5]);
    }

    #[test]
    fn no_cuts_clamps_to_box() {
        let p = project(&[-3.0, 12.0], &cone_2d()).unwrap().unwrap();
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 10.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn empty_cone_is_reported() {
        let mut cone = cone_2d();
        // On [1, 10]² the cut -θ1 - θ2 ≥ 0 excludes everything.
        cone.add_cut(vec![-1.0, -1.0]);
        cone.add_cut(vec![-1.0, 0.0]);
        let lo_shift = PolarConeApprox { lo: vec![1.0, 1.0], ..cone };
        assert_eq!(project(&[5.0, 5.0], &lo_shift).unwrap(), None);
    }
}
