//! Self-contained LP and MILP solving.
//!
//! Linear programs are solved with a bounded-variable revised primal simplex
//! (explicit basis inverse, periodic refactorization, Bland's rule after a
//! stall). Mixed-integer programs with binary variables are solved by
//! best-bound branch-and-bound; child nodes are re-optimized with a dual
//! simplex started from the parent's optimal basis.

mod bnb;
mod lpfile;
mod simplex;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bnb::solve_milp;
pub use lpfile::{export_lp_file, write_lp};
pub use simplex::solve_lp;

/// Constraint sense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

impl fmt::Display for Sense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sense::Le => "<=",
            Sense::Eq => "=",
            Sense::Ge => ">=",
        })
    }
}

/// A sparse constraint row `Σ a_j x_j (sense) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub name: String,
}

/// `min c·x` subject to sparse rows and per-variable bounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub bounds: Vec<(f64, f64)>,
    pub var_names: Vec<String>,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Adds a variable and returns its index.
    pub fn add_var(&mut self, name: impl Into<String>, lo: f64, hi: f64, cost: f64) -> usize {
        self.objective.push(cost);
        self.bounds.push((lo, hi));
        self.var_names.push(name.into());
        self.objective.len() - 1
    }

    /// Adds a row; repeated indices are summed and zero coefficients dropped.
    pub fn add_constraint(
        &mut self,
        name: impl Into<String>,
        coeffs: &[(usize, f64)],
        sense: Sense,
        rhs: f64,
    ) -> usize {
        let mut row: Vec<(usize, f64)> = coeffs.to_vec();
        row.sort_by_key(|&(j, _)| j);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (j, a) in row {
            match merged.last_mut() {
                Some((k, b)) if *k == j => *b += a,
                _ => merged.push((j, a)),
            }
        }
        merged.retain(|&(_, a)| a != 0.0);
        self.constraints.push(Constraint {
            coeffs: merged,
            sense,
            rhs,
            name: name.into(),
        });
        self.constraints.len() - 1
    }

    pub fn var_name(&self, j: usize) -> String {
        match self.var_names.get(j) {
            Some(n) if !n.is_empty() => n.clone(),
            _ => format!("x{j}"),
        }
    }

    /// Structural checks; returns one message per problem found.
    pub fn check(&self) -> Vec<String> {
        let n = self.objective.len();
        let mut errs = Vec::new();
        if self.bounds.len() != n {
            errs.push(format!("{} bounds for {} variables", self.bounds.len(), n));
        }
        if !self.var_names.is_empty() && self.var_names.len() != n {
            errs.push(format!("{} names for {} variables", self.var_names.len(), n));
        }
        for (j, c) in self.objective.iter().enumerate() {
            if !c.is_finite() {
                errs.push(format!("objective coefficient of variable {j} is not finite"));
            }
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                errs.push(format!("variable {j} has invalid bounds [{lo}, {hi}]"));
            }
        }
        for (i, row) in self.constraints.iter().enumerate() {
            if !row.rhs.is_finite() {
                errs.push(format!("row {i} has non-finite rhs"));
            }
            for &(j, a) in &row.coeffs {
                if j >= n {
                    errs.push(format!("row {i} references variable {j} out of range"));
                } else if !a.is_finite() {
                    errs.push(format!("row {i} has a non-finite coefficient on variable {j}"));
                }
            }
        }
        errs
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest bound or row violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, &(lo, hi)) in x.iter().zip(&self.bounds) {
            worst = worst.max(lo - v).max(v - hi);
        }
        for row in &self.constraints {
            let lhs: f64 = row.coeffs.iter().map(|&(j, a)| a * x[j]).sum();
            let viol = match row.sense {
                Sense::Le => lhs - row.rhs,
                Sense::Ge => row.rhs - lhs,
                Sense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        worst
    }
}

/// A linear program whose listed variables must take values in {0, 1}.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Milp {
    pub lp: LinearProgram,
    pub binaries: Vec<usize>,
}

impl Milp {
    pub fn new(lp: LinearProgram, mut binaries: Vec<usize>) -> Self {
        binaries.sort_unstable();
        binaries.dedup();
        Self { lp, binaries }
    }

    pub fn check(&self) -> Vec<String> {
        let mut errs = self.lp.check();
        let n = self.lp.num_vars();
        for &j in &self.binaries {
            if j >= n {
                errs.push(format!("binary index {j} out of range"));
            } else {
                let (lo, hi) = self.lp.bounds[j];
                if lo < 0.0 || hi > 1.0 {
                    errs.push(format!("binary variable {j} has bounds [{lo}, {hi}] outside [0, 1]"));
                }
            }
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    /// One multiplier per constraint row (sign convention of `min`: `≤` rows
    /// carry non-positive duals, `≥` rows non-negative).
    pub duals: Vec<f64>,
    /// Reduced cost per structural variable.
    pub reduced_costs: Vec<f64>,
    pub iterations: usize,
}

impl LpSolution {
    /// Dual objective `b·y + Σ_j d_j x_j` over the variables held at a bound.
    pub fn dual_objective(&self, lp: &LinearProgram) -> f64 {
        let by: f64 = lp.constraints.iter().zip(&self.duals).map(|(r, y)| r.rhs * y).sum();
        let bound_part: f64 = self
            .reduced_costs
            .iter()
            .zip(&self.primal)
            .map(|(d, x)| d * x)
            .sum();
        by + bound_part
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MilpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct MilpSolution {
    pub status: MilpStatus,
    pub primal: Vec<f64>,
    pub objective: f64,
    pub best_bound: f64,
    pub nodes_explored: usize,
    pub gap: f64,
    /// `(node, incumbent objective, best bound)` after each processed node.
    pub trace: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpOptions {
    pub tol_feas: f64,
    pub max_iter: usize,
    pub refactor_every: usize,
    pub bland_after: usize,
}

impl Default for LpOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-7,
            max_iter: 50_000,
            refactor_every: 100,
            bland_after: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilpOptions {
    pub tol_int: f64,
    /// Absolute optimality gap.
    pub gap: f64,
    pub node_limit: usize,
    /// Re-optimize child nodes from the parent basis with dual simplex.
    pub warm_start: bool,
    pub lp: LpOptions,
}

impl Default for MilpOptions {
    fn default() -> Self {
        Self {
            tol_int: 1e-6,
            gap: 1e-6,
            node_limit: 200_000,
            warm_start: true,
            lp: LpOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LpError {
    #[error("invalid program: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("numerical breakdown at iteration {iteration}: {detail}")]
    NumericalBreakdown { iteration: usize, detail: String },
    #[error("iteration limit {0} reached")]
    IterationLimit(usize),
}

#[derive(Debug, Error)]
pub enum MilpError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("node limit {limit} reached (gap {gap})")]
    NodeLimit {
        limit: usize,
        gap: f64,
        incumbent: Option<Box<MilpSolution>>,
    },
    #[error("root relaxation is unbounded")]
    Unbounded,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
