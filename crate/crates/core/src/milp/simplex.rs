use std::rc::Rc;

use super::{LinearProgram, LpError, LpOptions, LpSolution, LpStatus, Sense};

const PIV_TOL: f64 = 1e-9;
const SING_TOL: f64 = 1e-11;
const DEGEN_GAIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum VarState {
    Basic,
    Lower,
    Upper,
    /// Nonbasic free variable held at zero.
    Free,
}

/// Everything needed to restart from a basis.
#[derive(Clone, Debug)]
pub(crate) struct BasisSnapshot {
    heads: Vec<usize>,
    state: Vec<VarState>,
    art_sign: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Revised simplex over the columns `[A | I | diag(art_sign)]`.
///
/// Column `n + i` is the logical of row `i` (row reads `a·x + s = b`), column
/// `n + m + i` its artificial. `binv` stores the basis inverse column-major.
pub(crate) struct Engine {
    m: usize,
    n: usize,
    col_start: Vec<usize>,
    col_rows: Vec<usize>,
    col_vals: Vec<f64>,
    art_sign: Vec<f64>,
    cost: Vec<f64>,
    root_lo: Vec<f64>,
    root_hi: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    b: Vec<f64>,
    x: Vec<f64>,
    state: Vec<VarState>,
    heads: Vec<usize>,
    binv: Vec<f64>,
    y: Vec<f64>,
    opts: LpOptions,
    since_refactor: usize,
    pub(crate) iterations: usize,
    loaded: Option<Rc<BasisSnapshot>>,
}

impl Engine {
    pub(crate) fn new(lp: &LinearProgram, opts: LpOptions) -> Self {
        let m = lp.num_constraints();
        let n = lp.num_vars();
        let mut counts = vec![0usize; n + 1];
        for row in &lp.constraints {
            for &(j, _) in &row.coeffs {
                counts[j + 1] += 1;
            }
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let col_start = counts.clone();
        let nnz = col_start[n];
        let mut fill = col_start.clone();
        let mut col_rows = vec![0usize; nnz];
        let mut col_vals = vec![0.0; nnz];
        for (i, row) in lp.constraints.iter().enumerate() {
            for &(j, a) in &row.coeffs {
                col_rows[fill[j]] = i;
                col_vals[fill[j]] = a;
                fill[j] += 1;
            }
        }

        let ncols = n + 2 * m;
        let mut cost = vec![0.0; ncols];
        cost[..n].copy_from_slice(&lp.objective);
        let mut root_lo = vec![0.0; ncols];
        let mut root_hi = vec![0.0; ncols];
        for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
            root_lo[j] = lo;
            root_hi[j] = hi;
        }
        for (i, row) in lp.constraints.iter().enumerate() {
            let (lo, hi) = match row.sense {
                Sense::Le => (0.0, f64::INFINITY),
                Sense::Ge => (f64::NEG_INFINITY, 0.0),
                Sense::Eq => (0.0, 0.0),
            };
            root_lo[n + i] = lo;
            root_hi[n + i] = hi;
        }
        let b = lp.constraints.iter().map(|r| r.rhs).collect();
        Self {
            m,
            n,
            col_start,
            col_rows,
            col_vals,
            art_sign: vec![1.0; m],
            cost,
            lo: root_lo.clone(),
            hi: root_hi.clone(),
            root_lo,
            root_hi,
            b,
            x: vec![0.0; ncols],
            state: vec![VarState::Lower; ncols],
            heads: Vec::new(),
            binv: Vec::new(),
            y: vec![0.0; m],
            opts,
            since_refactor: 0,
            iterations: 0,
            loaded: None,
        }
    }

    #[inline]
    fn for_col(&self, j: usize, mut f: impl FnMut(usize, f64)) {
        if j < self.n {
            for k in self.col_start[j]..self.col_start[j + 1] {
                f(self.col_rows[k], self.col_vals[k]);
            }
        } else if j < self.n + self.m {
            f(j - self.n, 1.0);
        } else {
            let i = j - self.n - self.m;
            f(i, self.art_sign[i]);
        }
    }

    #[inline]
    fn dot_y(&self, j: usize) -> f64 {
        let mut s = 0.0;
        self.for_col(j, |r, v| s += self.y[r] * v);
        s
    }

    /// Restores root bounds on structurals and fixes the listed variables.
    pub(crate) fn set_fixings(&mut self, fixings: &[(usize, f64)]) {
        self.lo[..self.n].copy_from_slice(&self.root_lo[..self.n]);
        self.hi[..self.n].copy_from_slice(&self.root_hi[..self.n]);
        for &(j, v) in fixings {
            self.lo[j] = v;
            self.hi[j] = v;
        }
    }

    fn initial_value(lo: f64, hi: f64) -> (f64, VarState) {
        if lo.is_finite() {
            (lo, VarState::Lower)
        } else if hi.is_finite() {
            (hi, VarState::Upper)
        } else {
            (0.0, VarState::Free)
        }
    }

    /// Crash basis: logicals where they are feasible, artificials elsewhere.
    /// Returns whether any artificial is active.
    fn cold_start(&mut self) -> bool {
        let (m, n) = (self.m, self.n);
        for j in 0..n {
            let (v, s) = Self::initial_value(self.lo[j], self.hi[j]);
            self.x[j] = v;
            self.state[j] = s;
        }
        let mut resid = self.b.clone();
        for j in 0..n {
            let xj = self.x[j];
            if xj != 0.0 {
                for k in self.col_start[j]..self.col_start[j + 1] {
                    resid[self.col_rows[k]] -= self.col_vals[k] * xj;
                }
            }
        }
        self.heads = vec![0; m];
        self.binv = vec![0.0; m * m];
        let mut any_art = false;
        let tol = self.opts.tol_feas;
        for i in 0..m {
            let (sl, sh) = (self.root_lo[n + i], self.root_hi[n + i]);
            let r = resid[i];
            let ai = n + m + i;
            if r >= sl - tol && r <= sh + tol {
                self.heads[i] = n + i;
                self.state[n + i] = VarState::Basic;
                self.x[n + i] = r;
                self.art_sign[i] = 1.0;
                self.lo[ai] = 0.0;
                self.hi[ai] = 0.0;
                self.state[ai] = VarState::Lower;
                self.x[ai] = 0.0;
                self.binv[i * m + i] = 1.0;
            } else {
                let p = r.clamp(sl, sh);
                self.x[n + i] = p;
                self.state[n + i] = if p == sl { VarState::Lower } else { VarState::Upper };
                let sign = if r > p { 1.0 } else { -1.0 };
                self.art_sign[i] = sign;
                self.heads[i] = ai;
                self.state[ai] = VarState::Basic;
                self.x[ai] = (r - p).abs();
                self.lo[ai] = 0.0;
                self.hi[ai] = f64::INFINITY;
                self.binv[i * m + i] = sign;
                any_art = true;
            }
            self.lo[n + i] = sl;
            self.hi[n + i] = sh;
        }
        self.since_refactor = 0;
        self.loaded = None;
        any_art
    }

    /// Rebuilds the explicit basis inverse by Gauss-Jordan elimination.
    fn refactor(&mut self) -> Result<(), LpError> {
        let m = self.m;
        let mut a = vec![0.0; m * m];
        for (c, &j) in self.heads.iter().enumerate() {
            let mut entries = Vec::new();
            self.for_col(j, |r, v| entries.push((r, v)));
            for (r, v) in entries {
                a[r * m + c] = v;
            }
        }
        let mut inv = vec![0.0; m * m];
        for i in 0..m {
            inv[i * m + i] = 1.0;
        }
        for c in 0..m {
            let mut p = c;
            let mut best = a[c * m + c].abs();
            for r in c + 1..m {
                let v = a[r * m + c].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best < SING_TOL {
                return Err(LpError::NumericalBreakdown {
                    iteration: self.iterations,
                    detail: format!("singular basis at column {c} (pivot {best:e})"),
                });
            }
            if p != c {
                for k in 0..m {
                    a.swap(p * m + k, c * m + k);
                    inv.swap(p * m + k, c * m + k);
                }
            }
            let piv = a[c * m + c];
            for k in 0..m {
                a[c * m + k] /= piv;
                inv[c * m + k] /= piv;
            }
            let (arow, irow) = (a[c * m..(c + 1) * m].to_vec(), inv[c * m..(c + 1) * m].to_vec());
            let a_nz: Vec<usize> = (0..m).filter(|&k| arow[k] != 0.0).collect();
            let i_nz: Vec<usize> = (0..m).filter(|&k| irow[k] != 0.0).collect();
            for r in 0..m {
                if r == c {
                    continue;
                }
                let f = a[r * m + c];
                if f == 0.0 {
                    continue;
                }
                for &k in &a_nz {
                    a[r * m + k] -= f * arow[k];
                }
                for &k in &i_nz {
                    inv[r * m + k] -= f * irow[k];
                }
            }
        }
        // inv is B^{-1} row-major (rows indexed by basis position).
        for i in 0..m {
            for k in 0..m {
                self.binv[k * m + i] = inv[i * m + k];
            }
        }
        self.since_refactor = 0;
        Ok(())
    }

    fn compute_xb(&mut self) {
        let m = self.m;
        let mut rhs = self.b.clone();
        let ncols = self.n + 2 * m;
        for j in 0..ncols {
            if self.state[j] != VarState::Basic {
                let xj = self.x[j];
                if xj != 0.0 {
                    let mut e = Vec::new();
                    self.for_col(j, |r, v| e.push((r, v)));
                    for (r, v) in e {
                        rhs[r] -= v * xj;
                    }
                }
            }
        }
        let mut xb = vec![0.0; m];
        for (k, &rk) in rhs.iter().enumerate() {
            if rk != 0.0 {
                let col = &self.binv[k * m..(k + 1) * m];
                for i in 0..m {
                    xb[i] += col[i] * rk;
                }
            }
        }
        for i in 0..m {
            self.x[self.heads[i]] = xb[i];
        }
    }

    fn compute_y(&mut self, cost: &[f64]) {
        let m = self.m;
        for k in 0..m {
            let col = &self.binv[k * m..(k + 1) * m];
            let mut s = 0.0;
            for i in 0..m {
                let c = cost[self.heads[i]];
                if c != 0.0 {
                    s += c * col[i];
                }
            }
            self.y[k] = s;
        }
    }

    fn ftran(&self, j: usize, out: &mut [f64]) {
        let m = self.m;
        out.iter_mut().for_each(|v| *v = 0.0);
        self.for_col(j, |k, v| {
            let col = &self.binv[k * m..(k + 1) * m];
            for i in 0..m {
                out[i] += col[i] * v;
            }
        });
    }

    fn binv_row(&self, r: usize, out: &mut [f64]) {
        let m = self.m;
        for k in 0..m {
            out[k] = self.binv[k * m + r];
        }
    }

    /// Basis change: column `q` enters at position `r`. Updates `binv` and `y`.
    fn pivot(&mut self, r: usize, q: usize, alpha: &[f64], d_q: f64) {
        let m = self.m;
        let ar = alpha[r];
        let nz: Vec<usize> = (0..m).filter(|&i| i != r && alpha[i] != 0.0).collect();
        let ratio = d_q / ar;
        for k in 0..m {
            let p = self.binv[k * m + r];
            if p == 0.0 {
                continue;
            }
            // y += (d_q / alpha_r) * row_r(B^{-1}) using the pre-update row.
            self.y[k] += ratio * p;
            let p = p / ar;
            self.binv[k * m + r] = p;
            let col = &mut self.binv[k * m..(k + 1) * m];
            for &i in &nz {
                col[i] -= alpha[i] * p;
            }
        }
        self.heads[r] = q;
        self.since_refactor += 1;
        self.loaded = None;
    }

    fn refresh(&mut self, cost: &[f64]) -> Result<(), LpError> {
        self.refactor()?;
        self.compute_xb();
        self.compute_y(cost);
        Ok(())
    }

    fn cost_tol(cost: &[f64]) -> f64 {
        let scale = cost.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        1e-9 * scale
    }

    /// Primal simplex on the current basis, which must be primal feasible.
    fn primal(&mut self, cost: &[f64]) -> Result<Outcome, LpError> {
        let m = self.m;
        let ncols = self.n + 2 * m;
        let dtol = Self::cost_tol(cost);
        let tol = self.opts.tol_feas;
        let mut alpha = vec![0.0; m];
        let mut degenerate = 0usize;
        let mut bland = false;
        self.compute_y(cost);
        let mut verified = false;
        let start = self.iterations;
        let obj_scale = self.b.iter().fold(0.0f64, |a, v| a.max(v.abs())) * cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let objective = |x: &[f64]| -> f64 { cost.iter().zip(x).map(|(c, v)| c * v).sum() };
        let mut obj = objective(&self.x);
        let mut best_obj = obj;
        loop {
            if self.iterations - start >= self.opts.max_iter {
                return Err(LpError::IterationLimit(self.opts.max_iter));
            }
            if self.since_refactor >= self.opts.refactor_every {
                self.refresh(cost)?;
                obj = objective(&self.x);
            }
            // Pricing.
            let mut enter: Option<(usize, f64, f64)> = None;
            for j in 0..ncols {
                let st = self.state[j];
                if st == VarState::Basic || self.lo[j] == self.hi[j] {
                    continue;
                }
                let d = cost[j] - self.dot_y(j);
                let dir = match st {
                    VarState::Lower if d < -dtol => 1.0,
                    VarState::Upper if d > dtol => -1.0,
                    VarState::Free if d.abs() > dtol => -d.signum(),
                    _ => continue,
                };
                if bland {
                    enter = Some((j, dir, d));
                    break;
                }
                if enter.is_none_or(|(_, _, dbest)| d.abs() > dbest.abs()) {
                    enter = Some((j, dir, d));
                }
            }
            let Some((q, dir, d_q)) = enter else {
                if self.since_refactor > 0 && !verified {
                    self.refresh(cost)?;
                    obj = objective(&self.x);
                    verified = true;
                    continue;
                }
                return Ok(Outcome::Optimal);
            };
            verified = false;
            self.ftran(q, &mut alpha);

            // Harris two-pass ratio test.
            let mut relaxed = f64::INFINITY;
            for i in 0..m {
                let a = alpha[i];
                if a.abs() <= PIV_TOL {
                    continue;
                }
                let h = self.heads[i];
                let rate = -dir * a;
                let lim = if rate < 0.0 {
                    if self.lo[h].is_finite() {
                        (self.x[h] - self.lo[h] + tol) / -rate
                    } else {
                        continue;
                    }
                } else if self.hi[h].is_finite() {
                    (self.hi[h] + tol - self.x[h]) / rate
                } else {
                    continue;
                };
                relaxed = relaxed.min(lim);
            }
            let mut leave: Option<(usize, f64, bool)> = None;
            let mut best_key = f64::NEG_INFINITY;
            for i in 0..m {
                let a = alpha[i];
                if a.abs() <= PIV_TOL {
                    continue;
                }
                let h = self.heads[i];
                let rate = -dir * a;
                let (lim, to_upper) = if rate < 0.0 {
                    if !self.lo[h].is_finite() {
                        continue;
                    }
                    ((self.x[h] - self.lo[h]) / -rate, false)
                } else {
                    if !self.hi[h].is_finite() {
                        continue;
                    }
                    ((self.hi[h] - self.x[h]) / rate, true)
                };
                if bland {
                    let better = match leave {
                        None => true,
                        Some((li, lt, _)) => {
                            lim < lt - 1e-12 || (lim <= lt + 1e-12 && h < self.heads[li])
                        }
                    };
                    if better {
                        leave = Some((i, lim, to_upper));
                    }
                } else if lim <= relaxed && a.abs() > best_key {
                    best_key = a.abs();
                    leave = Some((i, lim, to_upper));
                }
            }
            let flip = self.hi[q] - self.lo[q];
            let step_row = leave.map(|(_, t, _)| t.max(0.0));
            let do_flip = flip.is_finite() && step_row.is_none_or(|t| flip <= t);
            if !do_flip && leave.is_none() {
                return Ok(Outcome::Unbounded);
            }
            self.iterations += 1;
            let t = if do_flip { flip } else { step_row.unwrap() };
            // Progress is judged on the best objective reached: Harris steps
            // can show a small gain that a refactorization takes back.
            obj -= d_q.abs() * t;
            if obj < best_obj - DEGEN_GAIN * (1.0 + obj_scale) {
                best_obj = obj;
                degenerate = 0;
            } else {
                degenerate += 1;
                if degenerate >= self.opts.bland_after {
                    bland = true;
                }
            }
            if t != 0.0 {
                for i in 0..m {
                    if alpha[i] != 0.0 {
                        let h = self.heads[i];
                        self.x[h] -= dir * t * alpha[i];
                    }
                }
                self.x[q] += dir * t;
            }
            if do_flip {
                if dir > 0.0 {
                    self.x[q] = self.hi[q];
                    self.state[q] = VarState::Upper;
                } else {
                    self.x[q] = self.lo[q];
                    self.state[q] = VarState::Lower;
                }
                continue;
            }
            let (r, _, to_upper) = leave.unwrap();
            let h = self.heads[r];
            if to_upper {
                self.x[h] = self.hi[h];
                self.state[h] = VarState::Upper;
            } else {
                self.x[h] = self.lo[h];
                self.state[h] = VarState::Lower;
            }
            self.state[q] = VarState::Basic;
            self.pivot(r, q, &alpha, d_q);
        }
    }

    /// Dual simplex from a dual feasible basis. `Ok(None)` means it gave up
    /// (iteration budget) and the caller should cold start.
    fn dual(&mut self, cost: &[f64], budget: usize) -> Result<Option<Outcome>, LpError> {
        let m = self.m;
        let ncols = self.n + 2 * m;
        let tol = self.opts.tol_feas;
        let mut rho = vec![0.0; m];
        let mut alpha = vec![0.0; m];
        let mut d = vec![0.0; ncols];
        let mut used = 0usize;
        let mut rechecked = false;
        loop {
            if used >= budget {
                return Ok(None);
            }
            if self.since_refactor >= self.opts.refactor_every {
                self.refresh(cost)?;
            }
            let mut leave: Option<(usize, f64)> = None;
            let mut worst = tol;
            for i in 0..m {
                let h = self.heads[i];
                let v = self.x[h];
                let inf = if v < self.lo[h] - tol {
                    self.lo[h] - v
                } else if v > self.hi[h] + tol {
                    v - self.hi[h]
                } else {
                    continue;
                };
                if inf > worst {
                    worst = inf;
                    leave = Some((i, if v < self.lo[h] { self.lo[h] } else { self.hi[h] }));
                }
            }
            let Some((r, target)) = leave else {
                return Ok(Some(Outcome::Optimal));
            };
            let h = self.heads[r];
            let increase = self.x[h] < target;
            self.binv_row(r, &mut rho);
            let mut enter: Option<(usize, f64)> = None;
            let mut best_ratio = f64::INFINITY;
            let mut best_piv = 0.0;
            for j in 0..ncols {
                let st = self.state[j];
                if st == VarState::Basic || self.lo[j] == self.hi[j] {
                    continue;
                }
                let mut arj = 0.0;
                self.for_col(j, |k, v| arj += rho[k] * v);
                if arj.abs() <= PIV_TOL {
                    continue;
                }
                // x_r changes by -arj * dx_j.
                let ok = match st {
                    VarState::Lower => (arj < 0.0) == increase,
                    VarState::Upper => (arj > 0.0) == increase,
                    VarState::Free => true,
                    VarState::Basic => false,
                };
                if !ok {
                    continue;
                }
                let dj = cost[j] - self.dot_y(j);
                d[j] = dj;
                let ratio = dj.abs() / arj.abs();
                if ratio < best_ratio - 1e-12 || (ratio <= best_ratio + 1e-12 && arj.abs() > best_piv) {
                    best_ratio = ratio;
                    best_piv = arj.abs();
                    enter = Some((j, arj));
                }
            }
            let Some((q, _)) = enter else {
                if !rechecked && self.since_refactor > 0 {
                    self.refresh(cost)?;
                    rechecked = true;
                    continue;
                }
                return Ok(Some(Outcome::Infeasible));
            };
            rechecked = false;
            self.ftran(q, &mut alpha);
            let ar = alpha[r];
            if ar.abs() <= PIV_TOL {
                self.refresh(cost)?;
                used += 1;
                continue;
            }
            let delta = (self.x[h] - target) / ar;
            for i in 0..m {
                if alpha[i] != 0.0 {
                    let hi = self.heads[i];
                    self.x[hi] -= delta * alpha[i];
                }
            }
            self.x[q] += delta;
            self.x[h] = target;
            self.state[h] = if target == self.lo[h] { VarState::Lower } else { VarState::Upper };
            self.state[q] = VarState::Basic;
            let d_q = d[q];
            self.pivot(r, q, &alpha, d_q);
            self.iterations += 1;
            used += 1;
        }
    }

    fn phase_one_cost(&self) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut c = vec![0.0; n + 2 * m];
        for i in 0..m {
            let a = n + m + i;
            if self.hi[a] > 0.0 {
                c[a] = 1.0;
            }
        }
        c
    }

    fn close_artificials(&mut self) {
        let (n, m) = (self.n, self.m);
        for i in 0..m {
            let a = n + m + i;
            self.lo[a] = 0.0;
            self.hi[a] = 0.0;
            if self.state[a] != VarState::Basic {
                self.x[a] = 0.0;
                self.state[a] = VarState::Lower;
            }
        }
    }

    /// Two-phase primal simplex from scratch under the current bounds.
    pub(crate) fn solve_cold(&mut self) -> Result<Outcome, LpError> {
        if self.cold_start() {
            let c1 = self.phase_one_cost();
            self.primal(&c1)?;
            let infeas: f64 = (0..self.m)
                .map(|i| self.x[self.n + self.m + i].max(0.0))
                .sum();
            let bnorm = self.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if infeas > self.opts.tol_feas * (1.0 + bnorm) {
                self.close_artificials();
                return Ok(Outcome::Infeasible);
            }
        }
        self.close_artificials();
        let cost = std::mem::take(&mut self.cost);
        let out = self.primal(&cost);
        self.cost = cost;
        out
    }

    /// Re-optimizes from `snap` (optimal for looser bounds) with dual simplex,
    /// falling back to a cold start if that stalls.
    pub(crate) fn solve_warm(&mut self, snap: &Rc<BasisSnapshot>) -> Result<Outcome, LpError> {
        let same = self.loaded.as_ref().is_some_and(|s| Rc::ptr_eq(s, snap));
        if !same {
            self.heads.clone_from(&snap.heads);
            self.state.clone_from(&snap.state);
            self.art_sign.clone_from(&snap.art_sign);
            if self.binv.len() != self.m * self.m {
                self.binv = vec![0.0; self.m * self.m];
            }
            if self.refactor().is_err() {
                return self.solve_cold();
            }
            self.loaded = Some(snap.clone());
        } else {
            self.state.clone_from(&snap.state);
        }
        let ncols = self.n + 2 * self.m;
        for j in 0..ncols {
            match self.state[j] {
                VarState::Basic => {}
                VarState::Lower => self.x[j] = self.lo[j],
                VarState::Upper => self.x[j] = self.hi[j],
                VarState::Free => self.x[j] = 0.0,
            }
        }
        self.compute_xb();
        let cost = std::mem::take(&mut self.cost);
        self.compute_y(&cost);
        let budget = 20 * (self.m + 10);
        let res = self.dual(&cost, budget);
        let out = match res {
            Ok(Some(Outcome::Optimal)) => self.primal(&cost),
            Ok(Some(other)) => Ok(other),
            Ok(None) | Err(_) => {
                self.cost = cost;
                return self.solve_cold();
            }
        };
        self.cost = cost;
        out
    }

    pub(crate) fn snapshot(&mut self) -> Rc<BasisSnapshot> {
        let snap = Rc::new(BasisSnapshot {
            heads: self.heads.clone(),
            state: self.state.clone(),
            art_sign: self.art_sign.clone(),
        });
        self.loaded = Some(snap.clone());
        snap
    }

    pub(crate) fn structural(&self) -> &[f64] {
        &self.x[..self.n]
    }

    pub(crate) fn objective(&self) -> f64 {
        self.cost[..self.n]
            .iter()
            .zip(&self.x[..self.n])
            .map(|(c, v)| c * v)
            .sum()
    }

    fn solution(&mut self, status: LpStatus) -> LpSolution {
        let cost = std::mem::take(&mut self.cost);
        if status == LpStatus::Optimal && !self.heads.is_empty() {
            self.compute_y(&cost);
        }
        self.cost = cost;
        let reduced_costs = (0..self.n)
            .map(|j| {
                if self.state[j] == VarState::Basic {
                    0.0
                } else {
                    self.cost[j] - self.dot_y(j)
                }
            })
            .collect();
        LpSolution {
            status,
            primal: self.x[..self.n].to_vec(),
            objective: self.objective(),
            duals: self.y.clone(),
            reduced_costs,
            iterations: self.iterations,
        }
    }
}

/// Solves `lp` from scratch. Infeasible and unbounded programs are reported
/// through [`LpSolution::status`]; errors are reserved for numerical failure.
pub fn solve_lp(lp: &LinearProgram, opts: &LpOptions) -> Result<LpSolution, LpError> {
    let errs = lp.check();
    if !errs.is_empty() {
        return Err(LpError::Invalid(errs));
    }
    let mut engine = Engine::new(lp, *opts);
    let status = match engine.solve_cold()? {
        Outcome::Optimal => LpStatus::Optimal,
        Outcome::Infeasible => LpStatus::Infeasible,
        Outcome::Unbounded => LpStatus::Unbounded,
    };
    Ok(engine.solution(status))
}
