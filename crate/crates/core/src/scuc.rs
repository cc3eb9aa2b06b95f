//! Security-constrained unit commitment as a MILP.
//!
//! `solve_uc` is the deterministic map from (bid costs, start-up costs,
//! availabilities, demand) to a schedule. Each bus carries a non-negative
//! load-shedding slack priced at the instance's shed penalty, which keeps the
//! problem feasible under any outage pattern.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::CostParams;
use crate::milp::{solve_milp, LinearProgram, Milp, MilpError, MilpOptions, MilpStatus, Sense};
use crate::system::{DemandMatrix, UcInstance};

/// Binary availability of generators (`α`) and lines (`β`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Availability {
    pub gen: Vec<bool>,
    pub line: Vec<bool>,
}

impl Availability {
    pub fn all(inst: &UcInstance) -> Self {
        Self {
            gen: vec![true; inst.network.num_generators()],
            line: vec![true; inst.network.num_lines()],
        }
    }

    pub fn is_full(&self) -> bool {
        self.gen.iter().chain(&self.line).all(|&a| a)
    }
}

#[derive(Debug, Error)]
pub enum ScucError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unit commitment is infeasible even with load shedding")]
    Infeasible,
    #[error(transparent)]
    Solver(#[from] MilpError),
}

/// Column layout of the SCUC program. Every block is period-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScucLayout {
    pub periods: usize,
    pub gens: usize,
    pub buses: usize,
    pub lines: usize,
}

impl ScucLayout {
    fn tj(&self, block: usize, t: usize, j: usize) -> usize {
        block * self.periods * self.gens + t * self.gens + j
    }
    pub fn g(&self, t: usize, j: usize) -> usize {
        self.tj(0, t, j)
    }
    pub fn v(&self, t: usize, j: usize) -> usize {
        self.tj(1, t, j)
    }
    pub fn y(&self, t: usize, j: usize) -> usize {
        self.tj(2, t, j)
    }
    pub fn z(&self, t: usize, j: usize) -> usize {
        self.tj(3, t, j)
    }
    pub fn theta(&self, t: usize, n: usize) -> usize {
        4 * self.periods * self.gens + t * self.buses + n
    }
    pub fn flow(&self, t: usize, e: usize) -> usize {
        self.periods * (4 * self.gens + self.buses) + t * self.lines + e
    }
    pub fn shed(&self, t: usize, n: usize) -> usize {
        self.periods * (4 * self.gens + self.buses + self.lines) + t * self.buses + n
    }
    pub fn num_vars(&self) -> usize {
        self.periods * (4 * self.gens + 2 * self.buses + self.lines)
    }
}

/// Number of rows contributed by each constraint family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub slack: usize,
    pub flow: usize,
    pub gen_bounds: usize,
    pub transition: usize,
    pub ramp: usize,
    pub min_up: usize,
    pub min_down: usize,
    pub balance: usize,
}

impl BlockCounts {
    pub fn total(&self) -> usize {
        self.slack
            + self.flow
            + self.gen_bounds
            + self.transition
            + self.ramp
            + self.min_up
            + self.min_down
            + self.balance
    }
}

#[derive(Debug, Clone)]
pub struct ScucModel {
    pub milp: Milp,
    pub layout: ScucLayout,
    pub blocks: BlockCounts,
}

/// A solved commitment and dispatch plan. Matrices are indexed `[t, j]`,
/// `[t, n]` or `[t, e]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dispatch: Array2<f64>,
    pub commitment: Array2<u8>,
    pub startup: Array2<u8>,
    pub shutdown: Array2<u8>,
    pub angles: Array2<f64>,
    pub flows: Array2<f64>,
    pub shed: Array2<f64>,
    /// `Σ c_j g_tj + s_j y_tj`, excluding the shedding penalty.
    pub total_cost: f64,
}

impl Schedule {
    pub fn shed_total(&self) -> f64 {
        self.shed.sum()
    }

    pub fn has_shed(&self) -> bool {
        self.shed_total() > 1e-6
    }
}

fn check_dims(
    inst: &UcInstance,
    costs: &CostParams,
    avail: &Availability,
    demand: &DemandMatrix,
) -> Result<(), ScucError> {
    let (t, n, j, e) = (
        inst.horizon,
        inst.network.num_buses(),
        inst.network.num_generators(),
        inst.network.num_lines(),
    );
    let mut bad = Vec::new();
    if costs.marginal.len() != j || costs.startup.len() != j {
        bad.push(format!(
            "{} marginal and {} start-up costs for {j} generators",
            costs.marginal.len(),
            costs.startup.len()
        ));
    }
    if costs.marginal.iter().chain(&costs.startup).any(|c| !c.is_finite()) {
        bad.push("costs must be finite".to_string());
    }
    if avail.gen.len() != j || avail.line.len() != e {
        bad.push(format!(
            "availability has {} generators and {} lines, instance has {j} and {e}",
            avail.gen.len(),
            avail.line.len()
        ));
    }
    if demand.dim() != (t, n) {
        bad.push(format!("demand is {:?}, expected ({t}, {n})", demand.dim()));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(ScucError::Dimension(bad.join("; ")))
    }
}

/// Assembles the SCUC MILP with per-bus shedding slacks priced at `shed_penalty`.
pub fn build_scuc(
    inst: &UcInstance,
    costs: &CostParams,
    avail: &Availability,
    demand: &DemandMatrix,
    shed_penalty: f64,
) -> Result<ScucModel, ScucError> {
    check_dims(inst, costs, avail, demand)?;
    let net = &inst.network;
    let lay = ScucLayout {
        periods: inst.horizon,
        gens: net.num_generators(),
        buses: net.num_buses(),
        lines: net.num_lines(),
    };
    let (nt, nj, nn) = (lay.periods, lay.gens, lay.buses);
    let mut lp = LinearProgram::new();
    let inf = f64::INFINITY;

    // Columns, in layout order.
    for t in 0..nt {
        for j in 0..nj {
            lp.add_var(format!("g_{t}_{j}"), 0.0, inf, costs.marginal[j]);
        }
    }
    for (prefix, cost) in [("v", None), ("y", Some(&costs.startup)), ("z", None)] {
        for t in 0..nt {
            for j in 0..nj {
                lp.add_var(format!("{prefix}_{t}_{j}"), 0.0, 1.0, cost.map_or(0.0, |c| c[j]));
            }
        }
    }
    for t in 0..nt {
        for n in 0..nn {
            lp.add_var(format!("th_{t}_{n}"), -inf, inf, 0.0);
        }
    }
    for t in 0..nt {
        for (e, line) in net.lines.iter().enumerate() {
            let cap = if avail.line[e] { line.thermal_limit } else { 0.0 };
            lp.add_var(format!("f_{t}_{e}"), -cap, cap, 0.0);
        }
    }
    for t in 0..nt {
        for n in 0..nn {
            lp.add_var(format!("shed_{t}_{n}"), 0.0, inf, shed_penalty);
        }
    }
    debug_assert_eq!(lp.num_vars(), lay.num_vars());

    let mut blocks = BlockCounts::default();
    for t in 0..nt {
        lp.add_constraint(format!("slack_{t}"), &[(lay.theta(t, net.slack_bus), 1.0)], Sense::Eq, 0.0);
        blocks.slack += 1;
    }
    for t in 0..nt {
        for (e, line) in net.lines.iter().enumerate() {
            // An unavailable line carries no flow and does not couple its end angles.
            let b = if avail.line[e] { line.susceptance } else { 0.0 };
            lp.add_constraint(
                format!("flow_{t}_{e}"),
                &[
                    (lay.flow(t, e), 1.0),
                    (lay.theta(t, line.from), -b),
                    (lay.theta(t, line.to), b),
                ],
                Sense::Eq,
                0.0,
            );
            blocks.flow += 1;
        }
    }
    for t in 0..nt {
        for (j, gen) in net.generators.iter().enumerate() {
            let a = if avail.gen[j] { 1.0 } else { 0.0 };
            let (g, v) = (lay.g(t, j), lay.v(t, j));
            lp.add_constraint(format!("gmax_{t}_{j}"), &[(g, 1.0), (v, -a * gen.g_max)], Sense::Le, 0.0);
            lp.add_constraint(format!("gmin_{t}_{j}"), &[(g, 1.0), (v, -a * gen.g_min)], Sense::Ge, 0.0);
            blocks.gen_bounds += 2;
        }
    }
    for t in 0..nt {
        for (j, gen) in net.generators.iter().enumerate() {
            let mut row = vec![(lay.y(t, j), 1.0), (lay.z(t, j), -1.0), (lay.v(t, j), -1.0)];
            let rhs = if t == 0 {
                -(gen.v_init as f64)
            } else {
                row.push((lay.v(t - 1, j), 1.0));
                0.0
            };
            lp.add_constraint(format!("trans_{t}_{j}"), &row, Sense::Eq, rhs);
            blocks.transition += 1;
        }
    }
    for t in 0..nt {
        for (j, gen) in net.generators.iter().enumerate() {
            let (g, y, z, v) = (lay.g(t, j), lay.y(t, j), lay.z(t, j), lay.v(t, j));
            if t == 0 {
                // An unavailable unit cannot hold its initial output.
                let g_init = if avail.gen[j] { gen.g_init } else { 0.0 };
                let v_init = gen.v_init as f64;
                lp.add_constraint(
                    format!("rup_{t}_{j}"),
                    &[(g, 1.0), (y, -gen.g_min)],
                    Sense::Le,
                    g_init + gen.ramp_up * v_init,
                );
                lp.add_constraint(
                    format!("rdn_{t}_{j}"),
                    &[(g, -1.0), (z, -gen.g_min)],
                    Sense::Le,
                    gen.ramp_down * v_init - g_init,
                );
            } else {
                let (gp, vp) = (lay.g(t - 1, j), lay.v(t - 1, j));
                lp.add_constraint(
                    format!("rup_{t}_{j}"),
                    &[(g, 1.0), (gp, -1.0), (vp, -gen.ramp_up), (y, -gen.g_min)],
                    Sense::Le,
                    0.0,
                );
                lp.add_constraint(
                    format!("rdn_{t}_{j}"),
                    &[(gp, 1.0), (g, -1.0), (v, -gen.ramp_down), (z, -gen.g_min)],
                    Sense::Le,
                    0.0,
                );
            }
            blocks.ramp += 2;
        }
    }
    for (j, gen) in net.generators.iter().enumerate() {
        let mu = gen.min_up as usize;
        for t in mu.saturating_sub(1)..nt {
            let mut row: Vec<(usize, f64)> = (t + 1 - mu..=t).map(|k| (lay.y(k, j), 1.0)).collect();
            row.push((lay.v(t, j), -1.0));
            lp.add_constraint(format!("mup_{t}_{j}"), &row, Sense::Le, 0.0);
            blocks.min_up += 1;
        }
        let md = gen.min_down as usize;
        for t in md.saturating_sub(1)..nt {
            let mut row: Vec<(usize, f64)> = (t + 1 - md..=t).map(|k| (lay.z(k, j), 1.0)).collect();
            row.push((lay.v(t, j), 1.0));
            lp.add_constraint(format!("mdn_{t}_{j}"), &row, Sense::Le, 1.0);
            blocks.min_down += 1;
        }
    }
    for t in 0..nt {
        for n in 0..nn {
            let mut row: Vec<(usize, f64)> = net
                .generators
                .iter()
                .enumerate()
                .filter(|(_, g)| g.bus == n)
                .map(|(j, _)| (lay.g(t, j), 1.0))
                .collect();
            row.push((lay.shed(t, n), 1.0));
            for (e, line) in net.lines.iter().enumerate() {
                if line.from == n {
                    row.push((lay.flow(t, e), -1.0));
                } else if line.to == n {
                    row.push((lay.flow(t, e), 1.0));
                }
            }
            lp.add_constraint(format!("bal_{t}_{n}"), &row, Sense::Eq, demand[[t, n]]);
            blocks.balance += 1;
        }
    }

    let binaries: Vec<usize> = (0..nt)
        .flat_map(|t| (0..nj).flat_map(move |j| [lay.v(t, j), lay.y(t, j), lay.z(t, j)]))
        .collect();
    Ok(ScucModel {
        milp: Milp::new(lp, binaries),
        layout: lay,
        blocks,
    })
}

/// Reads a [`Schedule`] out of a primal vector laid out as `lay`.
pub fn extract_schedule(lay: &ScucLayout, x: &[f64], costs: &CostParams) -> Schedule {
    let (nt, nj, nn, ne) = (lay.periods, lay.gens, lay.buses, lay.lines);
    let bit = |v: f64| u8::from(v > 0.5);
    let dispatch = Array2::from_shape_fn((nt, nj), |(t, j)| x[lay.g(t, j)].max(0.0));
    let startup = Array2::from_shape_fn((nt, nj), |(t, j)| bit(x[lay.y(t, j)]));
    let total_cost = (0..nt)
        .flat_map(|t| (0..nj).map(move |j| (t, j)))
        .map(|(t, j)| costs.marginal[j] * dispatch[[t, j]] + costs.startup[j] * startup[[t, j]] as f64)
        .sum();
    Schedule {
        commitment: Array2::from_shape_fn((nt, nj), |(t, j)| bit(x[lay.v(t, j)])),
        shutdown: Array2::from_shape_fn((nt, nj), |(t, j)| bit(x[lay.z(t, j)])),
        angles: Array2::from_shape_fn((nt, nn), |(t, n)| x[lay.theta(t, n)]),
        flows: Array2::from_shape_fn((nt, ne), |(t, e)| x[lay.flow(t, e)]),
        shed: Array2::from_shape_fn((nt, nn), |(t, n)| x[lay.shed(t, n)].max(0.0)),
        dispatch,
        startup,
        total_cost,
    }
}

/// Solves the unit commitment; the shed penalty is taken from the instance.
pub fn solve_uc(
    inst: &UcInstance,
    costs: &CostParams,
    avail: &Availability,
    demand: &DemandMatrix,
) -> Result<Schedule, ScucError> {
    solve_uc_with(inst, costs, avail, demand, &MilpOptions::default())
}

pub fn solve_uc_with(
    inst: &UcInstance,
    costs: &CostParams,
    avail: &Availability,
    demand: &DemandMatrix,
    opts: &MilpOptions,
) -> Result<Schedule, ScucError> {
    let model = build_scuc(inst, costs, avail, demand, inst.shed_penalty)?;
    let sol = solve_milp(&model.milp, opts)?;
    if sol.status == MilpStatus::Infeasible {
        return Err(ScucError::Infeasible);
    }
    Ok(extract_schedule(&model.layout, &sol.primal, costs))
}

/// Start-up and shut-down indicators implied by a commitment sequence.
pub fn derive_startups(commitment: &Array2<u8>, v_init: &[u8]) -> (Array2<u8>, Array2<u8>) {
    let (nt, nj) = commitment.dim();
    let mut y = Array2::zeros((nt, nj));
    let mut z = Array2::zeros((nt, nj));
    for j in 0..nj {
        let mut prev = v_init[j];
        for t in 0..nt {
            let cur = commitment[[t, j]];
            if cur > prev {
                y[[t, j]] = 1;
            } else if cur < prev {
                z[[t, j]] = 1;
            }
            prev = cur;
        }
    }
    (y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mini3() -> UcInstance {
        UcInstance::from_json(include_str!("../data/mini3.sys")).unwrap()
    }

    #[test]
    fn derive_startups_examples() {
        let (y, z) = derive_startups(&array![[0u8], [1], [1], [0]], &[0]);
        assert_eq!(y.column(0).to_vec(), vec![0, 1, 0, 0]);
        assert_eq!(z.column(0).to_vec(), vec![0, 0, 0, 1]);

        let (y, z) = derive_startups(&array![[1u8, 0], [1, 0], [1, 0]], &[1, 0]);
        assert!(y.iter().chain(z.iter()).all(|&b| b == 0));

        let (y, z) = derive_startups(&array![[0u8], [0]], &[1]);
        assert_eq!(z[[0, 0]], 1);
        assert_eq!(y.sum(), 0);
    }

    #[test]
    fn mini3_two_period_structure() {
        let mut inst = mini3();
        inst.horizon = 2;
        inst.load_model.base_profile.truncate(2);
        inst.load_model.bus_shares.truncate(2);
        let costs = CostParams {
            marginal: vec![20.0, 30.0, 40.0],
            startup: vec![1000.0; 3],
        };
        let m = build_scuc(&inst, &costs, &Availability::all(&inst), &inst.base_demand(), 1e4).unwrap();
        // Per period: 4 columns per unit, angles and shed per bus, one flow per line.
        assert_eq!(m.milp.lp.num_vars(), 2 * (4 * 3 + 3 + 3 + 3));
        assert_eq!(m.milp.binaries.len(), 2 * 3 * 3);
        let b = m.blocks;
        assert_eq!(b.slack, 2);
        assert_eq!(b.flow, 6);
        assert_eq!(b.gen_bounds, 12);
        assert_eq!(b.transition, 6);
        assert_eq!(b.ramp, 12);
        // base: min_up = min_down = 4 > T, mid: 2, peaker: 1.
        assert_eq!(b.min_up, 0 + 1 + 2);
        assert_eq!(b.min_down, 0 + 1 + 2);
        assert_eq!(b.balance, 6);
        assert_eq!(m.milp.lp.num_constraints(), b.total());
    }

    #[test]
    fn line_outage_pins_flow_to_zero() {
        let inst = mini3();
        let mut avail = Availability::all(&inst);
        avail.line[1] = false;
        let costs = CostParams {
            marginal: vec![20.0; 3],
            startup: vec![1000.0; 3],
        };
        let m = build_scuc(&inst, &costs, &avail, &inst.base_demand(), 1e4).unwrap();
        for t in 0..inst.horizon {
            assert_eq!(m.milp.lp.bounds[m.layout.flow(t, 1)], (-0.0, 0.0));
        }
    }

    #[test]
    fn single_unit_follows_demand() {
        let inst = UcInstance::from_json(include_str!("../data/toy1.sys")).unwrap();
        let mut inst = inst;
        inst.network.generators[0].v_init = 1;
        inst.network.generators[0].g_init = 40.0;
        inst.shed_penalty = 1e4;
        let costs = CostParams {
            marginal: vec![25.0],
            startup: vec![800.0],
        };
        let demand = inst.base_demand();
        let s = solve_uc(&inst, &costs, &Availability::all(&inst), &demand).unwrap();
        for t in 0..inst.horizon {
            assert!((s.dispatch[[t, 0]] - demand[[t, 0]]).abs() < 1e-9);
            assert_eq!(s.commitment[[t, 0]], 1);
        }
        assert_eq!(s.startup.sum(), 0);
        assert!(!s.has_shed());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let inst = mini3();
        let costs = CostParams {
            marginal: vec![20.0; 2],
            startup: vec![1000.0; 3],
        };
        let err = build_scuc(&inst, &costs, &Availability::all(&inst), &inst.base_demand(), 1e4);
        assert!(matches!(err, Err(ScucError::Dimension(_))));
    }
}
