use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::rc::Rc;

use super::simplex::{BasisSnapshot, Engine, Outcome};
use super::{Milp, MilpError, MilpOptions, MilpSolution, MilpStatus, LpError};

struct Node {
    bound: f64,
    seq: usize,
    fixings: Vec<(usize, f64)>,
    basis: Rc<BasisSnapshot>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap: smallest bound first, then oldest.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Most fractional binary, lowest index on ties.
fn branching_candidate(x: &[f64], binaries: &[usize], tol_int: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in binaries {
        let frac = (x[j] - x[j].floor()).min(x[j].ceil() - x[j]);
        if frac > tol_int && best.is_none_or(|(_, f)| frac > f) {
            best = Some((j, frac));
        }
    }
    best.map(|(j, _)| j)
}

/// Best-bound branch-and-bound over the declared binaries.
pub fn solve_milp(m: &Milp, opts: &MilpOptions) -> Result<MilpSolution, MilpError> {
    let errs = m.check();
    if !errs.is_empty() {
        return Err(LpError::Invalid(errs).into());
    }
    let mut engine = Engine::new(&m.lp, opts.lp);
    let root = engine.solve_cold()?;
    match root {
        Outcome::Infeasible => {
            return Ok(MilpSolution {
                status: MilpStatus::Infeasible,
                primal: Vec::new(),
                objective: f64::INFINITY,
                best_bound: f64::INFINITY,
                nodes_explored: 1,
                gap: 0.0,
                trace: vec![(1, f64::INFINITY, f64::INFINITY)],
            })
        }
        Outcome::Unbounded => return Err(MilpError::Unbounded),
        Outcome::Optimal => {}
    }

    let mut incumbent: Option<(f64, Vec<f64>)> = None;
    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    let mut nodes = 0usize;
    let mut trace = Vec::new();
    let mut pending: Option<(Vec<(usize, f64)>, Outcome)> = Some((Vec::new(), root));
    let mut best_bound = engine.objective();

    loop {
        let (fixings, outcome) = match pending.take() {
            Some(p) => p,
            None => {
                let Some(node) = heap.pop() else { break };
                let node: Node = node;
                if let Some((inc, _)) = &incumbent {
                    if node.bound >= inc - opts.gap {
                        // Everything left is dominated.
                        heap.clear();
                        break;
                    }
                }
                if nodes >= opts.node_limit {
                    let lb = node.bound;
                    let gap = incumbent.as_ref().map_or(f64::INFINITY, |(v, _)| v - lb);
                    let inc = incumbent.map(|(objective, primal)| {
                        Box::new(MilpSolution {
                            status: MilpStatus::Optimal,
                            primal,
                            objective,
                            best_bound: lb,
                            nodes_explored: nodes,
                            gap,
                            trace: trace.clone(),
                        })
                    });
                    return Err(MilpError::NodeLimit {
                        limit: opts.node_limit,
                        gap,
                        incumbent: inc,
                    });
                }
                best_bound = best_bound.max(node.bound);
                engine.set_fixings(&node.fixings);
                let out = if opts.warm_start {
                    engine.solve_warm(&node.basis)?
                } else {
                    engine.solve_cold()?
                };
                (node.fixings, out)
            }
        };
        nodes += 1;

        if outcome == Outcome::Optimal {
            let obj = engine.objective();
            let dominated = incumbent
                .as_ref()
                .is_some_and(|(inc, _)| obj >= inc - opts.gap);
            if !dominated {
                let x = engine.structural();
                match branching_candidate(x, &m.binaries, opts.tol_int) {
                    None => incumbent = Some((obj, x.to_vec())),
                    Some(j) => {
                        let basis = engine.snapshot();
                        for v in [0.0, 1.0] {
                            let mut f = fixings.clone();
                            f.push((j, v));
                            heap.push(Node {
                                bound: obj,
                                seq,
                                fixings: f,
                                basis: basis.clone(),
                            });
                            seq += 1;
                        }
                    }
                }
            }
        } else if outcome == Outcome::Unbounded {
            return Err(MilpError::Unbounded);
        }
        let inc = incumbent.as_ref().map_or(f64::INFINITY, |(v, _)| *v);
        trace.push((nodes, inc, best_bound.min(inc)));
    }

    match incumbent {
        None => Ok(MilpSolution {
            status: MilpStatus::Infeasible,
            primal: Vec::new(),
            objective: f64::INFINITY,
            best_bound: f64::INFINITY,
            nodes_explored: nodes,
            gap: 0.0,
            trace,
        }),
        Some((objective, mut primal)) => {
            for &j in &m.binaries {
                primal[j] = primal[j].round();
            }
            let lb = heap.peek().map_or(objective, |n: &Node| n.bound.min(objective));
            let bound = lb.max(best_bound.min(objective));
            Ok(MilpSolution {
                status: MilpStatus::Optimal,
                primal,
                objective,
                best_bound: bound,
                nodes_explored: nodes,
                gap: (objective - bound).max(0.0),
                trace,
            })
        }
    }
}
