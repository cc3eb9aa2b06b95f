use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Milp, MilpError, Sense};

const TERMS_PER_LINE: usize = 6;

fn term(out: &mut String, coef: f64, name: &str, first: bool) {
    if coef < 0.0 {
        let _ = write!(out, " - {} {}", -coef, name);
    } else if first {
        let _ = write!(out, " {} {}", coef, name);
    } else {
        let _ = write!(out, " + {} {}", coef, name);
    }
}

/// Renders `m` in CPLEX LP format. Every variable appears in the objective
/// (zero coefficients included) so the column set survives a round trip.
pub fn write_lp(m: &Milp) -> String {
    let lp = &m.lp;
    let names: Vec<String> = (0..lp.num_vars()).map(|j| lp.var_name(j)).collect();
    let mut out = String::new();
    out.push_str("\\ generated by gencost\nMinimize\n obj:");
    for (j, &c) in lp.objective.iter().enumerate() {
        if j > 0 && j % TERMS_PER_LINE == 0 {
            out.push_str("\n   ");
        }
        term(&mut out, c, &names[j], j == 0);
    }
    out.push('\n');

    if !lp.constraints.is_empty() {
        out.push_str("Subject To\n");
        for (i, row) in lp.constraints.iter().enumerate() {
            let label = if row.name.is_empty() { format!("r{i}") } else { row.name.clone() };
            let _ = write!(out, " {label}:");
            if row.coeffs.is_empty() {
                // LP format needs at least one term on the left.
                let _ = write!(out, " 0 {}", names.first().map_or("x0", |s| s.as_str()));
            }
            for (k, &(j, a)) in row.coeffs.iter().enumerate() {
                if k > 0 && k % TERMS_PER_LINE == 0 {
                    out.push_str("\n   ");
                }
                term(&mut out, a, &names[j], k == 0);
            }
            let op = match row.sense {
                Sense::Le => "<=",
                Sense::Ge => ">=",
                Sense::Eq => "=",
            };
            let _ = writeln!(out, " {op} {}", row.rhs);
        }
    }

    out.push_str("Bounds\n");
    for (j, &(lo, hi)) in lp.bounds.iter().enumerate() {
        let name = &names[j];
        match (lo.is_finite(), hi.is_finite()) {
            (false, false) => {
                let _ = writeln!(out, " {name} free");
            }
            (true, true) if lo == hi => {
                let _ = writeln!(out, " {name} = {lo}");
            }
            (true, true) => {
                let _ = writeln!(out, " {lo} <= {name} <= {hi}");
            }
            (true, false) => {
                let _ = writeln!(out, " {name} >= {lo}");
            }
            (false, true) => {
                let _ = writeln!(out, " -inf <= {name} <= {hi}");
            }
        }
    }
    if !m.binaries.is_empty() {
        out.push_str("Binaries\n");
        for chunk in m.binaries.chunks(TERMS_PER_LINE) {
            out.push(' ');
            let line: Vec<&str> = chunk.iter().map(|&j| names[j].as_str()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    out.push_str("End\n");
    out
}

pub fn export_lp_file(m: &Milp, path: &Path) -> Result<(), MilpError> {
    fs::write(path, write_lp(m))?;
    Ok(())
}
