//! Network, generator fleet and load model of a unit-commitment instance.
//!
//! Instances are read from a JSON document (see `docs/system.schema.json`).
//! Powers are in MW, susceptances in per-unit and periods are hours.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance on `Σ_n s_tn = 1`.
pub const SHARE_SUM_TOL: f64 = 1e-9;
pub const DEFAULT_SHED_PENALTY: f64 = 1e4;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed system file: {0}")]
    Parse(String),
    #[error("invalid system:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("bus shares in period {period} vanish after perturbation")]
    DegenerateShares { period: usize },
    #[error("total load in period {period} is not positive after perturbation")]
    DegenerateLoad { period: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Per-unit susceptance `B_ij`.
    pub susceptance: f64,
    /// Thermal limit in MW.
    pub thermal_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    #[serde(default)]
    pub name: String,
    pub bus: usize,
    pub g_min: f64,
    pub g_max: f64,
    pub ramp_up: f64,
    pub ramp_down: f64,
    pub min_up: u32,
    pub min_down: u32,
    pub v_init: u8,
    pub g_init: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    pub slack_bus: usize,
}

impl Network {
    pub fn num_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.len()
    }

    /// Whether every bus is reachable from bus 0 over the lines in `active`.
    pub fn is_connected(&self, active: impl Fn(usize) -> bool) -> bool {
        let n = self.buses.len();
        if n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); n];
        for (e, l) in self.lines.iter().enumerate() {
            if active(e) && l.from < n && l.to < n {
                adj[l.from].push(l.to);
                adj[l.to].push(l.from);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    /// Total system load `L_t` per period.
    pub base_profile: Vec<f64>,
    /// Bus shares `s_tn`, one row per period.
    pub bus_shares: Vec<Vec<f64>>,
    /// Relative standard deviation of the total load.
    pub sigma_load: f64,
    /// Absolute standard deviation of each bus share.
    pub sigma_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcInstance {
    pub name: String,
    pub network: Network,
    pub load_model: LoadModel,
    pub horizon: usize,
    /// Penalty on unserved energy, €/MWh.
    pub shed_penalty: f64,
}

/// Demand `δ_tn` in MW with shape `(T, N)`.
pub type DemandMatrix = Array2<f64>;

// On-disk layout.

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum SharesFile {
    PerPeriod(Vec<Vec<f64>>),
    Constant(Vec<f64>),
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LoadFile {
    base_profile: Vec<f64>,
    shares: SharesFile,
    #[serde(default)]
    sigma_load: f64,
    #[serde(default)]
    sigma_share: f64,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SystemFile {
    #[serde(default)]
    name: String,
    horizon: usize,
    slack_bus: usize,
    #[serde(default)]
    shed_penalty: Option<f64>,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    generators: Vec<Generator>,
    load: LoadFile,
}

impl UcInstance {
    pub fn num_periods(&self) -> usize {
        self.horizon
    }

    /// Parses a system document without validating it.
    pub fn from_json(text: &str) -> Result<Self, SystemError> {
        let file: SystemFile =
            serde_json::from_str(text).map_err(|e| SystemError::Parse(e.to_string()))?;
        let bus_shares = match file.load.shares {
            SharesFile::PerPeriod(rows) => rows,
            SharesFile::Constant(row) => vec![row; file.horizon],
        };
        Ok(Self {
            name: file.name,
            network: Network {
                buses: file.buses,
                lines: file.lines,
                generators: file.generators,
                slack_bus: file.slack_bus,
            },
            load_model: LoadModel {
                base_profile: file.load.base_profile,
                bus_shares,
                sigma_load: file.load.sigma_load,
                sigma_share: file.load.sigma_share,
            },
            horizon: file.horizon,
            shed_penalty: file.shed_penalty.unwrap_or(DEFAULT_SHED_PENALTY),
        })
    }

    pub fn to_json(&self) -> String {
        let file = SystemFile {
            name: self.name.clone(),
            horizon: self.horizon,
            slack_bus: self.network.slack_bus,
            shed_penalty: Some(self.shed_penalty),
            buses: self.network.buses.clone(),
            lines: self.network.lines.clone(),
            generators: self.network.generators.clone(),
            load: LoadFile {
                base_profile: self.load_model.base_profile.clone(),
                shares: SharesFile::PerPeriod(self.load_model.bus_shares.clone()),
                sigma_load: self.load_model.sigma_load,
                sigma_share: self.load_model.sigma_share,
            },
        };
        serde_json::to_string_pretty(&file).expect("system serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Deterministic base demand `L_t · s_tn`.
    pub fn base_demand(&self) -> DemandMatrix {
        let lm = &self.load_model;
        let n = self.network.num_buses();
        Array2::from_shape_fn((self.horizon, n), |(t, b)| {
            lm.base_profile[t] * lm.bus_shares[t][b]
        })
    }

    pub fn generator_names(&self) -> Vec<String> {
        self.network
            .generators
            .iter()
            .enumerate()
            .map(|(j, g)| if g.name.is_empty() { format!("g{j}") } else { g.name.clone() })
            .collect()
    }
}

/// Reads and validates a system file.
pub fn load_system(path: &Path) -> Result<UcInstance, SystemError> {
    let text = fs::read_to_string(path).map_err(|source| SystemError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let inst = UcInstance::from_json(&text)?;
    let violations = validate(&inst);
    if violations.is_empty() {
        Ok(inst)
    } else {
        Err(SystemError::Invalid(violations))
    }
}

/// Lists every violated instance invariant; empty means valid.
pub fn validate(inst: &UcInstance) -> Vec<String> {
    let mut v = Vec::new();
    let net = &inst.network;
    let nb = net.num_buses();
    if nb == 0 {
        v.push("network has no buses".to_string());
    }
    for (k, bus) in net.buses.iter().enumerate() {
        if bus.id != k {
            v.push(format!("bus at position {k} has id {} (ids must be 0..N-1 in order)", bus.id));
        }
    }
    for (e, l) in net.lines.iter().enumerate() {
        if l.from >= nb || l.to >= nb {
            v.push(format!("line {e} references a missing bus ({} -> {})", l.from, l.to));
        }
        if l.from == l.to {
            v.push(format!("line {e} is a self-loop at bus {}", l.from));
        }
        if !(l.susceptance > 0.0) {
            v.push(format!("line {e} susceptance {} is not positive", l.susceptance));
        }
        if !(l.thermal_limit > 0.0) {
            v.push(format!("line {e} thermal limit {} is not positive", l.thermal_limit));
        }
    }
    for (j, g) in net.generators.iter().enumerate() {
        let who = if g.name.is_empty() { format!("generator {j}") } else { format!("generator {j} ({})", g.name) };
        if g.bus >= nb {
            v.push(format!("{who} sits on missing bus {}", g.bus));
        }
        if !(g.g_min > 0.0) {
            v.push(format!("{who}: g_min {} must be positive", g.g_min));
        }
        if g.g_min > g.g_max {
            v.push(format!("{who}: g_min {} exceeds g_max {}", g.g_min, g.g_max));
        }
        if !(g.ramp_up > 0.0 && g.ramp_down > 0.0) {
            v.push(format!("{who}: ramp limits must be positive"));
        }
        if g.min_up < 1 || g.min_down < 1 {
            v.push(format!("{who}: minimum up/down times must be at least 1"));
        }
        match g.v_init {
            0 if g.g_init != 0.0 => v.push(format!("{who}: initially off but g_init = {}", g.g_init)),
            1 if g.g_init < g.g_min || g.g_init > g.g_max => v.push(format!(
                "{who}: initially on but g_init {} outside [{}, {}]",
                g.g_init, g.g_min, g.g_max
            )),
            0 | 1 => {}
            other => v.push(format!("{who}: v_init {other} is not binary")),
        }
    }
    if net.slack_bus >= nb {
        v.push(format!("slack bus {} does not exist", net.slack_bus));
    }
    if nb > 0 && net.lines.iter().all(|l| l.from < nb && l.to < nb) && !net.is_connected(|_| true) {
        v.push("network is not connected".to_string());
    }

    let lm = &inst.load_model;
    if inst.horizon < 1 {
        v.push("horizon must be at least 1".to_string());
    }
    if lm.base_profile.len() != inst.horizon {
        v.push(format!(
            "base profile has {} periods, horizon is {}",
            lm.base_profile.len(),
            inst.horizon
        ));
    }
    for (t, &l) in lm.base_profile.iter().enumerate() {
        if !(l > 0.0) {
            v.push(format!("period {t}: base load {l} is not positive"));
        }
    }
    if lm.bus_shares.len() != inst.horizon {
        v.push(format!(
            "bus shares have {} periods, horizon is {}",
            lm.bus_shares.len(),
            inst.horizon
        ));
    }
    for (t, row) in lm.bus_shares.iter().enumerate() {
        if row.len() != nb {
            v.push(format!("period {t}: {} shares for {nb} buses", row.len()));
            continue;
        }
        if row.iter().any(|&s| !(s >= 0.0)) {
            v.push(format!("period {t}: negative bus share"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SHARE_SUM_TOL {
            v.push(format!("period {t}: bus shares sum to {sum}, expected 1"));
        }
    }
    if !(lm.sigma_load >= 0.0) || !(lm.sigma_share >= 0.0) {
        v.push("load noise levels must be non-negative".to_string());
    }
    if !(inst.shed_penalty > 0.0) {
        v.push(format!("shed penalty {} must be positive", inst.shed_penalty));
    }
    v
}

/// Draws a demand scenario: `δ_tn = L_t (1 + ε_t) · s'_tn` with `ε_t ~ N(0, σ_L²)`
/// and shares perturbed by `N(0, σ_s²)`, clipped at zero and renormalized.
pub fn sample_demand<R: Rng + ?Sized>(
    lm: &LoadModel,
    rng: &mut R,
) -> Result<DemandMatrix, SystemError> {
    let periods = lm.base_profile.len();
    let buses = lm.bus_shares.first().map_or(0, Vec::len);
    let load_noise = Normal::new(0.0, lm.sigma_load).expect("sigma_load is finite");
    let share_noise = Normal::new(0.0, lm.sigma_share).expect("sigma_share is finite");
    let mut d = DemandMatrix::zeros((periods, buses));
    let mut shares = vec![0.0; buses];
    for t in 0..periods {
        let eps: f64 = load_noise.sample(rng);
        let total = lm.base_profile[t] * (1.0 + eps);
        if !(total > 0.0) {
            return Err(SystemError::DegenerateLoad { period: t });
        }
        if lm.sigma_share > 0.0 {
            for (n, s) in shares.iter_mut().enumerate() {
                *s = (lm.bus_shares[t][n] + share_noise.sample(rng)).max(0.0);
            }
            let sum: f64 = shares.iter().sum();
            if !(sum > 0.0) {
                return Err(SystemError::DegenerateShares { period: t });
            }
            shares.iter_mut().for_each(|s| *s /= sum);
        } else {
            shares.copy_from_slice(&lm.bus_shares[t]);
        }
        for n in 0..buses {
            d[[t, n]] = total * shares[n];
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn mini3() -> UcInstance {
        UcInstance::from_json(include_str!("../data/mini3.sys")).unwrap()
    }

    #[test]
    fn mini3_is_valid() {
        let inst = mini3();
        assert_eq!(validate(&inst), Vec::<String>::new());
        assert_eq!(inst.network.num_buses(), 3);
        assert_eq!(inst.network.num_generators(), 3);
        assert_eq!(inst.network.num_lines(), 3);
        assert_eq!(inst.horizon, 8);
    }

    #[test]
    fn g_min_above_g_max_is_reported_once() {
        let mut inst = mini3();
        inst.network.generators[2].g_min = 500.0;
        let v = validate(&inst);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("generator 2"));
    }

    #[test]
    fn removing_a_line_can_disconnect() {
        let mut inst = mini3();
        inst.network.lines.retain(|l| l.from != 2 && l.to != 2);
        let v = validate(&inst);
        assert_eq!(v, vec!["network is not connected".to_string()]);
    }

    #[test]
    fn share_sum_violation_names_the_period() {
        let mut inst = mini3();
        let row = &mut inst.load_model.bus_shares[5];
        let k = row.len() - 1;
        row[k] -= 0.02;
        let v = validate(&inst);
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("period 5"), "{v:?}");
    }

    #[test]
    fn zero_noise_demand_is_exact() {
        let mut lm = mini3().load_model;
        lm.sigma_load = 0.0;
        lm.sigma_share = 0.0;
        let d = sample_demand(&lm, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for t in 0..lm.base_profile.len() {
            for n in 0..3 {
                assert_eq!(d[[t, n]], lm.base_profile[t] * lm.bus_shares[t][n]);
            }
        }
    }

    #[test]
    fn all_zero_shares_after_clipping_is_an_error() {
        let lm = LoadModel {
            base_profile: vec![10.0],
            bus_shares: vec![vec![-1.0, -1.0]],
            sigma_load: 0.0,
            sigma_share: 1e-6,
        };
        assert!(matches!(
            sample_demand(&lm, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(SystemError::DegenerateShares { period: 0 })
        ));
    }
}
