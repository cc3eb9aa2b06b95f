//! The generative model: prior over costs, bidding noise, outages, demand,
//! and the unit commitment that turns them into an observable schedule.
//!
//! Every random draw for a record derives from a single `u64` seed, so a
//! record can be regenerated from `(instance, prior, seed)` alone.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::milp::MilpOptions;
use crate::scuc::{solve_uc_with, Availability, Schedule, ScucError};
use crate::system::{sample_demand, DemandMatrix, SystemError, UcInstance};

/// Lower clip applied to noisy bids, €/MWh.
pub const BID_FLOOR: f64 = 0.01;
pub const DATASET_MAGIC: &[u8; 4] = b"GCDS";
pub const DATASET_SCHEMA_VERSION: u32 = 1;
/// ChaCha stream reserved for the prior draw of a dataset record.
const PRIOR_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Scuc(#[from] ScucError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("record with seed {seed}: {source}")]
    Record {
        seed: u64,
        #[source]
        source: Box<ForwardError>,
    },
}

/// Cost parameters `θ = (c, s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Marginal cost per generator, €/MWh.
    pub marginal: Vec<f64>,
    /// Start-up cost per generator, €.
    pub startup: Vec<f64>,
}

impl CostParams {
    pub fn num_generators(&self) -> usize {
        self.marginal.len()
    }

    /// `[c_1..c_J, s_1..s_J]`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.marginal.iter().chain(&self.startup).copied().collect()
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let j = v.len() / 2;
        Self {
            marginal: v[..j].to_vec(),
            startup: v[j..].to_vec(),
        }
    }

    /// Column names `c_<gen>` then `s_<gen>`.
    pub fn names(gens: &[String]) -> Vec<String> {
        gens.iter()
            .map(|g| format!("c_{g}"))
            .chain(gens.iter().map(|g| format!("s_{g}")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub c_min: f64,
    pub c_max: f64,
    pub s_min: f64,
    pub s_max: f64,
    /// Std of the bidding noise, €/MWh.
    pub sigma_bid: f64,
    pub p_gen_out: f64,
    pub p_line_out: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            c_min: 10.0,
            c_max: 50.0,
            s_min: 500.0,
            s_max: 10_000.0,
            sigma_bid: 2.5,
            p_gen_out: 0.05,
            p_line_out: 0.01,
        }
    }
}

impl PriorConfig {
    /// Prior with every noise source switched off.
    pub fn noiseless(self) -> Self {
        Self {
            sigma_bid: 0.0,
            p_gen_out: 0.0,
            p_line_out: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), ForwardError> {
        let mut bad = Vec::new();
        if !(self.c_min <= self.c_max) || !self.c_min.is_finite() || !self.c_max.is_finite() {
            bad.push(format!("marginal cost range [{}, {}]", self.c_min, self.c_max));
        }
        if !(self.s_min <= self.s_max) || !self.s_min.is_finite() || !self.s_max.is_finite() {
            bad.push(format!("start-up cost range [{}, {}]", self.s_min, self.s_max));
        }
        if !(self.sigma_bid >= 0.0) || !self.sigma_bid.is_finite() {
            bad.push(format!("sigma_bid {}", self.sigma_bid));
        }
        for (name, p) in [("p_gen_out", self.p_gen_out), ("p_line_out", self.p_line_out)] {
            if !(0.0..1.0).contains(&p) {
                bad.push(format!("{name} {p} outside [0, 1)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ForwardError::Prior(bad.join("; ")))
        }
    }

    /// Lower and upper corner of the parameter box for `j` generators.
    pub fn bounds(&self, j: usize) -> (Vec<f64>, Vec<f64>) {
        let lo = [vec![self.c_min; j], vec![self.s_min; j]].concat();
        let hi = [vec![self.c_max; j], vec![self.s_max; j]].concat();
        (lo, hi)
    }

    pub fn contains(&self, theta: &CostParams) -> bool {
        theta.marginal.iter().all(|&c| (self.c_min..=self.c_max).contains(&c))
            && theta.startup.iter().all(|&s| (self.s_min..=self.s_max).contains(&s))
    }
}

/// Per-day latent variables `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub bid_costs: Vec<f64>,
    pub availability: Availability,
}

/// A simulated market outcome `x = (g, δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketOutcome {
    pub schedule: Schedule,
    pub demand: DemandMatrix,
}

/// The observable part of an outcome: what a market participant sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub dispatch: Array2<f64>,
    pub startup: Array2<u8>,
    pub demand: DemandMatrix,
    pub shed_total: f64,
}

impl From<&MarketOutcome> for Observation {
    fn from(x: &MarketOutcome) -> Self {
        Self {
            dispatch: x.schedule.dispatch.clone(),
            startup: x.schedule.startup.clone(),
            demand: x.demand.clone(),
            shed_total: x.schedule.shed_total(),
        }
    }
}

pub fn sample_prior<R: Rng + ?Sized>(prior: &PriorConfig, j: usize, rng: &mut R) -> CostParams {
    let draw = |rng: &mut R, lo: f64, hi: f64| if lo < hi { rng.random_range(lo..hi) } else { lo };
    let marginal = (0..j).map(|_| draw(rng, prior.c_min, prior.c_max)).collect();
    let startup = (0..j).map(|_| draw(rng, prior.s_min, prior.s_max)).collect();
    CostParams { marginal, startup }
}

/// Draws bids and availabilities. Bids are clipped below at [`BID_FLOOR`].
pub fn sample_latents<R: Rng + ?Sized>(
    theta: &CostParams,
    prior: &PriorConfig,
    lines: usize,
    rng: &mut R,
) -> Latents {
    let noise = Normal::new(0.0, prior.sigma_bid).expect("finite sigma_bid");
    let bid_costs = theta
        .marginal
        .iter()
        .map(|&c| (c + noise.sample(rng)).max(BID_FLOOR))
        .collect();
    let gen = (0..theta.num_generators())
        .map(|_| rng.random_bool(1.0 - prior.p_gen_out))
        .collect();
    let line = (0..lines).map(|_| rng.random_bool(1.0 - prior.p_line_out)).collect();
    Latents {
        bid_costs,
        availability: Availability { gen, line },
    }
}

/// Runs the forward model with the latent draws exposed.
pub fn simulate_with_latents(
    inst: &UcInstance,
    theta: &CostParams,
    prior: &PriorConfig,
    seed: u64,
) -> Result<(MarketOutcome, Latents), ForwardError> {
    simulate_with_latents_opts(inst, theta, prior, seed, &MilpOptions::default())
}

/// [`simulate_with_latents`] with explicit solver options.
pub fn simulate_with_latents_opts(
    inst: &UcInstance,
    theta: &CostParams,
    prior: &PriorConfig,
    seed: u64,
    solver: &MilpOptions,
) -> Result<(MarketOutcome, Latents), ForwardError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = sample_latents(theta, prior, inst.network.num_lines(), &mut rng);
    let demand = sample_demand(&inst.load_model, &mut rng)?;
    // Bids replace marginal costs; start-up costs are passed through unchanged.
    let bids = CostParams {
        marginal: latents.bid_costs.clone(),
        startup: theta.startup.clone(),
    };
    let schedule = solve_uc_with(inst, &bids, &latents.availability, &demand, solver)?;
    Ok((MarketOutcome { schedule, demand }, latents))
}

pub fn simulate(
    inst: &UcInstance,
    theta: &CostParams,
    prior: &PriorConfig,
    seed: u64,
) -> Result<MarketOutcome, ForwardError> {
    simulate_opts(inst, theta, prior, seed, &MilpOptions::default())
}

pub fn simulate_opts(
    inst: &UcInstance,
    theta: &CostParams,
    prior: &PriorConfig,
    seed: u64,
    solver: &MilpOptions,
) -> Result<MarketOutcome, ForwardError> {
    simulate_with_latents_opts(inst, theta, prior, seed, solver).map(|(x, _)| x)
}

/// The prior draw belonging to dataset record `seed`.
pub fn record_theta(prior: &PriorConfig, j: usize, seed: u64) -> CostParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PRIOR_STREAM);
    sample_prior(prior, j, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub theta: CostParams,
    pub obs: Observation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub instance_name: String,
    pub instance_hash: String,
    pub prior: PriorConfig,
    pub n: usize,
    pub periods: usize,
    pub gens: usize,
    pub buses: usize,
    pub base_seed: u64,
    pub drop_shed: bool,
    pub generator_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn shed_count(&self) -> usize {
        self.records.iter().filter(|r| r.obs.shed_total > 1e-6).count()
    }

    pub fn check_instance(&self, inst: &UcInstance) -> Result<(), ForwardError> {
        if self.header.instance_hash != inst.content_hash() {
            return Err(ForwardError::Format(format!(
                "dataset was generated for instance {} with a different content hash",
                self.header.instance_name
            )));
        }
        Ok(())
    }
}

fn simulate_record(
    inst: &UcInstance,
    prior: &PriorConfig,
    seed: u64,
    solver: &MilpOptions,
) -> Result<Record, ForwardError> {
    let theta = record_theta(prior, inst.network.num_generators(), seed);
    let x = simulate_opts(inst, &theta, prior, seed, solver)?;
    Ok(Record {
        theta,
        obs: Observation::from(&x),
        seed,
    })
}

/// Simulates `n` records with seeds `base_seed + i`, spread over `jobs`
/// threads. The output does not depend on `jobs`.
pub fn generate_dataset(
    inst: &UcInstance,
    prior: &PriorConfig,
    n: usize,
    base_seed: u64,
    drop_shed: bool,
    jobs: usize,
) -> Result<Dataset, ForwardError> {
    generate_dataset_opts(inst, prior, n, base_seed, drop_shed, jobs, &MilpOptions::default())
}

/// [`generate_dataset`] with explicit solver options.
pub fn generate_dataset_opts(
    inst: &UcInstance,
    prior: &PriorConfig,
    n: usize,
    base_seed: u64,
    drop_shed: bool,
    jobs: usize,
    solver: &MilpOptions,
) -> Result<Dataset, ForwardError> {
    prior.validate()?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let results = parallel_map(&seeds, jobs, |&s| simulate_record(inst, prior, s, solver));
    let mut records = Vec::with_capacity(n);
    for (r, &seed) in results.into_iter().zip(&seeds) {
        let r = r.map_err(|e| ForwardError::Record { seed, source: Box::new(e) })?;
        if !(drop_shed && r.obs.shed_total > 1e-6) {
            records.push(r);
        }
    }
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA_VERSION,
        instance_name: inst.name.clone(),
        instance_hash: inst.content_hash(),
        prior: *prior,
        n: records.len(),
        periods: inst.horizon,
        gens: inst.network.num_generators(),
        buses: inst.network.num_buses(),
        base_seed,
        drop_shed,
        generator_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok(Dataset { header, records })
}

/// Order-preserving map over `items` using up to `jobs` scoped threads.
pub fn parallel_map<T, U, F>(items: &[T], jobs: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn put_f64s(w: &mut impl Write, xs: impl IntoIterator<Item = f64>) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; 8 * n];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), ForwardError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&ds.header).map_err(|e| ForwardError::Format(e.to_string()))?;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for r in &ds.records {
        put_f64s(&mut w, r.theta.to_vec())?;
        put_f64s(&mut w, r.obs.dispatch.iter().copied())?;
        w.write_all(r.obs.startup.as_slice().expect("standard layout"))?;
        put_f64s(&mut w, r.obs.demand.iter().copied())?;
        put_f64s(&mut w, [r.obs.shed_total])?;
        w.write_all(&r.seed.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, ForwardError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(ForwardError::Format("bad magic bytes".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header: DatasetHeader =
        serde_json::from_slice(&header).map_err(|e| ForwardError::Format(e.to_string()))?;
    if header.schema_version != DATASET_SCHEMA_VERSION {
        return Err(ForwardError::Format(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    let (t, j, n) = (header.periods, header.gens, header.buses);
    let mut records = Vec::with_capacity(header.n);
    for _ in 0..header.n {
        let theta = CostParams::from_slice(&get_f64s(&mut r, 2 * j)?);
        let dispatch = Array2::from_shape_vec((t, j), get_f64s(&mut r, t * j)?).unwrap();
        let mut bits = vec![0u8; t * j];
        r.read_exact(&mut bits)?;
        let startup = Array2::from_shape_vec((t, j), bits).unwrap();
        let demand = Array2::from_shape_vec((t, n), get_f64s(&mut r, t * n)?).unwrap();
        let shed_total = get_f64s(&mut r, 1)?[0];
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        records.push(Record {
            theta,
            obs: Observation {
                dispatch,
                startup,
                demand,
                shed_total,
            },
            seed: u64::from_le_bytes(seed),
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ForwardError::Format("trailing bytes after last record".into()));
    }
    Ok(Dataset { header, records })
}
