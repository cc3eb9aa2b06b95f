//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use gencost::milp::{solve_lp, LpOptions, LpStatus};
use gencost::scuc::{build_scuc, Availability};
use gencost::system::{Bus, Generator, Line, LoadModel, Network, UcInstance};
use gencost::{CostParams, DemandMatrix};
use ndarray::Array2;
use rand::Rng;

/// Minimum UC cost by enumerating every commitment pattern and solving the
/// remaining dispatch LP. Start/stop indicators follow the transitions of
/// `v`; where no minimum up/down window covers a period, a simultaneous
/// start and stop is also tried because the formulation permits it.
pub fn enumerate_uc(
    inst: &UcInstance,
    costs: &CostParams,
    avail: &Availability,
    demand: &DemandMatrix,
) -> Option<(f64, Array2<u8>)> {
    let model = build_scuc(inst, costs, avail, demand, inst.shed_penalty).ok()?;
    let lay = model.layout;
    let (nt, nj) = (lay.periods, lay.gens);
    let cells = nt * nj;
    assert!(cells <= 20, "enumeration too large");
    let gens = &inst.network.generators;
    let mut best: Option<(f64, Array2<u8>)> = None;
    for mask in 0u32..(1 << cells) {
        let v = Array2::from_shape_fn((nt, nj), |(t, j)| ((mask >> (t * nj + j)) & 1) as u8);
        // Cells where a start and a stop may coincide.
        let mut doubles = Vec::new();
        for j in 0..nj {
            let window = gens[j].min_up.max(gens[j].min_down) as usize;
            for t in 0..nt.min(window.saturating_sub(1)) {
                let prev = if t == 0 { gens[j].v_init } else { v[[t - 1, j]] };
                if prev == v[[t, j]] {
                    doubles.push((t, j));
                }
            }
        }
        for dmask in 0u32..(1 << doubles.len()) {
            let mut lp = model.milp.lp.clone();
            for t in 0..nt {
                for j in 0..nj {
                    let prev = if t == 0 { gens[j].v_init } else { v[[t - 1, j]] };
                    let cur = v[[t, j]];
                    let (mut y, mut z) = (u8::from(cur > prev), u8::from(cur < prev));
                    if let Some(k) = doubles.iter().position(|&c| c == (t, j)) {
                        if (dmask >> k) & 1 == 1 {
                            y = 1;
                            z = 1;
                        }
                    }
                    for (idx, val) in [(lay.v(t, j), cur), (lay.y(t, j), y), (lay.z(t, j), z)] {
                        lp.bounds[idx] = (val as f64, val as f64);
                    }
                }
            }
            let sol = solve_lp(&lp, &LpOptions::default()).expect("dispatch LP solves");
            if sol.status == LpStatus::Optimal && best.as_ref().is_none_or(|(b, _)| sol.objective < *b) {
                best = Some((sol.objective, v.clone()));
            }
        }
    }
    best
}

/// A random valid instance with at most `max_j` units and `max_t` periods.
pub fn random_tiny_instance<R: Rng>(rng: &mut R, max_j: usize, max_t: usize) -> UcInstance {
    let nb = rng.random_range(1..=3usize);
    let nj = rng.random_range(1..=max_j);
    let nt = rng.random_range(2..=max_t);
    let mut lines = Vec::new();
    for n in 1..nb {
        lines.push(Line {
            from: rng.random_range(0..n),
            to: n,
            susceptance: rng.random_range(5.0..20.0),
            thermal_limit: rng.random_range(40.0..150.0),
        });
    }
    if nb == 3 && rng.random_bool(0.5) {
        lines.push(Line {
            from: 1,
            to: 2,
            susceptance: rng.random_range(5.0..20.0),
            thermal_limit: rng.random_range(40.0..150.0),
        });
    }
    let mut generators = Vec::new();
    for _ in 0..nj {
        let g_max: f64 = rng.random_range(40.0..150.0);
        let g_min = g_max * rng.random_range(0.1..0.5);
        let on = rng.random_bool(0.5);
        generators.push(Generator {
            name: String::new(),
            bus: rng.random_range(0..nb),
            g_min,
            g_max,
            ramp_up: g_max * rng.random_range(0.3..1.0),
            ramp_down: g_max,
            min_up: rng.random_range(1..=3),
            min_down: rng.random_range(1..=2),
            v_init: u8::from(on),
            g_init: if on { rng.random_range(g_min..=g_max) } else { 0.0 },
        });
    }
    let cap: f64 = generators.iter().map(|g| g.g_max).sum();
    let base_profile = (0..nt).map(|_| cap * rng.random_range(0.2..0.8)).collect();
    let mut share: Vec<f64> = (0..nb).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = share.iter().sum();
    share.iter_mut().for_each(|x| *x /= s);
    let fix: f64 = share[..nb - 1].iter().sum();
    share[nb - 1] = 1.0 - fix;
    UcInstance {
        name: "tiny".into(),
        network: Network {
            buses: (0..nb).map(|id| Bus { id, name: String::new() }).collect(),
            lines,
            generators,
            slack_bus: 0,
        },
        load_model: LoadModel {
            base_profile,
            bus_shares: vec![share; nt],
            sigma_load: 0.0,
            sigma_share: 0.0,
        },
        horizon: nt,
        shed_penalty: 1e4,
    }
}

pub fn random_costs<R: Rng>(rng: &mut R, j: usize) -> CostParams {
    CostParams {
        marginal: (0..j).map(|_| rng.random_range(10.0..50.0)).collect(),
        startup: (0..j).map(|_| rng.random_range(500.0..10_000.0)).collect(),
    }
}

pub fn mini3() -> UcInstance {
    UcInstance::from_json(include_str!("../../data/mini3.sys")).unwrap()
}

pub fn toy1() -> UcInstance {
    UcInstance::from_json(include_str!("../../data/toy1.sys")).unwrap()
}

/// `mini3` cut down to its first `t` periods.
pub fn mini3_truncated(t: usize) -> UcInstance {
    let mut inst = mini3();
    inst.horizon = t;
    inst.load_model.base_profile.truncate(t);
    inst.load_model.bus_shares.truncate(t);
    inst
}

/// One-sample Kolmogorov-Smirnov statistic against `U(lo, hi)` and its
/// asymptotic p-value.
pub fn ks_uniform(xs: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut u: Vec<f64> = xs.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}

/// `generate_dataset` memoized under the cargo target tmp dir, keyed by
/// every input that affects the records.
pub fn cached_dataset(inst: &UcInstance, prior: &gencost::PriorConfig, n: usize, seed: u64) -> gencost::Dataset {
    use sha2::{Digest, Sha256};
    let key = format!(
        "{}|{}|{}|{}|{}",
        inst.content_hash(),
        serde_json::to_string(prior).unwrap(),
        n,
        seed,
        gencost::forward::DATASET_SCHEMA_VERSION
    );
    let digest = hex::encode(Sha256::digest(key.as_bytes()));
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("datasets");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("{}-{}.gcds", inst.name, &digest[..16]));
    if let Ok(ds) = gencost::read_dataset(&path) {
        return ds;
    }
    let ds = gencost::generate_dataset(inst, prior, n, seed, false, 1).unwrap();
    let tmp = path.with_extension("partial");
    gencost::write_dataset(&ds, &tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    ds
}

/// `∫ q(θ) dθ` over a box three prior widths wide, by importance sampling
/// from an even mixture of the uniform on that box and a broad Gaussian
/// fitted to draws of `q`.
pub fn importance_normalization(mix: &gencost::Mixture, lo: &[f64], hi: &[f64], n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let p = lo.len();
    let wide_lo: Vec<f64> = (0..p).map(|i| lo[i] - (hi[i] - lo[i])).collect();
    let wide_hi: Vec<f64> = (0..p).map(|i| hi[i] + (hi[i] - lo[i])).collect();
    let log_vol: f64 = (0..p).map(|i| (wide_hi[i] - wide_lo[i]).ln()).sum();
    let pilot = mix.sample(4000, rng);
    let mu: Vec<f64> = (0..p).map(|i| pilot.iter().map(|t| t[i]).sum::<f64>() / 4000.0).collect();
    let sd: Vec<f64> = (0..p)
        .map(|i| 1.5 * (pilot.iter().map(|t| (t[i] - mu[i]).powi(2)).sum::<f64>() / 4000.0).sqrt())
        .collect();
    let normals: Vec<rand_distr::Normal<f64>> = (0..p).map(|i| rand_distr::Normal::new(mu[i], sd[i]).unwrap()).collect();
    let log_gauss = |t: &[f64]| -> f64 {
        (0..p)
            .map(|i| {
                let u = (t[i] - mu[i]) / sd[i];
                -0.5 * u * u - sd[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    };
    let mut total = 0.0;
    for _ in 0..n {
        let t: Vec<f64> = if rng.random_bool(0.5) {
            (0..p).map(|i| rng.random_range(wide_lo[i]..wide_hi[i])).collect()
        } else {
            normals.iter().map(|d| rand_distr::Distribution::sample(d, rng)).collect()
        };
        let inside = (0..p).all(|i| t[i] >= wide_lo[i] && t[i] <= wide_hi[i]);
        if !inside {
            continue;
        }
        let g = 0.5 * (-log_vol).exp() + 0.5 * log_gauss(&t).exp();
        total += mix.log_prob(&t).exp() / g;
    }
    total / n as f64
}
