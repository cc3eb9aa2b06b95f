//! Neural posterior estimation with a mixture density network.
//!
//! A rectified MLP maps standardized observation features to the parameters
//! of a `K`-component diagonal Gaussian mixture over standardized `θ`. The
//! network is trained by minimizing the mean negative log-density of the
//! simulated `θ` under the mixture, with Adam and early stopping on a held-out
//! split. Backpropagation is written out by hand; [`gradient_check`] compares
//! it against central differences.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forward::{CostParams, Dataset, Observation};
use crate::system::UcInstance;

/// Lower bound on mixture scales, standardized units.
pub const SCALE_FLOOR: f64 = 1e-3;
pub const MODEL_MAGIC: &[u8; 4] = b"GCNM";
pub const MODEL_FORMAT_VERSION: u32 = 1;
/// Features whose training std is at or below this are dropped.
const MIN_STD: f64 = 1e-9;
/// ChaCha stream used for minibatch shuffling.
const SHUFFLE_STREAM: u64 = 3;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
/// Rows per chunk when evaluating a loss over a large set.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum NpeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset too small: {have} records, need at least {need}")]
    TooSmall { have: usize, need: usize },
    /// Training produced a non-finite loss; `checkpoint` holds the best
    /// model seen before that epoch.
    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        checkpoint: Box<PosteriorModel>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub k_components: usize,
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    /// Global gradient-norm clip applied before each Adam step.
    pub grad_clip: f64,
    /// Decoupled weight decay on connection weights (biases are exempt).
    pub weight_decay: f64,
    /// Factor applied to the learning rate after `lr_plateau` epochs
    /// without validation improvement (1 disables the schedule).
    pub lr_decay: f64,
    pub lr_plateau: usize,
    pub seed: u64,
    /// Weight of a balancing penalty. Reserved: no penalty is applied.
    pub lambda_balance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_components: 8,
            hidden_sizes: vec![128, 128, 128],
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 200,
            validation_fraction: 0.2,
            patience: 10,
            grad_clip: 10.0,
            weight_decay: 0.0,
            lr_decay: 0.5,
            lr_plateau: 4,
            seed: 0,
            lambda_balance: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NpeError> {
        let mut bad = Vec::new();
        if self.k_components == 0 {
            bad.push("k_components must be positive".to_string());
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            bad.push("hidden sizes must be positive".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            bad.push("batch_size, epochs and patience must be positive".to_string());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            bad.push(format!("validation_fraction {} outside (0, 1)", self.validation_fraction));
        }
        if !(self.grad_clip > 0.0) {
            bad.push(format!("grad_clip {}", self.grad_clip));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay {}", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_plateau == 0 {
            bad.push(format!("lr_decay {} must lie in (0, 1] with lr_plateau > 0", self.lr_decay));
        }
        if !(self.lambda_balance >= 0.0) {
            bad.push(format!("lambda_balance {}", self.lambda_balance));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(NpeError::Config(bad.join("; ")))
        }
    }
}

/// Raw features of an observation: dispatch `[t, j]` row-major, start
/// counts per generator, then demand `[t, n]` row-major.
pub fn featurize(obs: &Observation) -> Vec<f64> {
    let starts = obs.startup.map(|&v| v as f64).sum_axis(Axis(0));
    obs.dispatch
        .iter()
        .copied()
        .chain(starts.iter().copied())
        .chain(obs.demand.iter().copied())
        .collect()
}

fn mean_std(cols: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = cols.clone().count() as f64;
    let mean = cols.clone().sum::<f64>() / n;
    let var = cols.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Closed parameter box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Relative distance from the box faces below which the logit is clamped.
const BOX_EPS: f64 = 1e-12;

/// Map between `θ` and the standardized space the mixture lives in.
///
/// With `bounds`, each coordinate first goes through
/// `u = logit((θ − lo)/(hi − lo))`, so the density has support on the box
/// only; then `z = (u − mean)/std`. Without `bounds`, `u = θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaMap {
    pub bounds: Option<ParamBox>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ThetaMap {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn latent(&self, theta: &[f64]) -> Vec<f64> {
        match &self.bounds {
            None => theta.to_vec(),
            Some(b) => theta
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let q = ((v - b.lo[i]) / (b.hi[i] - b.lo[i])).clamp(BOX_EPS, 1.0 - BOX_EPS);
                    (q / (1.0 - q)).ln()
                })
                .collect(),
        }
    }

    pub fn standardize(&self, theta: &[f64]) -> Vec<f64> {
        self.latent(theta)
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(u, (m, s))| (u - m) / s)
            .collect()
    }

    pub fn unstandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| {
                let u = self.mean[i] + self.std[i] * v;
                match &self.bounds {
                    None => u,
                    Some(b) => b.lo[i] + (b.hi[i] - b.lo[i]) / (1.0 + (-u).exp()),
                }
            })
            .collect()
    }

    /// `log |dz_i/dθ_i|` for one coordinate; `−∞` outside the box.
    pub fn log_jacobian_at(&self, i: usize, v: f64) -> f64 {
        let base = -self.std[i].ln();
        match &self.bounds {
            None => base,
            Some(b) => {
                if !(v >= b.lo[i] && v <= b.hi[i]) {
                    return f64::NEG_INFINITY;
                }
                let w = b.hi[i] - b.lo[i];
                let q = ((v - b.lo[i]) / w).clamp(BOX_EPS, 1.0 - BOX_EPS);
                base - (w * q * (1.0 - q)).ln()
            }
        }
    }

    /// `log |det dz/dθ|`; `−∞` outside the box.
    pub fn log_jacobian(&self, theta: &[f64]) -> f64 {
        theta.iter().enumerate().map(|(i, &v)| self.log_jacobian_at(i, v)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_raw_dim: usize,
    /// Raw feature indices that are kept, in order.
    pub x_keep: Vec<usize>,
    /// Raw feature indices dropped for zero variance.
    pub x_dropped: Vec<usize>,
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub theta: ThetaMap,
}

impl Standardizer {
    /// Fits feature and parameter moments. With `bounds`, parameter moments
    /// are taken in logit space.
    pub fn fit(xs: &[Vec<f64>], thetas: &[Vec<f64>], bounds: Option<ParamBox>) -> Result<Self, NpeError> {
        let Some(first) = xs.first() else {
            return Err(NpeError::TooSmall { have: 0, need: 1 });
        };
        let dx = first.len();
        let dt = thetas[0].len();
        let (mut x_keep, mut x_dropped, mut x_mean, mut x_std) = (vec![], vec![], vec![], vec![]);
        for i in 0..dx {
            let (m, s) = mean_std(xs.iter().map(|x| x[i]));
            if s > MIN_STD * (1.0 + m.abs()) {
                x_keep.push(i);
                x_mean.push(m);
                x_std.push(s);
            } else {
                x_dropped.push(i);
            }
        }
        if let Some(b) = &bounds {
            if b.lo.len() != dt || b.hi.len() != dt || b.lo.iter().zip(&b.hi).any(|(l, h)| !(l < h)) {
                return Err(NpeError::Dimension("parameter box does not match θ".into()));
            }
        }
        let mut map = ThetaMap { bounds, mean: vec![0.0; dt], std: vec![1.0; dt] };
        let latents: Vec<Vec<f64>> = thetas.iter().map(|t| map.latent(t)).collect();
        for i in 0..dt {
            let (m, s) = mean_std(latents.iter().map(|t| t[i]));
            if !(s > 0.0) {
                return Err(NpeError::Dimension(format!("parameter {i} has zero variance in the training set")));
            }
            map.mean[i] = m;
            map.std[i] = s;
        }
        Ok(Self { x_raw_dim: dx, x_keep, x_dropped, x_mean, x_std, theta: map })
    }

    pub fn x(&self, raw: &[f64]) -> Result<Vec<f64>, NpeError> {
        if raw.len() != self.x_raw_dim {
            return Err(NpeError::Dimension(format!(
                "observation has {} features, model expects {}",
                raw.len(),
                self.x_raw_dim
            )));
        }
        Ok(self
            .x_keep
            .iter()
            .enumerate()
            .map(|(k, &i)| (raw[i] - self.x_mean[k]) / self.x_std[k])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub instance_name: String,
    pub instance_hash: String,
    pub param_names: Vec<String>,
    pub periods: usize,
    pub gens: usize,
    pub buses: usize,
    pub train_records: usize,
    pub val_records: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Mixture-density network plus the standardization it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub meta: ModelMeta,
    pub standardizer: Standardizer,
    pub k: usize,
    /// Layer widths `[d_x, hidden.., K(1 + 2P)]`.
    pub sizes: Vec<usize>,
    #[serde(skip)]
    pub params: Vec<f64>,
    pub training_log: Vec<EpochStats>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
}

/// The conditional density `q(θ | x)` for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub log_weights: Vec<f64>,
    /// `K × P`, standardized units.
    pub means: Array2<f64>,
    pub scales: Array2<f64>,
    pub theta: ThetaMap,
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Mixture {
    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Log-density in standardized units.
    pub fn log_prob_std(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.log_weights.len())
            .map(|k| {
                let mut a = self.log_weights[k];
                for (p, &zp) in z.iter().enumerate() {
                    let s = self.scales[[k, p]];
                    let u = (zp - self.means[[k, p]]) / s;
                    a += -0.5 * u * u - s.ln() - HALF_LN_2PI;
                }
                a
            })
            .collect();
        logsumexp(&terms)
    }

    /// Log-density in original units, nats; `−∞` outside the parameter box.
    pub fn log_prob(&self, theta: &[f64]) -> f64 {
        let jac = self.theta.log_jacobian(theta);
        if jac == f64::NEG_INFINITY {
            return jac;
        }
        self.log_prob_std(&self.theta.standardize(theta)) + jac
    }

    /// Log-density of the marginal of coordinate `p`, standardized units.
    pub fn marginal_log_prob_std(&self, p: usize, z: f64) -> f64 {
        let terms: Vec<f64> = (0..self.log_weights.len())
            .map(|k| {
                let s = self.scales[[k, p]];
                let u = (z - self.means[[k, p]]) / s;
                self.log_weights[k] - 0.5 * u * u - s.ln() - HALF_LN_2PI
            })
            .collect();
        logsumexp(&terms)
    }

    /// Log-density of the marginal of coordinate `p`, original units.
    pub fn marginal_log_prob(&self, p: usize, v: f64) -> f64 {
        let jac = self.theta.log_jacobian_at(p, v);
        if jac == f64::NEG_INFINITY {
            return jac;
        }
        let mut theta = self.theta.unstandardize(&vec![0.0; self.dim()]);
        theta[p] = v;
        self.marginal_log_prob_std(p, self.theta.standardize(&theta)[p]) + jac
    }

    /// Ancestral samples in original units.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let weights: Vec<f64> = self.log_weights.iter().map(|l| l.exp()).collect();
        let total: f64 = weights.iter().sum();
        (0..n)
            .map(|_| {
                let mut u = rng.random::<f64>() * total;
                let mut k = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        k = i;
                        break;
                    }
                    u -= w;
                }
                let z: Vec<f64> = (0..self.dim())
                    .map(|p| {
                        let e: f64 = StandardNormal.sample(rng);
                        self.means[[k, p]] + self.scales[[k, p]] * e
                    })
                    .collect();
                self.theta.unstandardize(&z)
            })
            .collect()
    }

    /// Monte Carlo posterior mean in original units.
    pub fn mean_mc<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim()];
        for v in self.sample(n, rng) {
            acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
        }
        acc.iter().map(|a| a / n as f64).collect()
    }
}

fn layer_offsets(sizes: &[usize]) -> Vec<(usize, usize)> {
    let mut off = 0;
    sizes
        .windows(2)
        .map(|w| {
            let wo = off;
            off += w[0] * w[1];
            let bo = off;
            off += w[1];
            (wo, bo)
        })
        .collect()
}

fn num_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Layer outputs for a batch: `acts[0]` is the input, the last entry the
/// raw network output, and the ones in between are rectified.
fn forward(sizes: &[usize], params: &[f64], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let offs = layer_offsets(sizes);
    let nl = offs.len();
    let mut acts = vec![x.to_owned()];
    for (l, &(wo, bo)) in offs.iter().enumerate() {
        let (din, dout) = (sizes[l], sizes[l + 1]);
        let w = ArrayView2::from_shape((dout, din), &params[wo..wo + din * dout]).expect("layer shape");
        let b = ArrayView2::from_shape((1, dout), &params[bo..bo + dout]).expect("bias shape");
        let mut z = acts[l].dot(&w.t()) + b;
        if l + 1 < nl {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// Splits a head row into logits, means and scales.
fn head(row: &[f64], k: usize, p: usize) -> (&[f64], &[f64], &[f64]) {
    (&row[..k], &row[k..k + k * p], &row[k + k * p..k + 2 * k * p])
}

/// Mean negative log-density over a batch (standardized units) and, when
/// `grad` is given, its gradient with respect to `params`.
fn loss_grad(
    sizes: &[usize],
    k: usize,
    params: &[f64],
    x: ArrayView2<f64>,
    theta: ArrayView2<f64>,
    grad: Option<&mut [f64]>,
) -> f64 {
    let acts = forward(sizes, params, x);
    let out = acts.last().expect("output layer");
    let (b, p) = theta.dim();
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    let want_grad = grad.is_some();
    let mut g_out = if want_grad { Array2::zeros(out.dim()) } else { Array2::zeros((0, 0)) };
    let mut a = vec![0.0; k];
    for i in 0..b {
        let row = out.row(i);
        let row = row.as_slice().expect("contiguous output row");
        let (logits, mu, ls) = head(row, k, p);
        let lse_l = logsumexp(logits);
        for c in 0..k {
            let mut v = logits[c] - lse_l;
            for q in 0..p {
                let s = SCALE_FLOOR + ls[c * p + q].exp();
                let u = (theta[[i, q]] - mu[c * p + q]) / s;
                v += -0.5 * u * u - s.ln() - HALF_LN_2PI;
            }
            a[c] = v;
        }
        let lse_a = logsumexp(&a);
        total -= lse_a;
        if want_grad {
            let mut g = g_out.row_mut(i);
            for c in 0..k {
                let r = (a[c] - lse_a).exp();
                let pi = (logits[c] - lse_l).exp();
                g[c] = (pi - r) * inv_b;
                for q in 0..p {
                    let e = ls[c * p + q].exp();
                    let s = SCALE_FLOOR + e;
                    let u = (theta[[i, q]] - mu[c * p + q]) / s;
                    g[k + c * p + q] = -r * u / s * inv_b;
                    g[k + k * p + c * p + q] = -r * (u * u - 1.0) / s * e * inv_b;
                }
            }
        }
    }
    if let Some(grad) = grad {
        backward(sizes, params, &acts, g_out, grad);
    }
    total * inv_b
}

fn backward(sizes: &[usize], params: &[f64], acts: &[Array2<f64>], mut g: Array2<f64>, grad: &mut [f64]) {
    let offs = layer_offsets(sizes);
    for l in (0..offs.len()).rev() {
        let (wo, bo) = offs[l];
        let (din, dout) = (sizes[l], sizes[l + 1]);
        let prev = &acts[l];
        let dw = g.t().dot(prev);
        grad[wo..wo + din * dout].copy_from_slice(dw.as_slice().expect("contiguous"));
        let db = g.sum_axis(Axis(0));
        grad[bo..bo + dout].copy_from_slice(db.as_slice().expect("contiguous"));
        if l > 0 {
            let w = ArrayView2::from_shape((dout, din), &params[wo..wo + din * dout]).expect("layer shape");
            let mut gp = g.dot(&w);
            ndarray::Zip::from(&mut gp).and(prev).for_each(|gv, &av| {
                if av <= 0.0 {
                    *gv = 0.0;
                }
            });
            g = gp;
        }
    }
}

fn init_params(sizes: &[usize], k: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = vec![0.0; num_params(sizes)];
    let offs = layer_offsets(sizes);
    let nl = offs.len();
    for (l, &(wo, bo)) in offs.iter().enumerate() {
        let (din, dout) = (sizes[l], sizes[l + 1]);
        // He initialization for rectified layers; the head starts small so
        // the initial mixture is set by its biases.
        let scale = if l + 1 < nl { (2.0 / din as f64).sqrt() } else { 0.1 / (din as f64).sqrt() };
        for w in &mut params[wo..wo + din * dout] {
            let e: f64 = StandardNormal.sample(rng);
            *w = scale * e;
        }
        if l + 1 == nl {
            // Spread component means so they do not start identical.
            for m in &mut params[bo + k..bo + k + k * p] {
                let e: f64 = StandardNormal.sample(rng);
                *m = e;
            }
        }
    }
    params
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    /// Per-parameter decoupled decay rate.
    decay: Vec<f64>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: &[usize], lr: f64, weight_decay: f64) -> Self {
        let n = num_params(sizes);
        let mut decay = vec![0.0; n];
        for (l, (wo, _)) in layer_offsets(sizes).into_iter().enumerate() {
            decay[wo..wo + sizes[l] * sizes[l + 1]].fill(weight_decay);
        }
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, decay }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * ((self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS) + self.decay[i] * params[i]);
        }
    }
}

/// Standardized design matrices for a set of records.
fn design(std: &Standardizer, ds: &Dataset, idx: &[usize]) -> Result<(Array2<f64>, Array2<f64>), NpeError> {
    let dx = std.x_keep.len();
    let dt = std.theta.dim();
    let mut x = Array2::zeros((idx.len(), dx));
    let mut t = Array2::zeros((idx.len(), dt));
    for (r, &i) in idx.iter().enumerate() {
        let rec = &ds.records[i];
        x.row_mut(r).assign(&Array1::from(std.x(&featurize(&rec.obs))?));
        t.row_mut(r).assign(&Array1::from(std.theta.standardize(&rec.theta.to_vec())));
    }
    Ok((x, t))
}

fn eval_loss(sizes: &[usize], k: usize, params: &[f64], x: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let l = loss_grad(sizes, k, params, x.slice(s![start..end, ..]), t.slice(s![start..end, ..]), None);
        total += l * (end - start) as f64;
        start = end;
    }
    total / n as f64
}

/// Deterministic train/validation split of `0..n`.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains a posterior model on `ds`. The result is a deterministic function
/// of the dataset and `config` (including its seed).
pub fn fit(ds: &Dataset, inst: &UcInstance, config: &TrainConfig) -> Result<PosteriorModel, NpeError> {
    fit_with_progress(ds, inst, config, |_| {})
}

/// The model `fit` starts from: standardizer fitted on the training split
/// and freshly initialized weights.
pub fn initial_model(ds: &Dataset, inst: &UcInstance, config: &TrainConfig) -> Result<PosteriorModel, NpeError> {
    config.validate()?;
    ds.check_instance(inst).map_err(|e| NpeError::Dimension(e.to_string()))?;
    let need = 10 * config.batch_size;
    if ds.len() < need {
        return Err(NpeError::TooSmall { have: ds.len(), need });
    }
    let (train_idx, val_idx) = split_indices(ds.len(), config.validation_fraction, config.seed);
    let xs: Vec<Vec<f64>> = train_idx.iter().map(|&i| featurize(&ds.records[i].obs)).collect();
    let ts: Vec<Vec<f64>> = train_idx.iter().map(|&i| ds.records[i].theta.to_vec()).collect();
    let (lo, hi) = ds.header.prior.bounds(ds.header.gens);
    let standardizer = Standardizer::fit(&xs, &ts, Some(ParamBox { lo, hi }))?;

    let k = config.k_components;
    let p = standardizer.theta.dim();
    let mut sizes = vec![standardizer.x_keep.len()];
    sizes.extend(&config.hidden_sizes);
    sizes.push(k * (1 + 2 * p));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = init_params(&sizes, k, p, &mut rng);

    let gens = inst.generator_names();
    Ok(PosteriorModel {
        meta: ModelMeta {
            instance_name: inst.name.clone(),
            instance_hash: inst.content_hash(),
            param_names: CostParams::names(&gens),
            periods: inst.horizon,
            gens: inst.network.num_generators(),
            buses: inst.network.num_buses(),
            train_records: train_idx.len(),
            val_records: val_idx.len(),
            config: config.clone(),
        },
        standardizer,
        k,
        sizes,
        params,
        training_log: Vec::new(),
        best_epoch: 0,
    })
}

pub fn fit_with_progress(
    ds: &Dataset,
    inst: &UcInstance,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<PosteriorModel, NpeError> {
    let mut model = initial_model(ds, inst, config)?;
    let (train_idx, val_idx) = split_indices(ds.len(), config.validation_fraction, config.seed);
    let (x_train, t_train) = design(&model.standardizer, ds, &train_idx)?;
    let (x_val, t_val) = design(&model.standardizer, ds, &val_idx)?;
    let sizes = model.sizes.clone();
    let k = model.k;
    let mut params = model.params.clone();
    let mut adam = Adam::new(&sizes, config.learning_rate, config.weight_decay);
    let mut grad = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut best_val = eval_loss(&sizes, k, &params, &x_val, &t_val);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..x_train.nrows()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let tb = t_train.select(Axis(0), chunk);
            let l = loss_grad(&sizes, k, &params, xb.view(), tb.view(), Some(&mut grad));
            sum += l * chunk.len() as f64;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.grad_clip {
                let f = config.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
            adam.step(&mut params, &grad);
        }
        let train_nll = sum / order.len() as f64;
        let val_nll = eval_loss(&sizes, k, &params, &x_val, &t_val);
        let stats = EpochStats { epoch, train_nll, val_nll };
        if !train_nll.is_finite() || !val_nll.is_finite() {
            return Err(NpeError::Divergence { epoch, checkpoint: Box::new(model) });
        }
        model.training_log.push(stats);
        progress(&stats);
        if val_nll < best_val {
            best_val = val_nll;
            model.params.copy_from_slice(&params);
            model.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
            if since_best % config.lr_plateau == 0 {
                adam.lr *= config.lr_decay;
            }
        }
    }
    Ok(model)
}

impl PosteriorModel {
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn dim(&self) -> usize {
        self.standardizer.theta.dim()
    }

    /// Standardized, masked features of `obs`.
    pub fn features(&self, obs: &Observation) -> Result<Vec<f64>, NpeError> {
        self.standardizer.x(&featurize(obs))
    }

    pub fn check_instance(&self, inst: &UcInstance) -> Result<(), NpeError> {
        if self.meta.instance_hash != inst.content_hash() {
            return Err(NpeError::Dimension(format!(
                "model was trained on instance '{}' ({}), got '{}'",
                self.meta.instance_name,
                self.meta.instance_hash,
                inst.name
            )));
        }
        Ok(())
    }

    /// The conditional mixture for one observation.
    pub fn condition(&self, obs: &Observation) -> Result<Mixture, NpeError> {
        let x = self.features(obs)?;
        Ok(self.condition_std(&x))
    }

    fn condition_std(&self, x: &[f64]) -> Mixture {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let acts = forward(&self.sizes, &self.params, xv);
        let out = acts.last().expect("output layer");
        let row = out.row(0);
        let (logits, mu, ls) = head(row.as_slice().expect("contiguous"), self.k, self.dim());
        let lse = logsumexp(logits);
        let p = self.dim();
        Mixture {
            log_weights: logits.iter().map(|l| l - lse).collect(),
            means: Array2::from_shape_vec((self.k, p), mu.to_vec()).expect("means shape"),
            scales: Array2::from_shape_vec((self.k, p), ls.iter().map(|v| SCALE_FLOOR + v.exp()).collect())
                .expect("scales shape"),
            theta: self.standardizer.theta.clone(),
        }
    }

    pub fn log_prob(&self, theta: &CostParams, obs: &Observation) -> Result<f64, NpeError> {
        let tv = theta.to_vec();
        if tv.len() != self.dim() {
            return Err(NpeError::Dimension(format!("θ has {} entries, model expects {}", tv.len(), self.dim())));
        }
        Ok(self.condition(obs)?.log_prob(&tv))
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &Observation, n: usize, rng: &mut R) -> Result<Vec<CostParams>, NpeError> {
        Ok(self
            .condition(obs)?
            .sample(n, rng)
            .into_iter()
            .map(|v| CostParams::from_slice(&v))
            .collect())
    }

    /// Mean NLL (standardized units) and gradient on a slice of records.
    pub fn loss_and_grad(&self, records: &[crate::forward::Record]) -> Result<(f64, Vec<f64>), NpeError> {
        let (x, t) = self.batch(records)?;
        let mut g = vec![0.0; self.params.len()];
        let l = loss_grad(&self.sizes, self.k, &self.params, x.view(), t.view(), Some(&mut g));
        Ok((l, g))
    }

    pub fn loss(&self, records: &[crate::forward::Record]) -> Result<f64, NpeError> {
        let (x, t) = self.batch(records)?;
        Ok(eval_loss(&self.sizes, self.k, &self.params, &x, &t))
    }

    fn batch(&self, records: &[crate::forward::Record]) -> Result<(Array2<f64>, Array2<f64>), NpeError> {
        let mut x = Array2::zeros((records.len(), self.sizes[0]));
        let mut t = Array2::zeros((records.len(), self.dim()));
        for (r, rec) in records.iter().enumerate() {
            x.row_mut(r).assign(&Array1::from(self.features(&rec.obs)?));
            t.row_mut(r).assign(&Array1::from(self.standardizer.theta.standardize(&rec.theta.to_vec())));
        }
        Ok((x, t))
    }

    /// A model whose head ignores `x`: `K = 1`, zero trunk and output
    /// weights, and the given standardized mean and log-scale as biases.
    pub fn constant_gaussian(standardizer: Standardizer, hidden: &[usize], mean: &[f64], log_scale: &[f64]) -> Self {
        let p = standardizer.theta.dim();
        let mut sizes = vec![standardizer.x_keep.len()];
        sizes.extend(hidden);
        sizes.push(1 + 2 * p);
        let mut params = vec![0.0; num_params(&sizes)];
        let (_, bo) = *layer_offsets(&sizes).last().expect("at least one layer");
        params[bo + 1..bo + 1 + p].copy_from_slice(mean);
        params[bo + 1 + p..bo + 1 + 2 * p].copy_from_slice(log_scale);
        Self {
            meta: ModelMeta {
                instance_name: String::new(),
                instance_hash: String::new(),
                param_names: (0..p).map(|i| format!("theta{i}")).collect(),
                periods: 0,
                gens: p / 2,
                buses: 0,
                train_records: 0,
                val_records: 0,
                config: TrainConfig { k_components: 1, hidden_sizes: hidden.to_vec(), ..Default::default() },
            },
            standardizer,
            k: 1,
            sizes,
            params,
            training_log: Vec::new(),
            best_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because a rectifier switched within `±h`.
    pub skipped_kinks: usize,
}

/// Finite-difference step on the weights.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares the analytic gradient with central differences on `n_coords`
/// seeded random weights (all of them if `n_coords` is at least the
/// parameter count).
pub fn gradient_check(
    model: &PosteriorModel,
    records: &[crate::forward::Record],
    n_coords: usize,
    seed: u64,
) -> Result<GradCheck, NpeError> {
    gradient_check_with(model, records, n_coords, seed, |m, r| m.loss_and_grad(r).map(|(_, g)| g))
}

/// As [`gradient_check`] with a caller-supplied gradient, so a deliberately
/// wrong gradient can be shown to fail.
pub fn gradient_check_with(
    model: &PosteriorModel,
    records: &[crate::forward::Record],
    n_coords: usize,
    seed: u64,
    analytic: impl Fn(&PosteriorModel, &[crate::forward::Record]) -> Result<Vec<f64>, NpeError>,
) -> Result<GradCheck, NpeError> {
    let g = analytic(model, records)?;
    let (x, t) = model.batch(records)?;
    let n = model.params.len();
    let mut coords: Vec<usize> = (0..n).collect();
    if n_coords < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(n_coords);
        coords.sort_unstable();
    }
    let mut params = model.params.clone();
    let h = GRAD_CHECK_STEP;
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let pattern = |p: &[f64]| -> Vec<bool> {
        let acts = forward(&model.sizes, p, x.view());
        acts[1..acts.len() - 1]
            .iter()
            .flat_map(|a| a.iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect()
    };
    for &i in &coords {
        let orig = params[i];
        params[i] = orig + h;
        let lp = loss_grad(&model.sizes, model.k, &params, x.view(), t.view(), None);
        let pp = pattern(&params);
        params[i] = orig - h;
        let lm = loss_grad(&model.sizes, model.k, &params, x.view(), t.view(), None);
        let pm = pattern(&params);
        params[i] = orig;
        if pp != pm {
            out.skipped_kinks += 1;
            continue;
        }
        let num = (lp - lm) / (2.0 * h);
        let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-4);
        out.checked += 1;
        if out.checked == 1 || rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = i;
            out.analytic = g[i];
            out.numeric = num;
        }
    }
    Ok(out)
}

/// Writes the model: magic, format version, header length (u32 LE), JSON
/// header, then every weight as an f64 LE.
pub fn save_model(model: &PosteriorModel, path: &Path) -> Result<(), NpeError> {
    let header = serde_json::to_vec(model).map_err(|e| NpeError::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for v in &model.params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PosteriorModel, NpeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    if &buf4 != MODEL_MAGIC {
        return Err(NpeError::Format("bad magic".into()));
    }
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != MODEL_FORMAT_VERSION {
        return Err(NpeError::Format(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut buf4)?;
    let hlen = u32::from_le_bytes(buf4) as usize;
    let mut header = vec![0u8; hlen];
    r.read_exact(&mut header)?;
    let mut model: PosteriorModel = serde_json::from_slice(&header).map_err(|e| NpeError::Format(e.to_string()))?;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let n = u64::from_le_bytes(buf8) as usize;
    if n != num_params(&model.sizes) {
        return Err(NpeError::Format(format!(
            "{n} weights stored, layer sizes need {}",
            num_params(&model.sizes)
        )));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf8)?;
        params.push(f64::from_le_bytes(buf8));
    }
    if r.read(&mut buf8)? != 0 {
        return Err(NpeError::Format("trailing bytes after weights".into()));
    }
    model.params = params;
    Ok(model)
}

/// Training log as CSV: `epoch,train_nll,val_nll`.
pub fn training_log_csv(model: &PosteriorModel) -> String {
    let mut s = String::from("epoch,train_nll,val_nll\n");
    for e in &model.training_log {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.train_nll, e.val_nll));
    }
    s
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn unit_standardizer(dx: usize, p: usize) -> Standardizer {
        Standardizer {
            x_raw_dim: dx,
            x_keep: (0..dx).collect(),
            x_dropped: vec![],
            x_mean: vec![0.0; dx],
            x_std: vec![1.0; dx],
            theta: ThetaMap { bounds: None, mean: vec![0.0; p], std: vec![1.0; p] },
        }
    }

    #[test]
    fn constant_gaussian_matches_closed_form() {
        let mut st = unit_standardizer(3, 2);
        st.theta.mean = vec![20.0, 1000.0];
        st.theta.std = vec![4.0, 300.0];
        let model = PosteriorModel::constant_gaussian(st, &[5], &[0.5, -1.0], &[0.2, -0.3]);
        let mix = model.condition_std(&[0.3, -2.0, 7.0]);
        let theta = [23.0, 800.0];
        let mut expect = 0.0;
        for p in 0..2 {
            let sd = (SCALE_FLOOR + [0.2f64, -0.3][p].exp()) * [4.0, 300.0][p];
            let mu = [20.0, 1000.0][p] + [4.0, 300.0][p] * [0.5, -1.0][p];
            let u = (theta[p] - mu) / sd;
            expect += -0.5 * u * u - sd.ln() - 0.5 * (2.0 * PI).ln();
        }
        assert!((mix.log_prob(&theta) - expect).abs() < 1e-10);
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (tr, va) = split_indices(100, 0.2, 3);
        assert_eq!(va.len(), 20);
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
