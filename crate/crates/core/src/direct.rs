//! One-stage Wide & Deep Poisson network: a linear price block over the
//! elasticity design plus a one-hidden-layer ReLU network over the nuisance
//! features, trained with Adam and early stopping.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::Dataset;

pub const HIDDEN_UNITS: usize = 50;

/// Network parameters. The same shape doubles as a gradient and as Adam's
/// moment buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WideDeepNet {
    pub wide_weights: Vec<f64>,
    /// Hidden × input, stored input-major: entry (h, j) at `j * hidden + h`.
    pub deep_w1: Vec<f64>,
    pub deep_b1: Vec<f64>,
    pub deep_w2: Vec<f64>,
    pub deep_b2: f64,
}

impl WideDeepNet {
    pub fn zeros(dim_w: usize, dim_x: usize, hidden: usize) -> Self {
        Self {
            wide_weights: vec![0.0; dim_w],
            deep_w1: vec![0.0; dim_x * hidden],
            deep_b1: vec![0.0; hidden],
            deep_w2: vec![0.0; hidden],
            deep_b2: 0.0,
        }
    }

    /// Glorot-uniform deep blocks scaled by `init_scale`, zero biases and a
    /// zero wide block.
    pub fn init<R: Rng + ?Sized>(dim_w: usize, dim_x: usize, hidden: usize, init_scale: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(dim_w, dim_x, hidden);
        let s1 = init_scale * (6.0 / (dim_x + hidden) as f64).sqrt();
        let s2 = init_scale * (6.0 / (hidden + 1) as f64).sqrt();
        for v in &mut net.deep_w1 {
            *v = rng.random_range(-1.0..=1.0) * s1;
        }
        for v in &mut net.deep_w2 {
            *v = rng.random_range(-1.0..=1.0) * s2;
        }
        net
    }

    pub fn hidden(&self) -> usize {
        self.deep_b1.len()
    }

    pub fn dim_x(&self) -> usize {
        self.deep_w1.len() / self.hidden().max(1)
    }

    pub fn w1(&self, h: usize, j: usize) -> f64 {
        self.deep_w1[j * self.hidden() + h]
    }

    fn blocks(&self) -> [&[f64]; 5] {
        [
            &self.wide_weights,
            &self.deep_w1,
            &self.deep_b1,
            &self.deep_w2,
            std::slice::from_ref(&self.deep_b2),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.wide_weights,
            &mut self.deep_w1,
            &mut self.deep_b1,
            &mut self.deep_w2,
            std::slice::from_mut(&mut self.deep_b2),
        ]
    }

    fn fill(&mut self, v: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x = v);
        }
    }

    /// Deep part `w2ᵀ·relu(w1·x + b1) + b2`.
    pub fn deep(&self, x: &[f64]) -> f64 {
        let hidden = self.hidden();
        let mut z = self.deep_b1.clone();
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let col = &self.deep_w1[j * hidden..(j + 1) * hidden];
                z.iter_mut().zip(col).for_each(|(z, w)| *z += xj * w);
            }
        }
        z.iter().zip(&self.deep_w2).map(|(z, w)| z.max(0.0) * w).sum::<f64>() + self.deep_b2
    }

    pub fn wide(&self, w: &[f64]) -> f64 {
        self.wide_weights.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

/// `price·(wideᵀW) + deep(X)`.
pub fn forward(net: &WideDeepNet, price: f64, w: &[f64], x: &[f64]) -> Result<f64> {
    check_dim(net.wide_weights.len(), w.len())?;
    check_dim(net.dim_x(), x.len())?;
    Ok(price * net.wide(w) + net.deep(x))
}

/// Poisson negative log-likelihood without the `log y!` term.
pub fn poisson_nll(log_rate: f64, y: f64) -> f64 {
    log_rate.exp() - y * log_rate
}

/// A set of examples: prices, W rows, X rows and counts.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub price: &'a [f64],
    pub w: &'a [&'a [f64]],
    pub x: &'a [&'a [f64]],
    pub y: &'a [f64],
}

/// Mean Poisson NLL over the batch.
pub fn batch_loss(net: &WideDeepNet, batch: &Batch) -> f64 {
    let n = batch.y.len();
    (0..n)
        .map(|i| poisson_nll(batch.price[i] * net.wide(batch.w[i]) + net.deep(batch.x[i]), batch.y[i]))
        .sum::<f64>()
        / n as f64
}

/// Exact gradient of the mean Poisson NLL; the ReLU derivative at 0 is 0.
pub fn backward(net: &WideDeepNet, batch: &Batch) -> Result<WideDeepNet> {
    let n = batch.y.len();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let mut grad = WideDeepNet::zeros(net.wide_weights.len(), net.dim_x(), net.hidden());
    let mut z = vec![0.0; net.hidden()];
    for i in 0..n {
        accumulate(net, batch.price[i], batch.w[i], batch.x[i], batch.y[i], 1.0 / n as f64, &mut z, &mut grad);
    }
    Ok(grad)
}

/// Adds `scale·∂nll/∂params` of one example to `grad` and returns the nll.
#[allow(clippy::too_many_arguments)]
fn accumulate(
    net: &WideDeepNet,
    price: f64,
    w: &[f64],
    x: &[f64],
    y: f64,
    scale: f64,
    z: &mut [f64],
    grad: &mut WideDeepNet,
) -> f64 {
    let hidden = net.hidden();
    z.copy_from_slice(&net.deep_b1);
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let col = &net.deep_w1[j * hidden..(j + 1) * hidden];
            z.iter_mut().zip(col).for_each(|(z, w)| *z += xj * w);
        }
    }
    let deep: f64 = z.iter().zip(&net.deep_w2).map(|(z, w)| z.max(0.0) * w).sum::<f64>() + net.deep_b2;
    let eta = price * net.wide(w) + deep;
    let rate = eta.exp();
    let g = scale * (rate - y);

    let gp = g * price;
    grad.wide_weights.iter_mut().zip(w).for_each(|(a, w)| *a += gp * w);
    grad.deep_b2 += g;
    for h in 0..hidden {
        if z[h] > 0.0 {
            grad.deep_w2[h] += g * z[h];
            let d = g * net.deep_w2[h];
            grad.deep_b1[h] += d;
            z[h] = d;
        } else {
            z[h] = 0.0;
        }
    }
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            let col = &mut grad.deep_w1[j * hidden..(j + 1) * hidden];
            col.iter_mut().zip(z.iter()).for_each(|(c, d)| *c += d * xj);
        }
    }
    rate - y * eta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub validation_fraction: f64,
    pub init_scale: f64,
    pub rng_seed: u64,
    pub early_stopping: bool,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            max_epochs: 500,
            patience_epochs: 20,
            validation_fraction: 0.15,
            init_scale: 1.0,
            rng_seed: 1,
            early_stopping: true,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam constants".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    /// `NaN` when training without a validation split.
    pub val_nll: f64,
    pub best_val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub net: WideDeepNet,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub validation_departures: Vec<u32>,
}

/// Departures held out for validation: a seeded shuffle of the distinct
/// departure ids, taking `ceil(fraction·n)` of them.
pub fn validation_departures<R: Rng + ?Sized>(ds: &Dataset, fraction: f64, rng: &mut R) -> Result<Vec<u32>> {
    let mut ids: Vec<u32> = ds.records.iter().map(|r| r.departure_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let k = (fraction * ids.len() as f64).ceil() as usize;
    if ids.len() < 2 || k == 0 || k >= ids.len() {
        return Err(Error::Data(format!(
            "cannot hold out {fraction} of {} flights for validation",
            ids.len()
        )));
    }
    ids.shuffle(rng);
    let mut val = ids[..k].to_vec();
    val.sort_unstable();
    Ok(val)
}

struct Adam {
    m: WideDeepNet,
    v: WideDeepNet,
    t: i32,
}

impl Adam {
    fn step(&mut self, net: &mut WideDeepNet, grad: &WideDeepNet, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.adam_beta1.powi(self.t);
        let c2 = 1.0 - cfg.adam_beta2.powi(self.t);
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let params = net.blocks_mut();
        let (ms, vs) = (self.m.blocks_mut(), self.v.blocks_mut());
        for (((p, g), m), v) in params.into_iter().zip(grad.blocks()).zip(ms).zip(vs) {
            for k in 0..p.len() {
                let gk = g[k] + cfg.weight_decay * p[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                p[k] -= cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn mean_nll(net: &WideDeepNet, ds: &Dataset, rows: &[usize]) -> f64 {
    rows.iter()
        .map(|&i| {
            let r = &ds.records[i];
            poisson_nll(r.avg_price * net.wide(ds.w.row(i)) + net.deep(ds.x.row(i)), r.bookings as f64)
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Trains one network. With early stopping, a validation set of whole
/// flights is held out and the best-validation parameters are returned;
/// without it, every record is used for training and the final parameters
/// are returned.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let validation = if cfg.early_stopping {
        validation_departures(ds, cfg.validation_fraction, &mut rng)?
    } else {
        Vec::new()
    };
    let (val_rows, mut train_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.len()).partition(|&i| validation.binary_search(&ds.records[i].departure_id).is_ok());

    let mut net = WideDeepNet::init(ds.w.n_cols(), ds.x.n_cols(), HIDDEN_UNITS, cfg.init_scale, &mut rng);
    let shape = || WideDeepNet::zeros(ds.w.n_cols(), ds.x.n_cols(), HIDDEN_UNITS);
    let mut adam = Adam {
        m: shape(),
        v: shape(),
        t: 0,
    };
    let mut grad = shape();
    let mut z = vec![0.0; HIDDEN_UNITS];

    let mut best = (net.clone(), f64::INFINITY, 0);
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        train_rows.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_rows.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let r = &ds.records[i];
                total += accumulate(
                    &net,
                    r.avg_price,
                    ds.w.row(i),
                    ds.x.row(i),
                    r.bookings as f64,
                    scale,
                    &mut z,
                    &mut grad,
                );
            }
            adam.step(&mut net, &grad, cfg);
        }
        let train_nll = total / train_rows.len() as f64;
        if !train_nll.is_finite() {
            return Err(Error::Convergence {
                what: "Wide & Deep training (non-finite loss)",
                iterations: epoch,
            });
        }
        if !cfg.early_stopping {
            log.push(EpochLog {
                epoch,
                train_nll,
                val_nll: f64::NAN,
                best_val_nll: f64::NAN,
            });
            best = (net.clone(), f64::NAN, epoch);
            continue;
        }
        let val_nll = mean_nll(&net, ds, &val_rows);
        if val_nll < best.1 {
            best = (net.clone(), val_nll, epoch);
        }
        log.push(EpochLog {
            epoch,
            train_nll,
            val_nll,
            best_val_nll: best.1,
        });
        if epoch - best.2 >= cfg.patience_epochs {
            break;
        }
    }
    Ok(TrainResult {
        net: best.0,
        log,
        best_epoch: best.2,
        validation_departures: validation,
    })
}

/// Independent runs with seeds `cfg.rng_seed + r`, in parallel.
pub fn train_runs(ds: &Dataset, cfg: &TrainConfig, runs: usize) -> Result<Vec<TrainResult>> {
    (0..runs)
        .into_par_iter()
        .map(|r| {
            train(
                ds,
                &TrainConfig {
                    rng_seed: cfg.rng_seed.wrapping_add(r as u64),
                    ..cfg.clone()
                },
            )
        })
        .collect()
}

/// The price sensitivities are the wide weights.
pub fn extract_theta(net: &WideDeepNet) -> Vec<f64> {
    net.wide_weights.clone()
}

pub fn set_theta(net: &mut WideDeepNet, theta: &[f64]) -> Result<()> {
    check_dim(net.wide_weights.len(), theta.len())?;
    net.wide_weights.copy_from_slice(theta);
    Ok(())
}

pub fn write_training_log<W: Write>(log: &[EpochLog], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["epoch", "train_nll", "val_nll", "best_val_nll"])?;
    for e in log {
        wtr.write_record([
            e.epoch.to_string(),
            e.train_nll.to_string(),
            e.val_nll.to_string(),
            e.best_val_nll.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// On-disk form of a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectExport {
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    pub net: WideDeepNet,
    pub best_epoch: usize,
    pub config: TrainConfig,
}

impl DirectExport {
    pub fn new(result: &TrainResult, names: Vec<String>, config: &TrainConfig) -> Self {
        Self {
            names,
            theta: extract_theta(&result.net),
            net: result.net.clone(),
            best_epoch: result.best_epoch,
            config: config.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }
}
