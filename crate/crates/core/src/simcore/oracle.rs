use std::collections::HashMap;

use super::config::GroundTruthConfig;
use super::history::simulate;
use super::TransactionRecord;
use crate::error::{Error, Result};

type Cell = (u8, u8, u8, u8);

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    price: f64,
    bookings: f64,
    n: f64,
}

impl Moments {
    fn add(&mut self, price: f64, bookings: f64) {
        self.price += price;
        self.bookings += bookings;
        self.n += 1.0;
    }

    fn mean(&self) -> (f64, f64) {
        (self.price / self.n, self.bookings / self.n)
    }
}

/// Generator-side conditional means `E[P|X]` and `E[Y|X]` per
/// (pos, tf, dow, woy) cell, estimated from independent replicate histories.
#[derive(Debug, Clone)]
pub struct OracleNuisances {
    cells: HashMap<Cell, Moments>,
    coarse: HashMap<(u8, u8), Moments>,
}

impl OracleNuisances {
    /// `(p_hat, y_hat)` for the record's cell. Cells never seen in the
    /// replicates fall back to the (pos, tf) mean.
    pub fn lookup(&self, r: &TransactionRecord) -> Result<(f64, f64)> {
        if let Some(m) = self.cells.get(&(r.pos, r.tf, r.dow, r.woy)) {
            return Ok(m.mean());
        }
        self.coarse
            .get(&(r.pos, r.tf))
            .map(Moments::mean)
            .ok_or_else(|| Error::Data(format!("no oracle cell for pos {} tf {}", r.pos, r.tf)))
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Averages realized prices and expected bookings over `replicates`
/// histories simulated with seeds distinct from `cfg.rng_seed`.
pub fn oracle_nuisances(cfg: &GroundTruthConfig, replicates: u32) -> Result<OracleNuisances> {
    if replicates == 0 {
        return Err(Error::Config("oracle needs at least one replicate".into()));
    }
    let mut cells: HashMap<Cell, Moments> = HashMap::new();
    let mut coarse: HashMap<(u8, u8), Moments> = HashMap::new();
    for r in 1..=replicates as u64 {
        let mut rep = cfg.clone();
        rep.rng_seed = cfg.rng_seed.wrapping_add(r.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let h = simulate(&rep)?;
        for (rec, diag) in h.records.iter().zip(&h.diagnostics) {
            cells
                .entry((rec.pos, rec.tf, rec.dow, rec.woy))
                .or_default()
                .add(rec.avg_price, diag.expected_bookings);
            coarse
                .entry((rec.pos, rec.tf))
                .or_default()
                .add(rec.avg_price, diag.expected_bookings);
        }
    }
    Ok(OracleNuisances { cells, coarse })
}
