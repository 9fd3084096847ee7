//! Single-leg revenue-management dynamic program.
//!
//! Time is discretized into sub-steps small enough that at most one customer
//! arrives per sub-step. An arriving customer from point of sale `p` is quoted
//! the myopically optimal price `Δ + 1/θ_p`, where `Δ` is the marginal value of
//! the seat at the next sub-step, and buys with probability `exp(−θ_p·price)`.

use super::config::GroundTruthConfig;
use crate::error::{Error, Result};

/// Arrival intensities and sensitivities over the booking horizon of one
/// departure, indexed `[booking_day][pos]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepartureProfile {
    pub rates: Vec<Vec<f64>>,
    pub thetas: Vec<Vec<f64>>,
}

impl DepartureProfile {
    pub fn for_departure(cfg: &GroundTruthConfig, departure_day: u32) -> Self {
        let (woy, dow) = departure_calendar(departure_day);
        let mut rates = Vec::with_capacity(cfg.horizon_days as usize);
        let mut thetas = Vec::with_capacity(cfg.horizon_days as usize);
        for day in 0..cfg.horizon_days {
            let tf = cfg.tf_of_day(day);
            rates.push(
                (0..cfg.n_pos())
                    .map(|p| cfg.arrival.rate(woy, dow, p, tf))
                    .collect(),
            );
            thetas.push((0..cfg.n_pos()).map(|p| cfg.theta(p, tf)).collect());
        }
        Self { rates, thetas }
    }

    pub fn n_days(&self) -> usize {
        self.rates.len()
    }

    pub fn max_daily_rate(&self) -> f64 {
        self.rates
            .iter()
            .map(|r| r.iter().sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Week of year and day of week of a departure day index.
pub fn departure_calendar(departure_day: u32) -> (u32, u32) {
    ((departure_day / 7) % 52, departure_day % 7)
}

/// Expected future revenue `V(k, s)` for every sub-step `k` (including the
/// terminal one) and remaining seats `s`.
#[derive(Debug, Clone)]
pub struct BidPriceTable {
    capacity: usize,
    sub_steps_per_day: usize,
    n_steps: usize,
    values: Vec<f64>,
}

impl BidPriceTable {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn sub_steps_per_day(&self) -> usize {
        self.sub_steps_per_day
    }

    /// Number of non-terminal sub-steps.
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn value(&self, k: usize, s: usize) -> f64 {
        self.values[k * (self.capacity + 1) + s]
    }

    /// `V(k, s) − V(k, s − 1)` for `s ≥ 1`.
    #[inline]
    pub fn marginal(&self, k: usize, s: usize) -> f64 {
        let row = k * (self.capacity + 1);
        self.values[row + s] - self.values[row + s - 1]
    }

    /// Opportunity cost of selling one of `s ≥ 1` remaining seats during
    /// sub-step `k`.
    #[inline]
    pub fn bid_price(&self, k: usize, s: usize) -> f64 {
        self.marginal(k + 1, s)
    }
}

/// Solves the DP with the sub-step count chosen so that the total arrival
/// probability per sub-step stays below `cfg.max_substep_prob`.
pub fn solve_bid_prices(cfg: &GroundTruthConfig, profile: &DepartureProfile) -> Result<BidPriceTable> {
    let k = (profile.max_daily_rate() / cfg.max_substep_prob).ceil().max(1.0) as usize;
    solve_bid_prices_with_sub_steps(profile, cfg.capacity as usize, k)
}

pub fn solve_bid_prices_with_sub_steps(
    profile: &DepartureProfile,
    capacity: usize,
    sub_steps_per_day: usize,
) -> Result<BidPriceTable> {
    if sub_steps_per_day == 0 {
        return Err(Error::Config("sub_steps_per_day must be at least 1".into()));
    }
    let k_per_day = sub_steps_per_day as f64;
    for (day, rates) in profile.rates.iter().enumerate() {
        let p: f64 = rates.iter().sum::<f64>() / k_per_day;
        if p > 1.0 {
            return Err(Error::Config(format!(
                "arrival probability {p:.3} per sub-step on day {day} exceeds 1"
            )));
        }
    }

    let n_steps = profile.n_days() * sub_steps_per_day;
    let width = capacity + 1;
    let mut values = vec![0.0; (n_steps + 1) * width];
    for k in (0..n_steps).rev() {
        let day = k / sub_steps_per_day;
        let rates = &profile.rates[day];
        let thetas = &profile.thetas[day];
        let (head, tail) = values.split_at_mut((k + 1) * width);
        let next = &tail[..width];
        let cur = &mut head[k * width..];
        cur[0] = 0.0;
        for s in 1..=capacity {
            let delta = next[s] - next[s - 1];
            // with p* = Δ + 1/θ the expected gain over keeping the seat is
            // exp(−θp*)·(p* − Δ) = exp(−1 − θΔ)/θ
            let gain: f64 = rates
                .iter()
                .zip(thetas)
                .map(|(&r, &th)| r / k_per_day * (-1.0 - th * delta).exp() / th)
                .sum();
            cur[s] = next[s] + gain;
        }
    }
    Ok(BidPriceTable {
        capacity,
        sub_steps_per_day,
        n_steps,
        values,
    })
}

/// Price maximizing `exp(−θp)(p − c)`.
pub fn ground_truth_optimal_price(bid: f64, theta: f64) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(Error::Domain(format!("theta must be positive, got {theta}")));
    }
    Ok(bid + 1.0 / theta)
}
