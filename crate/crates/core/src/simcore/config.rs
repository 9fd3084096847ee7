use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean willingness-to-pay per (POS, TF) used as the default ground truth;
/// the sensitivity is θ = 1/α.
pub const DEFAULT_TRUE_ALPHA: [[f64; 10]; 2] = [
    [150.0, 150.0, 175.0, 185.0, 195.0, 200.0, 210.0, 230.0, 250.0, 300.0],
    [175.0, 190.0, 195.0, 200.0, 210.0, 220.0, 240.0, 260.0, 290.0, 320.0],
];

/// Splits `horizon` days into `n` contiguous frames of (rounded) equal length.
pub fn equal_time_frames(horizon: u32, n: u32) -> Vec<u32> {
    (0..n)
        .map(|k| ((2 * k as u64 * horizon as u64 + n as u64) / (2 * n as u64)) as u32)
        .collect()
}

/// Poisson arrival intensity by departure week, departure weekday, point of
/// sale and booking time frame:
/// `base · (1 + amp·cos(2π(woy − peak)/52)) · dow[dow] · weight[pos][tf]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrivalRateSpec {
    pub base_rate: f64,
    pub woy_amplitude: f64,
    pub woy_peak_week: f64,
    pub dow_multipliers: Vec<f64>,
    pub pos_tf_weights: Vec<Vec<f64>>,
}

impl Default for ArrivalRateSpec {
    fn default() -> Self {
        Self {
            base_rate: 0.3,
            woy_amplitude: 0.35,
            woy_peak_week: 28.0,
            dow_multipliers: vec![1.10, 0.90, 0.85, 0.90, 1.10, 1.20, 0.95],
            pos_tf_weights: vec![
                // POS 0 books mostly in the middle of the horizon
                vec![0.30, 0.55, 0.90, 1.20, 1.40, 1.40, 1.20, 0.95, 0.75, 0.60],
                // POS 1 books late
                vec![0.20, 0.25, 0.35, 0.45, 0.60, 0.80, 1.00, 1.30, 1.60, 1.90],
            ],
        }
    }
}

impl ArrivalRateSpec {
    pub fn rate(&self, woy: u32, dow: u32, pos: usize, tf: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (woy as f64 - self.woy_peak_week) / 52.0;
        self.base_rate
            * (1.0 + self.woy_amplitude * phase.cos())
            * self.dow_multipliers[dow as usize]
            * self.pos_tf_weights[pos][tf]
    }
}

/// Simulator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub capacity: u32,
    pub horizon_days: u32,
    /// First booking day of each time frame; starts at 0, strictly increasing.
    pub tf_boundaries: Vec<u32>,
    /// True sensitivity θ > 0 indexed `[pos][tf]`; acceptance is exp(−θ·price).
    pub theta_table: Vec<Vec<f64>>,
    pub arrival: ArrivalRateSpec,
    pub price_noise_sd: f64,
    pub num_departure_days: u32,
    pub rng_seed: u64,
    /// Upper bound on the per-sub-step arrival probability used to pick the
    /// DP time discretization.
    pub max_substep_prob: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            capacity: 100,
            horizon_days: 365,
            tf_boundaries: equal_time_frames(365, 10),
            theta_table: DEFAULT_TRUE_ALPHA
                .iter()
                .map(|row| row.iter().map(|a| 1.0 / a).collect())
                .collect(),
            arrival: ArrivalRateSpec::default(),
            price_noise_sd: 20.0,
            num_departure_days: 730,
            rng_seed: 20_240_101,
            max_substep_prob: 0.1,
        }
    }
}

impl GroundTruthConfig {
    pub fn n_pos(&self) -> usize {
        self.theta_table.len()
    }

    pub fn n_tf(&self) -> usize {
        self.tf_boundaries.len()
    }

    pub fn theta(&self, pos: usize, tf: usize) -> f64 {
        self.theta_table[pos][tf]
    }

    pub fn tf_of_day(&self, booking_day: u32) -> usize {
        self.tf_boundaries.partition_point(|&b| b <= booking_day) - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.capacity < 1 {
            return bad("capacity must be at least 1".into());
        }
        if self.horizon_days < 1 {
            return bad("horizon_days must be at least 1".into());
        }
        if self.tf_boundaries.first() != Some(&0) {
            return bad("tf_boundaries must start at day 0".into());
        }
        if self.tf_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tf_boundaries must be strictly increasing".into());
        }
        if *self.tf_boundaries.last().unwrap() >= self.horizon_days {
            return bad("tf_boundaries must lie inside the booking horizon".into());
        }
        if self.theta_table.is_empty() {
            return bad("theta_table needs at least one point of sale".into());
        }
        for (pos, row) in self.theta_table.iter().enumerate() {
            if row.len() != self.n_tf() {
                return bad(format!(
                    "theta_table row {pos} has {} entries, expected {}",
                    row.len(),
                    self.n_tf()
                ));
            }
            if let Some(t) = row.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
                return bad(format!("theta must be positive, found {t} for pos {pos}"));
            }
        }
        if !(self.price_noise_sd >= 0.0 && self.price_noise_sd.is_finite()) {
            return bad("price_noise_sd must be non-negative".into());
        }
        if !(self.max_substep_prob > 0.0 && self.max_substep_prob <= 1.0) {
            return bad("max_substep_prob must lie in (0, 1]".into());
        }
        let a = &self.arrival;
        if !(a.base_rate > 0.0) {
            return bad("arrival.base_rate must be positive".into());
        }
        if !(a.woy_amplitude >= 0.0 && a.woy_amplitude < 1.0) {
            return bad("arrival.woy_amplitude must lie in [0, 1)".into());
        }
        if a.dow_multipliers.len() != 7 || a.dow_multipliers.iter().any(|m| !(*m > 0.0)) {
            return bad("arrival.dow_multipliers needs 7 positive values".into());
        }
        if a.pos_tf_weights.len() != self.n_pos()
            || a.pos_tf_weights.iter().any(|r| r.len() != self.n_tf())
        {
            return bad("arrival.pos_tf_weights must match the theta_table shape".into());
        }
        if a.pos_tf_weights.iter().flatten().any(|w| !(*w >= 0.0)) {
            return bad("arrival.pos_tf_weights must be non-negative".into());
        }
        Ok(())
    }
}
