//! Synthetic single-leg airline sales with a confounded pricing policy.
//!
//! Prices come from a bid-price DP plus the optimal markup `1/θ` plus daily
//! Gaussian noise, so observed price and demand share the same drivers.

mod bid_price;
mod config;
mod history;
mod oracle;

use serde::{Deserialize, Serialize};

pub use bid_price::{
    departure_calendar, ground_truth_optimal_price, solve_bid_prices, solve_bid_prices_with_sub_steps,
    BidPriceTable, DepartureProfile,
};
pub use config::{equal_time_frames, ArrivalRateSpec, GroundTruthConfig, DEFAULT_TRUE_ALPHA};
pub use history::{generate_history, simulate, RecordDiagnostics, SimulatedHistory, MIN_PRICE};
pub use oracle::{oracle_nuisances, OracleNuisances};

/// One (departure, booking day, point of sale) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub departure_id: u32,
    /// 0 is the day farthest from departure.
    pub booking_day: u32,
    /// Global wall-clock order.
    #[serde(rename = "obs_index")]
    pub obs_index: u64,
    pub woy: u8,
    pub dow: u8,
    pub pos: u8,
    pub tf: u8,
    pub avg_price: f64,
    pub bookings: u32,
}
