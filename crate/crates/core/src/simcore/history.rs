use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;

use super::bid_price::{departure_calendar, solve_bid_prices, BidPriceTable, DepartureProfile};
use super::config::GroundTruthConfig;
use super::TransactionRecord;
use crate::error::{Error, Result};

/// Offered prices never drop below this floor.
pub const MIN_PRICE: f64 = 1.0;

const TIE_BREAK_STREAM: u64 = u64::MAX;

/// Generator-side quantities attached to each record. They are not part of
/// the observable data; tests and oracle nuisances use them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RecordDiagnostics {
    /// Sum over the day's sub-steps of `π·exp(−θ·price)` while seats remain.
    pub expected_bookings: f64,
    pub arrivals: u32,
    /// Sum of `exp(−θ·price)` over the day's arrivals.
    pub arrival_accept_prob: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimulatedHistory {
    /// Sorted by `obs_index`.
    pub records: Vec<TransactionRecord>,
    /// Aligned with `records`.
    pub diagnostics: Vec<RecordDiagnostics>,
}

/// Generates the full transaction history of `cfg`.
pub fn generate_history(cfg: &GroundTruthConfig) -> Result<Vec<TransactionRecord>> {
    Ok(simulate(cfg)?.records)
}

/// Like [`generate_history`] but keeps the per-record diagnostics.
pub fn simulate(cfg: &GroundTruthConfig) -> Result<SimulatedHistory> {
    cfg.validate()?;
    let per_departure: Vec<Vec<(TransactionRecord, RecordDiagnostics)>> = (0..cfg.num_departure_days)
        .into_par_iter()
        .map(|d| simulate_departure(cfg, d))
        .collect::<Result<_>>()?;

    let mut tie_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    tie_rng.set_stream(TIE_BREAK_STREAM);
    let mut keyed: Vec<(u64, u64, TransactionRecord, RecordDiagnostics)> = per_departure
        .into_iter()
        .flatten()
        .map(|(r, diag)| {
            let wall = r.departure_id as u64 + r.booking_day as u64;
            (wall, tie_rng.random::<u64>(), r, diag)
        })
        .collect();
    keyed.sort_by_key(|k| (k.0, k.1));

    let mut out = SimulatedHistory {
        records: Vec::with_capacity(keyed.len()),
        diagnostics: Vec::with_capacity(keyed.len()),
    };
    for (j, (_, _, mut r, diag)) in keyed.into_iter().enumerate() {
        r.obs_index = j as u64;
        out.records.push(r);
        out.diagnostics.push(diag);
    }
    Ok(out)
}

fn departure_rng(seed: u64, departure_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(departure_id as u64);
    rng
}

#[inline]
fn offered_price(bid: f64, theta: f64, eps: f64) -> f64 {
    (bid + 1.0 / theta + eps).max(MIN_PRICE)
}

#[derive(Clone, Copy, Default)]
struct DayAccumulator {
    booked_revenue: f64,
    bookings: u32,
    offered_sum: f64,
    diag: RecordDiagnostics,
}

fn simulate_departure(
    cfg: &GroundTruthConfig,
    departure_id: u32,
) -> Result<Vec<(TransactionRecord, RecordDiagnostics)>> {
    let profile = DepartureProfile::for_departure(cfg, departure_id);
    let table = solve_bid_prices(cfg, &profile)?;
    let mut rng = departure_rng(cfg.rng_seed, departure_id);
    run_departure(cfg, departure_id, &profile, &table, &mut rng)
}

fn run_departure(
    cfg: &GroundTruthConfig,
    departure_id: u32,
    profile: &DepartureProfile,
    table: &BidPriceTable,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(TransactionRecord, RecordDiagnostics)>> {
    let (woy, dow) = departure_calendar(departure_id);
    let n_pos = cfg.n_pos();
    let k_per_day = table.sub_steps_per_day();
    let noise = if cfg.price_noise_sd > 0.0 {
        Some(Normal::new(0.0, cfg.price_noise_sd).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };

    let mut seats = cfg.capacity as usize;
    let mut out = Vec::with_capacity(cfg.horizon_days as usize * n_pos);
    let mut eps = vec![0.0; n_pos];
    let mut acc = vec![DayAccumulator::default(); n_pos];
    let mut start_price = vec![0.0; n_pos];
    let mut probs = vec![0.0; n_pos];

    for day in 0..cfg.horizon_days {
        if seats == 0 {
            break;
        }
        let tf = cfg.tf_of_day(day);
        let rates = &profile.rates[day as usize];
        let thetas = &profile.thetas[day as usize];
        for p in 0..n_pos {
            eps[p] = noise.map_or(0.0, |n| n.sample(rng));
            probs[p] = rates[p] / k_per_day as f64;
            acc[p] = DayAccumulator::default();
        }
        let k0 = day as usize * k_per_day;
        let bid0 = table.bid_price(k0, seats);
        for p in 0..n_pos {
            start_price[p] = offered_price(bid0, thetas[p], eps[p]);
        }

        for sub in 0..k_per_day {
            if seats == 0 {
                break;
            }
            let bid = table.bid_price(k0 + sub, seats);
            for p in 0..n_pos {
                let price = offered_price(bid, thetas[p], eps[p]);
                acc[p].diag.expected_bookings += probs[p] * (-thetas[p] * price).exp();
            }
            let u: f64 = rng.random();
            let mut cum = 0.0;
            let arriving = (0..n_pos).find(|&p| {
                cum += probs[p];
                u < cum
            });
            if let Some(p) = arriving {
                let price = offered_price(bid, thetas[p], eps[p]);
                let a = &mut acc[p];
                a.diag.arrivals += 1;
                a.diag.arrival_accept_prob += (-thetas[p] * price).exp();
                a.offered_sum += price;
                let wtp = Exp::new(thetas[p])
                    .map_err(|e| Error::Config(e.to_string()))?
                    .sample(rng);
                if wtp >= price {
                    a.bookings += 1;
                    a.booked_revenue += price;
                    seats -= 1;
                }
            }
        }

        for p in 0..n_pos {
            let a = &acc[p];
            let avg_price = if a.bookings > 0 {
                a.booked_revenue / a.bookings as f64
            } else if a.diag.arrivals > 0 {
                a.offered_sum / a.diag.arrivals as f64
            } else {
                start_price[p]
            };
            out.push((
                TransactionRecord {
                    departure_id,
                    booking_day: day,
                    obs_index: 0,
                    woy: woy as u8,
                    dow: dow as u8,
                    pos: p as u8,
                    tf: tf as u8,
                    avg_price,
                    bookings: a.bookings,
                },
                a.diag,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GroundTruthConfig {
        GroundTruthConfig {
            horizon_days: 60,
            tf_boundaries: vec![0, 20, 40],
            theta_table: vec![vec![0.006, 0.005, 0.004], vec![0.005, 0.004, 0.003]],
            arrival: super::super::config::ArrivalRateSpec {
                pos_tf_weights: vec![vec![0.5, 1.0, 0.5], vec![0.2, 0.6, 1.2]],
                ..Default::default()
            },
            capacity: 20,
            num_departure_days: 30,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small_config();
        let a = generate_history(&cfg).unwrap();
        let b = generate_history(&cfg).unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.rng_seed += 1;
        assert_ne!(a, generate_history(&other).unwrap());
    }

    #[test]
    fn capacity_is_never_exceeded() {
        let mut cfg = small_config();
        cfg.arrival.base_rate = 3.0;
        cfg.capacity = 5;
        let recs = generate_history(&cfg).unwrap();
        let mut totals = vec![0u32; cfg.num_departure_days as usize];
        for r in &recs {
            totals[r.departure_id as usize] += r.bookings;
        }
        assert!(totals.iter().all(|&t| t <= 5));
        assert!(totals.iter().any(|&t| t == 5));
    }

    #[test]
    fn records_are_well_formed_and_ordered() {
        let cfg = small_config();
        let h = simulate(&cfg).unwrap();
        assert_eq!(h.records.len(), h.diagnostics.len());
        for (j, w) in h.records.windows(2).enumerate() {
            assert_eq!(w[0].obs_index, j as u64);
            let k0 = w[0].departure_id + w[0].booking_day;
            let k1 = w[1].departure_id + w[1].booking_day;
            assert!(k0 <= k1);
        }
        for r in &h.records {
            assert!(r.avg_price > 0.0);
            assert_eq!(r.tf as usize, cfg.tf_of_day(r.booking_day));
            let (woy, dow) = departure_calendar(r.departure_id);
            assert_eq!((r.woy as u32, r.dow as u32), (woy, dow));
        }
    }

    #[test]
    fn tiny_arrival_rate_gives_no_bookings_and_day_start_prices() {
        let mut cfg = small_config();
        cfg.arrival.base_rate = 1e-12;
        cfg.price_noise_sd = 0.0;
        let recs = generate_history(&cfg).unwrap();
        assert!(recs.iter().all(|r| r.bookings == 0));
        // essentially no demand means a zero bid price
        for r in &recs {
            let theta = cfg.theta(r.pos as usize, r.tf as usize);
            assert!((r.avg_price - 1.0 / theta).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_single_step_price_is_markup_over_bid() {
        let cfg = GroundTruthConfig {
            capacity: 1,
            horizon_days: 1,
            tf_boundaries: vec![0],
            theta_table: vec![vec![0.01]],
            arrival: super::super::config::ArrivalRateSpec {
                base_rate: 1.0,
                woy_amplitude: 0.0,
                dow_multipliers: vec![1.0; 7],
                pos_tf_weights: vec![vec![1.0]],
                ..Default::default()
            },
            price_noise_sd: 0.0,
            num_departure_days: 50,
            max_substep_prob: 1.0,
            ..Default::default()
        };
        let recs = generate_history(&cfg).unwrap();
        assert_eq!(recs.len(), 50);
        for r in &recs {
            assert_eq!(r.avg_price, 100.0);
        }
    }

    #[test]
    fn acceptance_fraction_matches_exponential_wtp() {
        // generous capacity so the bid price stays far from binding
        let cfg = GroundTruthConfig {
            capacity: 400,
            horizon_days: 20,
            tf_boundaries: vec![0],
            theta_table: vec![vec![0.008]],
            arrival: super::super::config::ArrivalRateSpec {
                base_rate: 2.0,
                woy_amplitude: 0.0,
                dow_multipliers: vec![1.0; 7],
                pos_tf_weights: vec![vec![1.0]],
                ..Default::default()
            },
            price_noise_sd: 0.0,
            num_departure_days: 300,
            ..Default::default()
        };
        let h = simulate(&cfg).unwrap();
        let arrivals: u32 = h.diagnostics.iter().map(|d| d.arrivals).sum();
        assert!(arrivals >= 10_000, "only {arrivals} arrivals");
        let bookings: f64 = h.records.iter().map(|r| r.bookings as f64).sum();
        let expected: f64 = h.diagnostics.iter().map(|d| d.arrival_accept_prob).sum();
        // Bernoulli variance bound p(1-p) <= p
        let se = expected.sqrt();
        assert!(
            (bookings - expected).abs() <= 3.0 * se,
            "bookings {bookings} vs expected {expected} (se {se})"
        );
        let frac = bookings / arrivals as f64;
        assert!((frac - (-1.0f64).exp()).abs() < 0.03, "acceptance fraction {frac}");
    }

    #[test]
    fn default_booking_shares_follow_pos_profiles() {
        let mut cfg = GroundTruthConfig::default();
        cfg.num_departure_days = 56;
        let recs = generate_history(&cfg).unwrap();
        let mut by = vec![vec![0u32; cfg.n_tf()]; 2];
        for r in &recs {
            by[r.pos as usize][r.tf as usize] += r.bookings;
        }
        let argmax = |v: &Vec<u32>| (0..v.len()).max_by_key(|&i| v[i]).unwrap();
        let mid0 = argmax(&by[0]);
        assert!((2..=7).contains(&mid0), "POS 0 peak at TF {mid0}: {:?}", by[0]);
        assert!(by[0][mid0] > by[0][0] && by[0][mid0] > by[0][9]);
        assert!(argmax(&by[1]) >= 7, "POS 1 should peak late: {:?}", by[1]);
    }
}
