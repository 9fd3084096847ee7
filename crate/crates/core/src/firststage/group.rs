//! Group-level aggregate demand used as a shared latent factor.

use std::collections::{BTreeMap, HashMap};

use super::crossfit::{cross_fit_target, CrossFitConfig, CrossFitPlan};
use super::forest::ForestConfig;
use super::DEMAND_FLOOR;
use crate::error::{Error, Result};
use crate::features::{fourier_seasonality, Dataset, FeatureMatrix, N_DOW, N_FOURIER};

/// Wall-clock time unit shared by concurrent observations of a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeUnit {
    pub departure_id: u32,
    pub booking_day: u32,
}

/// Aggregated bookings `U_gt` and shared calendar features of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSeries {
    pub group_id: u32,
    pub units: Vec<TimeUnit>,
    pub u: Vec<f64>,
    /// Intercept, TF one-hot, DOW one-hot and the seasonal terms.
    pub x: FeatureMatrix,
}

/// Group of each record: the dataset's own `group_ids` column when present,
/// else the market-level mapping.
fn record_groups(ds: &Dataset, grouping: &HashMap<String, u32>) -> Result<Vec<u32>> {
    if let Some(g) = &ds.group_ids {
        return Ok(g.clone());
    }
    let g = grouping
        .get(&ds.market_id)
        .ok_or_else(|| Error::Data(format!("market '{}' is not mapped to a group", ds.market_id)))?;
    Ok(vec![*g; ds.len()])
}

pub fn aggregate_group(datasets: &[&Dataset], grouping: &HashMap<String, u32>) -> Result<Vec<GroupSeries>> {
    // (group, unit) -> (bookings, tf, dow, woy, n_tf)
    let mut cells: BTreeMap<(u32, TimeUnit), (f64, u8, u8, u8, usize)> = BTreeMap::new();
    for ds in datasets {
        let groups = record_groups(ds, grouping)?;
        for (r, g) in ds.records.iter().zip(groups) {
            let unit = TimeUnit {
                departure_id: r.departure_id,
                booking_day: r.booking_day,
            };
            let e = cells
                .entry((g, unit))
                .or_insert((0.0, r.tf, r.dow, r.woy, ds.schema.n_tf));
            e.0 += r.bookings as f64;
        }
    }

    let mut out: Vec<GroupSeries> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for ((g, unit), (u, tf, dow, woy, n_tf)) in cells {
        if out.last().is_none_or(|s| s.group_id != g) {
            if let Some(last) = out.last_mut() {
                last.x = FeatureMatrix::from_rows(&rows)?;
                rows.clear();
            }
            out.push(GroupSeries {
                group_id: g,
                units: Vec::new(),
                u: Vec::new(),
                x: FeatureMatrix::zeros(0, 0),
            });
        }
        let s = out.last_mut().unwrap();
        s.units.push(unit);
        s.u.push(u);
        let mut row = vec![0.0; 1 + n_tf + N_DOW + N_FOURIER];
        row[0] = 1.0;
        row[1 + tf as usize] = 1.0;
        row[1 + n_tf + dow as usize] = 1.0;
        row[1 + n_tf + N_DOW..].copy_from_slice(&fourier_seasonality(woy)?);
        rows.push(row);
    }
    if let Some(last) = out.last_mut() {
        last.x = FeatureMatrix::from_rows(&rows)?;
    }
    Ok(out)
}

/// Cross-fitted `Û_gt` per (group, time unit), floored at [`DEMAND_FLOOR`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupPredictions {
    pub u_hat: HashMap<(u32, TimeUnit), f64>,
}

pub fn fit_group_model(
    series: &[GroupSeries],
    crossfit: &CrossFitConfig,
    forest: &ForestConfig,
) -> Result<GroupPredictions> {
    let mut u_hat = HashMap::new();
    for s in series {
        let plan = CrossFitPlan::from_config(s.u.len(), crossfit)?;
        let pred = cross_fit_target(&s.x, &s.u, &plan, forest)?;
        for (unit, p) in s.units.iter().zip(pred) {
            u_hat.insert((s.group_id, *unit), p.max(DEMAND_FLOOR));
        }
    }
    Ok(GroupPredictions { u_hat })
}

/// Looks up `Û` for every record of `ds`.
pub fn u_hat_for_dataset(
    ds: &Dataset,
    grouping: &HashMap<String, u32>,
    preds: &GroupPredictions,
) -> Result<Vec<f64>> {
    let groups = record_groups(ds, grouping)?;
    ds.records
        .iter()
        .zip(groups)
        .map(|(r, g)| {
            let unit = TimeUnit {
                departure_id: r.departure_id,
                booking_day: r.booking_day,
            };
            preds.u_hat.get(&(g, unit)).copied().ok_or_else(|| {
                Error::Data(format!(
                    "no group prediction for group {g} at departure {} day {}",
                    r.departure_id, r.booking_day
                ))
            })
        })
        .collect()
}
