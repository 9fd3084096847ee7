//! Cross-fitted nonparametric nuisance models: `E[P|X]`, `E[Y|X]` and the
//! group factor `E[U|X̃]`.

mod crossfit;
mod forest;
mod group;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crossfit::{cross_fit_target, CrossFitConfig, CrossFitPlan};
pub use forest::{fit_forest, fit_forest_on, CollapsedRows, ForestConfig, Node, RegressionForest, Tree};
pub use group::{aggregate_group, fit_group_model, u_hat_for_dataset, GroupPredictions, GroupSeries, TimeUnit};

use crate::error::{check_dim, Error, Result};
use crate::features::Dataset;

/// Lower bound applied to demand predictions before they enter a log.
pub const DEMAND_FLOOR: f64 = 1e-3;

/// First-stage outputs aligned with a dataset's records.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions {
    pub obs_index: Vec<u64>,
    pub p_hat: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub u_hat: Option<Vec<f64>>,
}

impl NuisancePredictions {
    pub fn len(&self) -> usize {
        self.obs_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs_index.is_empty()
    }

    /// Verifies record-by-record `obs_index` agreement with `ds`.
    pub fn check_alignment(&self, ds: &Dataset) -> Result<()> {
        if self.len() != ds.len() {
            return Err(Error::Data(format!(
                "predictions have {} rows but the dataset has {}",
                self.len(),
                ds.len()
            )));
        }
        for (i, (a, r)) in self.obs_index.iter().zip(&ds.records).enumerate() {
            if *a != r.obs_index {
                return Err(Error::Data(format!(
                    "prediction row {} has obs_index {a}, dataset has {}",
                    i + 1,
                    r.obs_index
                )));
            }
        }
        check_dim(self.len(), self.p_hat.len())?;
        check_dim(self.len(), self.y_hat.len())?;
        if let Some(u) = &self.u_hat {
            check_dim(self.len(), u.len())?;
        }
        Ok(())
    }

    pub fn with_u_hat(mut self, u_hat: Vec<f64>) -> Result<Self> {
        check_dim(self.len(), u_hat.len())?;
        self.u_hat = Some(u_hat.into_iter().map(|u| u.max(DEMAND_FLOOR)).collect());
        Ok(self)
    }
}

/// Out-of-fold price and demand predictions for every record of `ds`.
pub fn cross_fit(ds: &Dataset, plan: &CrossFitPlan, cfg: &ForestConfig) -> Result<NuisancePredictions> {
    check_dim(ds.len(), plan.assignment.len())?;
    let rows = CollapsedRows::new(&ds.x);
    let price: Vec<f64> = ds.records.iter().map(|r| r.avg_price).collect();
    let bookings: Vec<f64> = ds.records.iter().map(|r| r.bookings as f64).collect();
    let p_hat = crossfit::cross_fit_collapsed(&rows, &price, plan, cfg)?;
    let y_hat = crossfit::cross_fit_collapsed(&rows, &bookings, plan, cfg)?
        .into_iter()
        .map(|y| y.max(DEMAND_FLOOR))
        .collect();
    Ok(NuisancePredictions {
        obs_index: ds.records.iter().map(|r| r.obs_index).collect(),
        p_hat,
        y_hat,
        u_hat: None,
    })
}

#[derive(Serialize, Deserialize)]
struct PredRow {
    obs_index: u64,
    p_hat: f64,
    y_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    u_hat: Option<f64>,
}

pub fn write_predictions<W: Write>(preds: &NuisancePredictions, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    let mut header = vec!["obs_index", "p_hat", "y_hat"];
    if preds.u_hat.is_some() {
        header.push("u_hat");
    }
    wtr.write_record(&header)?;
    for i in 0..preds.len() {
        wtr.serialize(PredRow {
            obs_index: preds.obs_index[i],
            p_hat: preds.p_hat[i],
            y_hat: preds.y_hat[i],
            u_hat: preds.u_hat.as_ref().map(|u| u[i]),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R) -> Result<NuisancePredictions> {
    let mut rdr = csv::Reader::from_reader(reader);
    let has_u = match rdr.headers()?.iter().collect::<Vec<_>>().as_slice() {
        ["obs_index", "p_hat", "y_hat"] => false,
        ["obs_index", "p_hat", "y_hat", "u_hat"] => true,
        other => {
            return Err(Error::Schema {
                row: 0,
                msg: format!("unexpected prediction header {other:?}"),
            })
        }
    };
    let mut out = NuisancePredictions {
        obs_index: Vec::new(),
        p_hat: Vec::new(),
        y_hat: Vec::new(),
        u_hat: has_u.then(Vec::new),
    };
    for (i, row) in rdr.deserialize::<PredRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(i as u64 + 2, |p| p.line()),
            msg: e.to_string(),
        })?;
        if !(row.y_hat > 0.0) || !row.p_hat.is_finite() || row.u_hat.is_some_and(|u| !(u > 0.0)) {
            return Err(Error::Schema {
                row: i + 1,
                msg: "predictions must be finite with positive demand".into(),
            });
        }
        out.obs_index.push(row.obs_index);
        out.p_hat.push(row.p_hat);
        out.y_hat.push(row.y_hat);
        if let Some(u) = out.u_hat.as_mut() {
            u.push(row.u_hat.ok_or_else(|| Error::Schema {
                row: i + 1,
                msg: "missing u_hat".into(),
            })?);
        }
    }
    Ok(out)
}

pub fn save_predictions(preds: &NuisancePredictions, path: &Path) -> Result<()> {
    write_predictions(preds, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_predictions(path: &Path) -> Result<NuisancePredictions> {
    read_predictions(std::fs::File::open(path)?)
}
