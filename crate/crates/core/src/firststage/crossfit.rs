use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forest::{fit_forest_on, CollapsedRows, ForestConfig};
use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossFitConfig {
    pub n_folds: usize,
    pub shuffle_seed: u64,
}

impl Default for CrossFitConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            shuffle_seed: 11,
        }
    }
}

/// Random assignment of records to folds of near-equal size.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitPlan {
    pub n_folds: usize,
    pub assignment: Vec<usize>,
    pub shuffle_seed: u64,
}

impl CrossFitPlan {
    pub fn new(n_records: usize, n_folds: usize, shuffle_seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::Config(format!(
                "cross-fitting needs at least 2 folds, got {n_folds}"
            )));
        }
        if n_records < n_folds {
            return Err(Error::Data(format!(
                "{n_records} records cannot fill {n_folds} folds"
            )));
        }
        let mut perm: Vec<usize> = (0..n_records).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut assignment = vec![0; n_records];
        for (slot, &i) in perm.iter().enumerate() {
            assignment[i] = slot % n_folds;
        }
        Ok(Self {
            n_folds,
            assignment,
            shuffle_seed,
        })
    }

    pub fn from_config(n_records: usize, cfg: &CrossFitConfig) -> Result<Self> {
        Self::new(n_records, cfg.n_folds, cfg.shuffle_seed)
    }

    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }
}

/// Out-of-fold forest predictions of `y`: each row is predicted by a forest
/// trained on all other folds.
pub fn cross_fit_target(
    x: &FeatureMatrix,
    y: &[f64],
    plan: &CrossFitPlan,
    cfg: &ForestConfig,
) -> Result<Vec<f64>> {
    let rows = CollapsedRows::new(x);
    cross_fit_collapsed(&rows, y, plan, cfg)
}

pub(crate) fn cross_fit_collapsed(
    rows: &CollapsedRows,
    y: &[f64],
    plan: &CrossFitPlan,
    cfg: &ForestConfig,
) -> Result<Vec<f64>> {
    check_dim(plan.assignment.len(), y.len())?;
    let mut out = vec![f64::NAN; y.len()];
    for fold in 0..plan.n_folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| plan.assignment[i] != fold).collect();
        let fold_cfg = ForestConfig {
            seed: cfg.seed.wrapping_add(fold as u64),
            ..cfg.clone()
        };
        let forest = fit_forest_on(rows, y, &train, &fold_cfg)?;
        let per_unique: Vec<f64> = (0..rows.unique.n_rows())
            .map(|u| forest.predict(rows.unique.row(u)))
            .collect();
        for i in 0..y.len() {
            if plan.assignment[i] == fold {
                out[i] = per_unique[rows.row_to_unique[i]];
            }
        }
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite out-of-fold prediction at row {}", i + 1)));
    }
    Ok(out)
}
