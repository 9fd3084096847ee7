//! End-to-end steps shared by the command-line tool and the acceptance
//! harness.

use std::collections::HashMap;

use crate::config::RunConfig;
use crate::dglm::{fit_sequence, DglmConfig, FitResult};
use crate::direct::{extract_theta, train_runs, TrainConfig, TrainResult};
use crate::error::Result;
use crate::features::Dataset;
use crate::firststage::{
    aggregate_group, cross_fit, fit_group_model, u_hat_for_dataset, CrossFitConfig, CrossFitPlan, ForestConfig,
    NuisancePredictions, DEMAND_FLOOR,
};
use crate::metrics::{booking_weights, combo_sensitivities, mape, wmape, ComboEstimate, TruthTable};
use crate::simcore::{simulate, GroundTruthConfig, OracleNuisances};

/// `α = 1/θ` per `[pos][tf]` of the simulator's table.
pub fn truth_table(cfg: &GroundTruthConfig) -> TruthTable {
    cfg.theta_table
        .iter()
        .map(|row| row.iter().map(|t| 1.0 / t).collect())
        .collect()
}

pub fn simulate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let h = simulate(&cfg.sim)?;
    Dataset::new("sim", cfg.schema.clone(), h.records, None)
}

pub fn first_stage(ds: &Dataset, crossfit: &CrossFitConfig, forest: &ForestConfig) -> Result<NuisancePredictions> {
    let plan = CrossFitPlan::from_config(ds.len(), crossfit)?;
    cross_fit(ds, &plan, forest)
}

/// First stage for several markets with the shared group factor attached.
pub fn first_stage_grouped(
    datasets: &[Dataset],
    grouping: &HashMap<String, u32>,
    crossfit: &CrossFitConfig,
    forest: &ForestConfig,
) -> Result<Vec<NuisancePredictions>> {
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let series = aggregate_group(&refs, grouping)?;
    let group = fit_group_model(&series, crossfit, forest)?;
    datasets
        .iter()
        .map(|ds| first_stage(ds, crossfit, forest)?.with_u_hat(u_hat_for_dataset(ds, grouping, &group)?))
        .collect()
}

pub fn second_stage(ds: &Dataset, preds: &NuisancePredictions, cfg: &DglmConfig) -> Result<FitResult> {
    let prior = cfg.prior(ds.schema.design_dim())?;
    fit_sequence(ds, preds, &prior, cfg)
}

/// Generator-side nuisance values for every record of `ds`.
pub fn oracle_predictions(ds: &Dataset, oracle: &OracleNuisances) -> Result<NuisancePredictions> {
    let mut p_hat = Vec::with_capacity(ds.len());
    let mut y_hat = Vec::with_capacity(ds.len());
    for r in &ds.records {
        let (p, y) = oracle.lookup(r)?;
        p_hat.push(p);
        y_hat.push(y.max(DEMAND_FLOOR));
    }
    Ok(NuisancePredictions {
        obs_index: ds.records.iter().map(|r| r.obs_index).collect(),
        p_hat,
        y_hat,
        u_hat: None,
    })
}

#[derive(Debug, Clone)]
pub struct TwoStageRun {
    pub dataset: Dataset,
    pub predictions: NuisancePredictions,
    pub fit: FitResult,
}

/// Simulate, cross-fit and filter with the settings of `cfg`.
pub fn run_two_stage(cfg: &RunConfig) -> Result<TwoStageRun> {
    let dataset = simulate_dataset(cfg)?;
    let predictions = first_stage(&dataset, &cfg.crossfit, &cfg.forest)?;
    let fit = second_stage(&dataset, &predictions, &cfg.dglm)?;
    Ok(TwoStageRun {
        dataset,
        predictions,
        fit,
    })
}

pub fn run_direct(ds: &Dataset, cfg: &TrainConfig, runs: usize) -> Result<Vec<TrainResult>> {
    train_runs(ds, cfg, runs)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub estimates: Vec<ComboEstimate>,
    pub mape: f64,
    pub wmape: f64,
}

/// Scores `theta` against `truth`, weighting by the bookings of `ds`.
pub fn evaluate(theta: &[f64], ds: &Dataset, truth: &TruthTable) -> Result<Evaluation> {
    let estimates = combo_sensitivities(theta, &ds.schema, Some(truth))?;
    let w = booking_weights(ds)?;
    Ok(Evaluation {
        mape: mape(&estimates)?,
        wmape: wmape(&estimates, &w)?,
        estimates,
    })
}

/// Mean MAPE and wMAPE over direct runs.
pub fn evaluate_direct(runs: &[TrainResult], ds: &Dataset, truth: &TruthTable) -> Result<(f64, f64)> {
    let mut m = 0.0;
    let mut w = 0.0;
    for r in runs {
        let e = evaluate(&extract_theta(&r.net), ds, truth)?;
        m += e.mape;
        w += e.wmape;
    }
    Ok((m / runs.len() as f64, w / runs.len() as f64))
}
