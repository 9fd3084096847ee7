//! Run configuration: one TOML table per module plus `section.key=value`
//! overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dglm::DglmConfig;
use crate::direct::TrainConfig;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::firststage::{CrossFitConfig, ForestConfig};
use crate::policy::{PolicyKind, DEFAULT_GRID_POINTS};
use crate::simcore::GroundTruthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// UCB quantile level.
    pub quantile: f64,
    pub grid_points: usize,
    pub seed: u64,
    pub pos: u8,
    pub tf: u8,
    pub cost: f64,
    pub p_lb: f64,
    pub p_ub: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Greedy,
            quantile: 0.9,
            grid_points: DEFAULT_GRID_POINTS,
            seed: 0,
            pos: 0,
            tf: 0,
            cost: 0.0,
            p_lb: 0.0,
            p_ub: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: GroundTruthConfig,
    pub schema: FeatureSchema,
    pub forest: ForestConfig,
    pub crossfit: CrossFitConfig,
    pub dglm: DglmConfig,
    pub direct: TrainConfig,
    pub policy: PolicyConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) over the defaults, then applies `overrides` of
    /// the form `section.key=value`. Values are parsed as TOML and fall back
    /// to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.schema.validate()?;
        if self.schema.n_pos != self.sim.n_pos() || self.schema.n_tf != self.sim.n_tf() {
            return Err(Error::Config(format!(
                "schema has {} POS x {} TF but the simulator has {} x {}",
                self.schema.n_pos,
                self.schema.n_tf,
                self.sim.n_pos(),
                self.sim.n_tf()
            )));
        }
        if self.crossfit.n_folds < 2 {
            return Err(Error::Config("crossfit.n_folds must be at least 2".into()));
        }
        self.direct.validate()?;
        let p = &self.policy;
        if p.p_lb > p.p_ub {
            return Err(Error::Config(format!("policy bounds out of order: [{}, {}]", p.p_lb, p.p_ub)));
        }
        Ok(())
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
