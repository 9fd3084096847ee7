//! Bagged CART regression trees with exhaustive midpoint splits.
//!
//! Training rows with identical feature vectors are collapsed into one
//! weighted row before growing trees. This leaves the squared-error split
//! search unchanged (identical rows can never be separated) while making the
//! categorical-heavy feature sets of the simulator cheap to fit.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Minimum number of (bootstrap-weighted) training rows per leaf.
    pub min_leaf_size: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 10,
            max_depth: 12,
            min_leaf_size: 5,
            bootstrap: true,
            seed: 7,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        if self.min_leaf_size == 0 {
            return Err(Error::Config("min_leaf_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
}

impl RegressionForest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_matrix(&self, x: &FeatureMatrix) -> Vec<f64> {
        (0..x.n_rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

/// Distinct feature rows and, for each original row, the index of its
/// distinct representative.
#[derive(Debug, Clone)]
pub struct CollapsedRows {
    pub unique: FeatureMatrix,
    pub row_to_unique: Vec<usize>,
}

impl CollapsedRows {
    pub fn new(x: &FeatureMatrix) -> Self {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut firsts = Vec::new();
        let row_to_unique = (0..x.n_rows())
            .map(|i| {
                let key: Vec<u64> = x.row(i).iter().map(|v| v.to_bits()).collect();
                *index.entry(key).or_insert_with(|| {
                    firsts.push(i);
                    firsts.len() - 1
                })
            })
            .collect();
        Self {
            unique: x.select_rows(&firsts),
            row_to_unique,
        }
    }

    /// Expands per-unique-row values back to the original rows.
    pub fn expand(&self, per_unique: &[f64]) -> Vec<f64> {
        self.row_to_unique.iter().map(|&u| per_unique[u]).collect()
    }
}

/// Sufficient statistics of the training targets on one distinct row.
#[derive(Debug, Clone, Copy, Default)]
struct Stat {
    w: f64,
    wy: f64,
}

/// Fits a forest on `x`, `y`.
pub fn fit_forest(x: &FeatureMatrix, y: &[f64], cfg: &ForestConfig) -> Result<RegressionForest> {
    let rows = CollapsedRows::new(x);
    let train: Vec<usize> = (0..x.n_rows()).collect();
    fit_forest_on(&rows, y, &train, cfg)
}

/// Fits a forest on the subset `train` of the rows described by `rows`.
pub fn fit_forest_on(
    rows: &CollapsedRows,
    y: &[f64],
    train: &[usize],
    cfg: &ForestConfig,
) -> Result<RegressionForest> {
    cfg.validate()?;
    check_dim(rows.row_to_unique.len(), y.len())?;
    if train.len() < 2 * cfg.min_leaf_size {
        return Err(Error::Data(format!(
            "insufficient data: {} rows, need at least {}",
            train.len(),
            2 * cfg.min_leaf_size
        )));
    }
    if let Some(i) = train.iter().find(|&&i| !y[i].is_finite()) {
        return Err(Error::Data(format!("non-finite target at row {i}")));
    }
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut stats = vec![Stat::default(); rows.unique.n_rows()];
            if cfg.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(t as u64);
                for _ in 0..train.len() {
                    let i = train[rng.random_range(0..train.len())];
                    let s = &mut stats[rows.row_to_unique[i]];
                    s.w += 1.0;
                    s.wy += y[i];
                }
            } else {
                for &i in train {
                    let s = &mut stats[rows.row_to_unique[i]];
                    s.w += 1.0;
                    s.wy += y[i];
                }
            }
            grow_tree(&rows.unique, &stats, cfg)
        })
        .collect();
    Ok(RegressionForest {
        trees,
        n_features: rows.unique.n_cols(),
    })
}

fn grow_tree(x: &FeatureMatrix, stats: &[Stat], cfg: &ForestConfig) -> Tree {
    let members: Vec<usize> = (0..stats.len()).filter(|&i| stats[i].w > 0.0).collect();
    let mut nodes = Vec::new();
    grow_node(x, stats, members, 0, cfg, &mut nodes);
    Tree { nodes }
}

fn grow_node(
    x: &FeatureMatrix,
    stats: &[Stat],
    members: Vec<usize>,
    depth: usize,
    cfg: &ForestConfig,
    nodes: &mut Vec<Node>,
) -> usize {
    let (w, wy) = members
        .iter()
        .fold((0.0, 0.0), |(w, s), &i| (w + stats[i].w, s + stats[i].wy));
    let at = nodes.len();
    nodes.push(Node::Leaf { value: wy / w });
    if depth >= cfg.max_depth || w < 2.0 * cfg.min_leaf_size as f64 {
        return at;
    }
    let Some((feature, threshold)) = best_split(x, stats, &members, w, wy, cfg.min_leaf_size as f64) else {
        return at;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = members.into_iter().partition(|&i| x.get(i, feature) <= threshold);
    let left = grow_node(x, stats, l, depth + 1, cfg, nodes);
    let right = grow_node(x, stats, r, depth + 1, cfg, nodes);
    nodes[at] = Node::Split { feature, threshold, left, right };
    at
}

/// Exhaustive search over all features and midpoints between consecutive
/// distinct values; maximizes the reduction in weighted squared error.
fn best_split(
    x: &FeatureMatrix,
    stats: &[Stat],
    members: &[usize],
    w_tot: f64,
    wy_tot: f64,
    min_leaf: f64,
) -> Option<(usize, f64)> {
    let parent = wy_tot * wy_tot / w_tot;
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = members.to_vec();
    for f in 0..x.n_cols() {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)));
        let (mut wl, mut sl) = (0.0, 0.0);
        for k in 0..order.len() - 1 {
            let i = order[k];
            wl += stats[i].w;
            sl += stats[i].wy;
            let (v, v_next) = (x.get(i, f), x.get(order[k + 1], f));
            if v == v_next {
                continue;
            }
            let wr = w_tot - wl;
            if wl < min_leaf || wr < min_leaf {
                continue;
            }
            let sr = wy_tot - sl;
            let gain = sl * sl / wl + sr * sr / wr - parent;
            // relative slack so float noise never produces a split on a
            // constant target
            if gain > 1e-12 * (1.0 + parent.abs()) && best.is_none_or(|b| gain > b.0) {
                // the midpoint of adjacent floats can round up to v_next
                let mid = 0.5 * (v + v_next);
                best = Some((gain, f, if mid < v_next { mid } else { v }));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}
