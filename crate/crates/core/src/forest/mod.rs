//! Random-forest classifier and the jittered forest ensemble.

mod ensemble;
mod tree;

pub use ensemble::{
    jitter_config, predict, train_ensemble, train_ensemble_with_keys, Ensemble, EnsemblePrediction, JitterRanges,
};
pub use tree::{Node, Presorted, Tree};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use tree::{grow_tree, TreeParams};

/// Column-major feature table with named columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::InvalidData("column names and columns differ in count".into()));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::InvalidData("ragged feature columns".into()));
            }
        }
        Ok(Self { names, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    /// Rows at `idx`, in that order.
    pub fn take_rows(&self, idx: &[usize]) -> Table {
        Table {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect(),
        }
    }

    /// Columns at `idx`, in that order.
    pub fn select_columns(&self, idx: &[usize]) -> Table {
        Table {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub tree_count: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split.
    pub feature_subsample: usize,
    /// Expected bootstrap draws per row, in (0, 1].
    pub bootstrap_fraction: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            tree_count: 100,
            max_depth: 8,
            min_leaf: 10,
            feature_subsample: 2,
            bootstrap_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        let ok = self.tree_count >= 1
            && self.max_depth >= 1
            && self.min_leaf >= 1
            && self.feature_subsample >= 1
            && self.feature_subsample <= n_features.max(1)
            && self.bootstrap_fraction > 0.0
            && self.bootstrap_fraction <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData(format!(
                "invalid forest config {self:?} for {n_features} features"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

impl Forest {
    /// Mean positive-class probability over trees, one per row.
    pub fn predict(&self, table: &Table) -> Vec<f64> {
        let n = table.n_rows();
        let mut out = vec![0.0; n];
        for tree in &self.trees {
            for (i, o) in out.iter_mut().enumerate() {
                *o += tree.predict_with(|f| table.columns[f][i]);
            }
        }
        let k = self.trees.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }
}

/// SplitMix64 finalizer; mixes a tree seed with a row key.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Poisson(λ) bootstrap multiplicity of a row, a pure function of the tree
/// seed and the row key so it follows the row under reordering.
fn poisson_weight(seed: u64, key: u64, lambda: f64) -> u32 {
    let u = (mix64(seed ^ mix64(key)) >> 11) as f64 / (1u64 << 53) as f64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let mut k = 0u32;
    while u > cdf && k < 32 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

fn bootstrap_weights(seed: u64, keys: &[u64], lambda: f64) -> Vec<u32> {
    let w: Vec<u32> = keys.iter().map(|&k| poisson_weight(seed, k, lambda)).collect();
    if w.iter().all(|&x| x == 0) {
        vec![1; keys.len()]
    } else {
        w
    }
}

/// Trains a forest; rows are identified by their index.
pub fn train_forest(config: &ForestConfig, x: &Table, y: &[u8]) -> Result<Forest> {
    let keys: Vec<u64> = (0..y.len() as u64).collect();
    let presorted = Presorted::new(x, &keys);
    train_forest_presorted(config, x, y, &keys, &presorted)
}

/// Trains a forest with explicit row keys and a shared presort.
pub fn train_forest_presorted(
    config: &ForestConfig,
    x: &Table,
    y: &[u8],
    keys: &[u64],
    presorted: &Presorted,
) -> Result<Forest> {
    if x.n_rows() != y.len() || keys.len() != y.len() {
        return Err(Error::InvalidData(format!(
            "{} rows but {} targets",
            x.n_rows(),
            y.len()
        )));
    }
    if y.len() < 2 {
        return Err(Error::InvalidData("a forest needs at least two training rows".into()));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidData("targets must be 0 or 1".into()));
    }
    config.validate(x.n_features())?;
    let params = TreeParams {
        max_depth: config.max_depth,
        min_leaf: config.min_leaf,
        feature_subsample: config.feature_subsample,
    };
    let trees = (0..config.tree_count)
        .into_par_iter()
        .map(|t| {
            let seed = mix64(config.seed ^ mix64(t as u64 + 1));
            let w = bootstrap_weights(seed, keys, config.bootstrap_fraction);
            grow_tree(x, y, &w, presorted, &params, seed)
        })
        .collect();
    Ok(Forest { trees })
}
