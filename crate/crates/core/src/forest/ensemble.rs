use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix64, train_forest_presorted, Forest, ForestConfig, Node, Presorted, Table, Tree};
use crate::data::write_file;
use crate::{Error, Result};

/// Inclusive ranges each member's hyperparameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterRanges {
    pub tree_count: (usize, usize),
    pub max_depth: (usize, usize),
    pub min_leaf: (usize, usize),
    pub feature_subsample: (usize, usize),
    pub bootstrap_fraction: (f64, f64),
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            tree_count: (50, 150),
            max_depth: (4, 12),
            min_leaf: (5, 50),
            feature_subsample: (1, 2),
            bootstrap_fraction: (0.6, 1.0),
        }
    }
}

impl JitterRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tree_count.0 <= self.tree_count.1
            && self.max_depth.0 <= self.max_depth.1
            && self.min_leaf.0 <= self.min_leaf.1
            && self.feature_subsample.0 <= self.feature_subsample.1
            && self.bootstrap_fraction.0 <= self.bootstrap_fraction.1
            && self.tree_count.0 >= 1
            && self.max_depth.0 >= 1
            && self.min_leaf.0 >= 1
            && self.feature_subsample.0 >= 1
            && self.bootstrap_fraction.0 > 0.0
            && self.bootstrap_fraction.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData(format!("ill-ordered jitter ranges {self:?}")))
        }
    }

    /// Ranges collapsed onto a single configuration.
    pub fn fixed(c: &ForestConfig) -> Self {
        Self {
            tree_count: (c.tree_count, c.tree_count),
            max_depth: (c.max_depth, c.max_depth),
            min_leaf: (c.min_leaf, c.min_leaf),
            feature_subsample: (c.feature_subsample, c.feature_subsample),
            bootstrap_fraction: (c.bootstrap_fraction, c.bootstrap_fraction),
        }
    }
}

/// Draws each hyperparameter uniformly within its range; degenerate ranges
/// reproduce `base`. The returned seed mixes `base.seed` with `seed`.
pub fn jitter_config(base: &ForestConfig, ranges: &JitterRanges, seed: u64) -> ForestConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut int = |(lo, hi): (usize, usize)| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let tree_count = int(ranges.tree_count);
    let max_depth = int(ranges.max_depth);
    let min_leaf = int(ranges.min_leaf);
    let feature_subsample = int(ranges.feature_subsample);
    let (blo, bhi) = ranges.bootstrap_fraction;
    let bootstrap_fraction = if blo == bhi { blo } else { rng.random_range(blo..=bhi) };
    ForestConfig {
        tree_count,
        max_depth,
        min_leaf,
        feature_subsample,
        bootstrap_fraction,
        seed: mix64(base.seed ^ mix64(seed)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub feature_names: Vec<String>,
    pub models: Vec<(ForestConfig, Forest)>,
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.models.len()
    }
}

/// Trains `n` forests with jittered configs; member `i` uses seed `master_seed + i`.
/// No undersampling or class weighting is applied.
pub fn train_ensemble(
    x: &Table,
    y: &[u8],
    n: usize,
    master_seed: u64,
    base: &ForestConfig,
    ranges: &JitterRanges,
) -> Result<Ensemble> {
    let keys: Vec<u64> = (0..y.len() as u64).collect();
    train_ensemble_with_keys(x, y, &keys, n, master_seed, base, ranges)
}

pub fn train_ensemble_with_keys(
    x: &Table,
    y: &[u8],
    keys: &[u64],
    n: usize,
    master_seed: u64,
    base: &ForestConfig,
    ranges: &JitterRanges,
) -> Result<Ensemble> {
    ranges.validate()?;
    if n == 0 {
        return Err(Error::InvalidData("ensemble size must be at least 1".into()));
    }
    let presorted = Presorted::new(x, keys);
    let p = x.n_features();
    let models = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cfg = jitter_config(base, ranges, master_seed.wrapping_add(i as u64));
            cfg.feature_subsample = cfg.feature_subsample.min(p.max(1));
            let forest = train_forest_presorted(&cfg, x, y, keys, &presorted)?;
            Ok((cfg, forest))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        feature_names: x.names.clone(),
        models,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePrediction {
    /// Mean of the member probabilities, per row.
    pub mean: Vec<f64>,
    /// `per_model[m][row]`.
    pub per_model: Vec<Vec<f64>>,
}

impl EnsemblePrediction {
    /// Empirical `q`-quantile of the member probabilities for one row
    /// (linear interpolation between order statistics).
    pub fn quantile(&self, row: usize, q: f64) -> f64 {
        let mut v: Vec<f64> = self.per_model.iter().map(|m| m[row]).collect();
        v.sort_by(f64::total_cmp);
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }
}

/// Member and mean probabilities; `x` must carry the training columns in order.
pub fn predict(ensemble: &Ensemble, x: &Table) -> Result<EnsemblePrediction> {
    if x.names != ensemble.feature_names {
        return Err(Error::InvalidData(format!(
            "feature columns {:?} do not match the ensemble's {:?}",
            x.names, ensemble.feature_names
        )));
    }
    let per_model: Vec<Vec<f64>> = ensemble.models.par_iter().map(|(_, f)| f.predict(x)).collect();
    let n = x.n_rows();
    let k = per_model.len() as f64;
    let mean = (0..n)
        .map(|i| per_model.iter().map(|m| m[i]).sum::<f64>() / k)
        .collect();
    Ok(EnsemblePrediction { mean, per_model })
}

const MAGIC: &[u8; 8] = b"CXENSMBL";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Serde("truncated ensemble file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

impl Ensemble {
    /// Little-endian binary encoding with a magic tag and format version.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.feature_names.len() as u32).to_le_bytes());
        for name in &self.feature_names {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
        }
        b.extend_from_slice(&(self.models.len() as u32).to_le_bytes());
        for (cfg, forest) in &self.models {
            for v in [cfg.tree_count, cfg.max_depth, cfg.min_leaf, cfg.feature_subsample] {
                b.extend_from_slice(&(v as u32).to_le_bytes());
            }
            b.extend_from_slice(&cfg.bootstrap_fraction.to_bits().to_le_bytes());
            b.extend_from_slice(&cfg.seed.to_le_bytes());
            b.extend_from_slice(&(forest.trees.len() as u32).to_le_bytes());
            for tree in &forest.trees {
                b.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
                for n in &tree.nodes {
                    b.extend_from_slice(&n.feature.to_le_bytes());
                    b.extend_from_slice(&n.threshold.to_bits().to_le_bytes());
                    b.extend_from_slice(&n.left.to_le_bytes());
                    b.extend_from_slice(&n.right.to_le_bytes());
                    b.extend_from_slice(&n.value.to_bits().to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Serde("not an ensemble file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Serde(format!("unsupported ensemble version {version}")));
        }
        let n_names = r.u32()? as usize;
        let mut feature_names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Serde(e.to_string()))?;
            feature_names.push(s.to_string());
        }
        let n_models = r.u32()? as usize;
        let mut models = Vec::with_capacity(n_models);
        for _ in 0..n_models {
            let cfg = ForestConfig {
                tree_count: r.u32()? as usize,
                max_depth: r.u32()? as usize,
                min_leaf: r.u32()? as usize,
                feature_subsample: r.u32()? as usize,
                bootstrap_fraction: r.f64()?,
                seed: r.u64()?,
            };
            let n_trees = r.u32()? as usize;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let n_nodes = r.u32()? as usize;
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    nodes.push(Node {
                        feature: r.u32()?,
                        threshold: r.f64()?,
                        left: r.u32()?,
                        right: r.u32()?,
                        value: r.f64()?,
                    });
                }
                trees.push(Tree { nodes });
            }
            models.push((cfg, Forest { trees }));
        }
        if r.pos != buf.len() {
            return Err(Error::Serde("trailing bytes in ensemble file".into()));
        }
        Ok(Ensemble { feature_names, models })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
