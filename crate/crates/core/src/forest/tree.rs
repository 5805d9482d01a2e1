//! CART classification trees grown by exact Gini scans over presorted columns.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Table;

pub(crate) const LEAF: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Split feature, or `u32::MAX` for a leaf.
    pub feature: u32,
    pub threshold: f64,
    pub left: u32,
    pub right: u32,
    /// Positive-class fraction of the (weighted) training rows in the node.
    pub value: f64,
}

impl Node {
    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }
}

/// A binary tree stored as a flat node array; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Positive-class probability for one row given as a feature lookup.
    #[inline]
    pub fn predict_with<F: Fn(usize) -> f64>(&self, value: F) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return n.value;
            }
            i = if value(n.feature as usize) <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + rec(t, n.left as usize).max(rec(t, n.right as usize))
            }
        }
        rec(self, 0)
    }
}

/// Per-feature row orderings by `(value, key)`, shared by all trees grown on a table.
pub struct Presorted {
    pub(crate) order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(table: &Table, keys: &[u64]) -> Self {
        let order = table
            .columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32).collect();
                idx.sort_by(|&a, &b| {
                    col[a as usize]
                        .total_cmp(&col[b as usize])
                        .then(keys[a as usize].cmp(&keys[b as usize]))
                });
                idx
            })
            .collect();
        Self { order }
    }

    /// Orderings of the given columns only, matching [`Table::select_columns`].
    pub fn select(&self, columns: &[usize]) -> Self {
        Self {
            order: columns.iter().map(|&c| self.order[c].clone()).collect(),
        }
    }
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: usize,
}

/// Grows one tree on rows with positive `weights` (bootstrap multiplicities).
pub(crate) fn grow_tree(
    table: &Table,
    targets: &[u8],
    weights: &[u32],
    presorted: &Presorted,
    params: &TreeParams,
    seed: u64,
) -> Tree {
    let p = table.columns.len();
    let mut lists: Vec<Vec<u32>> = presorted
        .order
        .iter()
        .map(|ord| ord.iter().copied().filter(|&r| weights[r as usize] > 0).collect())
        .collect();
    let n_bag = lists.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes: Vec<Node> = Vec::new();
    let mut goes_left = vec![false; targets.len()];
    let mut scratch: Vec<u32> = Vec::with_capacity(n_bag);
    let k = params.feature_subsample.clamp(1, p.max(1));

    // (start, end, depth, node index)
    let mut stack = vec![(0usize, n_bag, 0usize, 0usize)];
    nodes.push(leaf(0.0));
    while let Some((start, end, depth, id)) = stack.pop() {
        let (w_tot, w_pos) = lists[0][start..end].iter().fold((0u64, 0u64), |(t, q), &r| {
            let w = weights[r as usize] as u64;
            (t + w, q + w * targets[r as usize] as u64)
        });
        let value = if w_tot > 0 { w_pos as f64 / w_tot as f64 } else { 0.0 };
        nodes[id] = leaf(value);
        if depth >= params.max_depth || w_pos == 0 || w_pos == w_tot || w_tot < 2 * params.min_leaf as u64 {
            continue;
        }
        let mut candidates = sample(&mut rng, p, k).into_vec();
        candidates.sort_unstable();
        let parent = gini_sum(w_tot as f64, w_pos as f64);
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &candidates {
            let col = &table.columns[f];
            let list = &lists[f][start..end];
            let (mut lw, mut lp) = (0u64, 0u64);
            for i in 0..list.len() - 1 {
                let r = list[i] as usize;
                let w = weights[r] as u64;
                lw += w;
                lp += w * targets[r] as u64;
                let v = col[r];
                let next = col[list[i + 1] as usize];
                if v == next || lw < params.min_leaf as u64 || w_tot - lw < params.min_leaf as u64 {
                    continue;
                }
                let gain = parent - gini_sum(lw as f64, lp as f64) - gini_sum((w_tot - lw) as f64, (w_pos - lp) as f64);
                if gain > 0.0 && best.is_none_or(|(g, _, _)| gain > g) {
                    let mut thr = 0.5 * (v + next);
                    if thr >= next {
                        thr = v;
                    }
                    best = Some((gain, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            continue;
        };
        let col = &table.columns[feature];
        let mut n_left = 0;
        for &r in &lists[0][start..end] {
            let l = col[r as usize] <= threshold;
            goes_left[r as usize] = l;
            n_left += usize::from(l);
        }
        for list in lists.iter_mut() {
            stable_partition(&mut list[start..end], &goes_left, &mut scratch);
        }
        let left = nodes.len();
        nodes.push(leaf(value));
        nodes.push(leaf(value));
        nodes[id] = Node {
            feature: feature as u32,
            threshold,
            left: left as u32,
            right: left as u32 + 1,
            value,
        };
        stack.push((start + n_left, end, depth + 1, left + 1));
        stack.push((start, start + n_left, depth + 1, left));
    }
    Tree { nodes }
}

fn leaf(value: f64) -> Node {
    Node {
        feature: LEAF,
        threshold: 0.0,
        left: 0,
        right: 0,
        value,
    }
}

/// Weighted Gini impurity times node weight, `2·pos·(W−pos)/W`.
#[inline]
fn gini_sum(w: f64, pos: f64) -> f64 {
    if w <= 0.0 {
        0.0
    } else {
        2.0 * pos * (w - pos) / w
    }
}

fn stable_partition(slice: &mut [u32], goes_left: &[bool], scratch: &mut Vec<u32>) {
    scratch.clear();
    let mut w = 0;
    for i in 0..slice.len() {
        let r = slice[i];
        if goes_left[r as usize] {
            slice[w] = r;
            w += 1;
        } else {
            scratch.push(r);
        }
    }
    slice[w..].copy_from_slice(scratch);
}
