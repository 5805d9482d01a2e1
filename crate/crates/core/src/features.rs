//! Trend-derived features and forward feature selection.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_file, SplitSpec};
use crate::forest::{train_forest_presorted, ForestConfig, Presorted, Table};
use crate::metrics::average_precision;
use crate::temporal::TrendSurface;
use crate::{Error, Result};

/// Canonical column order: {full, short, long} × {level, slope, acceleration,
/// cumulative} for the temporal trends, then the same for the tempo-spatial ones.
pub const FEATURE_NAMES: [&str; 24] = [
    "mu_tce",
    "dmu_tce",
    "d2mu_tce",
    "M_tce",
    "mu_tce_short",
    "dmu_tce_short",
    "d2mu_tce_short",
    "M_tce_short",
    "mu_tce_long",
    "dmu_tce_long",
    "d2mu_tce_long",
    "M_tce_long",
    "mu_tsce",
    "dmu_tsce",
    "d2mu_tsce",
    "M_tsce",
    "mu_tsce_short",
    "dmu_tsce_short",
    "d2mu_tsce_short",
    "M_tsce_short",
    "mu_tsce_long",
    "dmu_tsce_long",
    "d2mu_tsce_long",
    "M_tsce_long",
];

/// Central differences inside, one-sided at both ends, unit spacing.
pub fn derive_slope(mu: &[f64]) -> Result<Vec<f64>> {
    let n = mu.len();
    if n < 2 {
        return Err(Error::InvalidData(format!("slope needs at least 2 values, got {n}")));
    }
    let mut d = vec![0.0; n];
    d[0] = mu[1] - mu[0];
    d[n - 1] = mu[n - 1] - mu[n - 2];
    for i in 1..n - 1 {
        d[i] = 0.5 * (mu[i + 1] - mu[i - 1]);
    }
    Ok(d)
}

/// The slope of the slope.
pub fn derive_acceleration(mu: &[f64]) -> Result<Vec<f64>> {
    if mu.len() < 3 {
        return Err(Error::InvalidData(format!(
            "acceleration needs at least 3 values, got {}",
            mu.len()
        )));
    }
    derive_slope(&derive_slope(mu)?)
}

/// Running sum.
pub fn cumulative_mass(mu: &[f64]) -> Vec<f64> {
    mu.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// Stable identity of a cell-month, used to tie bootstrap draws to rows.
pub fn row_key(cell_id: i64, month_index: i64) -> u64 {
    ((cell_id as u64) << 32) ^ (month_index as u32 as u64)
}

/// Feature rows keyed by `(cell_id, month_index)`, sorted by cell then month.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub keys: Vec<(i64, i64)>,
    /// One column per entry of [`FEATURE_NAMES`].
    pub columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn column_index(name: &str) -> Result<usize> {
        FEATURE_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::InvalidData(format!("unknown feature {name:?}")))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[Self::column_index(name)?])
    }

    pub fn row_keys(&self) -> Vec<u64> {
        self.keys.iter().map(|&(c, m)| row_key(c, m)).collect()
    }

    /// Indices of rows whose month satisfies `keep`.
    pub fn rows_where<F: Fn(i64) -> bool>(&self, keep: F) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| keep(self.keys[i].1)).collect()
    }

    /// Named columns restricted to `rows`.
    pub fn table(&self, names: &[String], rows: &[usize]) -> Result<Table> {
        let idx = names
            .iter()
            .map(|n| Self::column_index(n))
            .collect::<Result<Vec<_>>>()?;
        let columns = idx
            .iter()
            .map(|&c| rows.iter().map(|&r| self.columns[c][r]).collect())
            .collect();
        Table::new(names.to_vec(), columns)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("cell_id,month_index,{}\n", FEATURE_NAMES.join(","));
        for (i, (c, m)) in self.keys.iter().enumerate() {
            s.push_str(&format!("{c},{m}"));
            for col in &self.columns {
                s.push_str(&format!(",{}", col[i]));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_csv().as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        let header = reader.headers()?.clone();
        let expected: Vec<&str> = ["cell_id", "month_index"].into_iter().chain(FEATURE_NAMES).collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                row: 1,
                message: "header does not list cell_id, month_index and the 24 feature columns".into(),
            });
        }
        let mut keys = Vec::new();
        let mut columns = vec![Vec::new(); FEATURE_NAMES.len()];
        for (i, rec) in reader.records().enumerate() {
            let bad = |message: String| Error::MalformedRow {
                path: path.to_path_buf(),
                row: i + 2,
                message,
            };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let int = |j: usize| rec[j].parse::<i64>().map_err(|e| bad(format!("{}: {e}", expected[j])));
            keys.push((int(0)?, int(1)?));
            for (j, col) in columns.iter_mut().enumerate() {
                col.push(
                    rec[j + 2]
                        .parse::<f64>()
                        .map_err(|e| bad(format!("{}: {e}", FEATURE_NAMES[j])))?,
                );
            }
        }
        Ok(Self { keys, columns })
    }
}

fn derived(mu: &[f64]) -> Result<[Vec<f64>; 4]> {
    Ok([
        mu.to_vec(),
        derive_slope(mu)?,
        derive_acceleration(mu)?,
        cumulative_mass(mu),
    ])
}

fn surface_features(s: &TrendSurface) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(12);
    for mu in [&s.mu_full, &s.mu_short, &s.mu_long] {
        out.extend(derived(mu)?);
    }
    Ok(out)
}

/// Builds the 24 feature columns. Both families must cover the same cells and
/// the same consecutive months per cell; input order does not matter.
pub fn assemble_features(tce: &[TrendSurface], tsce: &[TrendSurface]) -> Result<FeatureMatrix> {
    let index = |family: &str, surfaces: &[TrendSurface]| -> Result<BTreeMap<i64, usize>> {
        let mut m = BTreeMap::new();
        for (i, s) in surfaces.iter().enumerate() {
            if m.insert(s.cell_id, i).is_some() {
                return Err(Error::SurfaceMismatch(format!("{family} has cell {} twice", s.cell_id)));
            }
            if s.months.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::SurfaceMismatch(format!(
                    "{family} months of cell {} are not consecutive",
                    s.cell_id
                )));
            }
        }
        Ok(m)
    };
    let a = index("TCE", tce)?;
    let b = index("TSCE", tsce)?;
    let mut missing = Vec::new();
    for (&cell, &i) in &a {
        match b.get(&cell) {
            None => missing.push(format!("cell {cell} (all months) missing from TSCE")),
            Some(&j) => {
                let (ma, mb) = (&tce[i].months, &tsce[j].months);
                for m in ma.iter().filter(|m| !mb.contains(m)) {
                    missing.push(format!("({cell}, {m}) missing from TSCE"));
                }
                for m in mb.iter().filter(|m| !ma.contains(m)) {
                    missing.push(format!("({cell}, {m}) missing from TCE"));
                }
            }
        }
    }
    for cell in b.keys().filter(|c| !a.contains_key(c)) {
        missing.push(format!("cell {cell} (all months) missing from TCE"));
    }
    if !missing.is_empty() {
        let n = missing.len();
        missing.truncate(20);
        return Err(Error::SurfaceMismatch(format!(
            "{n} keys differ: {}",
            missing.join("; ")
        )));
    }
    let per_cell: Vec<(i64, Vec<i64>, Vec<Vec<f64>>)> = a
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(&cell, &i)| {
            let mut cols = surface_features(&tce[i])?;
            cols.extend(surface_features(&tsce[b[&cell]])?);
            Ok((cell, tce[i].months.clone(), cols))
        })
        .collect::<Result<_>>()?;
    let mut keys = Vec::new();
    let mut columns = vec![Vec::new(); FEATURE_NAMES.len()];
    for (cell, months, cols) in per_cell {
        keys.extend(months.iter().map(|&m| (cell, m)));
        for (dst, src) in columns.iter_mut().zip(cols) {
            dst.extend(src);
        }
    }
    Ok(FeatureMatrix { keys, columns })
}

/// Targets aligned with the feature rows; `lookup` gives the label of a cell-month.
pub fn align_targets(features: &FeatureMatrix, labels: &HashMap<(i64, i64), u8>) -> Result<Vec<u8>> {
    features
        .keys
        .iter()
        .map(|k| {
            labels
                .get(k)
                .copied()
                .ok_or_else(|| Error::InvalidData(format!("no target for cell {} month {}", k.0, k.1)))
        })
        .collect()
}

/// Scores a candidate subset of feature columns (canonical indices, in selection order).
pub trait SubsetScorer: Sync {
    fn score(&self, columns: &[usize]) -> Result<f64>;
}

/// Validation AP of a single forest trained on the training months.
pub struct ForestScorer {
    train: Table,
    train_y: Vec<u8>,
    train_keys: Vec<u64>,
    presorted: Presorted,
    validation: Table,
    validation_y: Vec<u8>,
    /// `feature_subsample` is overridden per subset by `max(1, floor(sqrt(k)))`.
    pub config: ForestConfig,
}

impl ForestScorer {
    pub fn new(features: &FeatureMatrix, targets: &[u8], split: &SplitSpec, config: ForestConfig) -> Result<Self> {
        if targets.len() != features.n_rows() {
            return Err(Error::InvalidData("targets do not align with feature rows".into()));
        }
        let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let tr = features.rows_where(|m| split.train.contains(m));
        let va = features.rows_where(|m| split.validation.contains(m));
        if va.is_empty() {
            return Err(Error::InvalidData(
                "no feature rows fall in the validation range".into(),
            ));
        }
        let train = features.table(&names, &tr)?;
        let keys = features.row_keys();
        let train_keys: Vec<u64> = tr.iter().map(|&i| keys[i]).collect();
        let presorted = Presorted::new(&train, &train_keys);
        Ok(Self {
            presorted,
            train,
            train_y: tr.iter().map(|&i| targets[i]).collect(),
            train_keys,
            validation: features.table(&names, &va)?,
            validation_y: va.iter().map(|&i| targets[i]).collect(),
            config,
        })
    }
}

impl SubsetScorer for ForestScorer {
    fn score(&self, columns: &[usize]) -> Result<f64> {
        let mut config = self.config.clone();
        config.feature_subsample = ((columns.len() as f64).sqrt().floor() as usize).max(1);
        let x = self.train.select_columns(columns);
        let forest = train_forest_presorted(
            &config,
            &x,
            &self.train_y,
            &self.train_keys,
            &self.presorted.select(columns),
        )?;
        let p = forest.predict(&self.validation.select_columns(columns));
        average_precision(&p, &self.validation_y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub feature: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    /// Best addition per round, including the round that dipped.
    pub steps: Vec<SelectionStep>,
    pub chosen_subset: Vec<String>,
    /// Round (1-based) whose score first fell below the previous round's.
    pub dip_round: Option<usize>,
}

impl SelectionTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Greedy forward selection over the 24 columns. Each round adds the feature
/// with the highest score (ties to the lower column index); selection stops
/// at the first round whose best score is strictly below the previous round's.
pub fn forward_select(scorer: &dyn SubsetScorer) -> Result<SelectionTrace> {
    let mut chosen: Vec<usize> = Vec::new();
    let mut steps: Vec<SelectionStep> = Vec::new();
    let mut previous = f64::NEG_INFINITY;
    let mut dip_round = None;
    for round in 1..=FEATURE_NAMES.len() {
        let candidates: Vec<usize> = (0..FEATURE_NAMES.len()).filter(|c| !chosen.contains(c)).collect();
        let scores = candidates
            .par_iter()
            .map(|&c| {
                let mut subset = chosen.clone();
                subset.push(c);
                scorer.score(&subset)
            })
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| Error::SelectionRound {
                round,
                source: Box::new(e),
            })?;
        let mut best = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        steps.push(SelectionStep {
            feature: FEATURE_NAMES[candidates[best]].to_string(),
            score: scores[best],
        });
        if scores[best] < previous {
            dip_round = Some(round);
            break;
        }
        previous = scores[best];
        chosen.push(candidates[best]);
    }
    Ok(SelectionTrace {
        chosen_subset: chosen.iter().map(|&c| FEATURE_NAMES[c].to_string()).collect(),
        steps,
        dip_round,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stencils() {
        assert_eq!(derive_slope(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0; 4]);
        assert_eq!(derive_slope(&[0.0, 1.0, 4.0, 9.0]).unwrap(), vec![1.0, 2.0, 4.0, 5.0]);
        assert_eq!(derive_slope(&[2.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(derive_slope(&[1.0]).is_err());
        let acc = derive_acceleration(&[0.0, 1.0, 4.0, 9.0, 16.0]).unwrap();
        assert_eq!(&acc[1..4], &[1.5, 2.0, 1.5]);
        assert_eq!(acc[2], 2.0);
        assert_eq!(derive_acceleration(&[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![0.0; 4]);
        assert!(derive_acceleration(&[1.0, 2.0]).is_err());
        assert_eq!(cumulative_mass(&[1.0, 2.0, 3.0]), vec![1.0, 3.0, 6.0]);
        assert_eq!(cumulative_mass(&[0.0; 3]), vec![0.0; 3]);
    }

    fn surface(cell: i64, months: std::ops::Range<i64>, scale: f64) -> TrendSurface {
        let m: Vec<i64> = months.collect();
        let long: Vec<f64> = m.iter().map(|&t| scale * (t as f64 / 30.0).sin()).collect();
        let short: Vec<f64> = m.iter().map(|&t| scale * 0.1 * (t as f64 / 2.0).cos()).collect();
        TrendSurface {
            cell_id: cell,
            mu_full: long.iter().zip(&short).map(|(a, b)| a + b).collect(),
            sigma: vec![0.1; m.len()],
            months: m,
            mu_long: long,
            mu_short: short,
            lengthscales: (30.0, 2.0),
        }
    }

    #[test]
    fn assembled_columns_and_additivity() {
        let tce = vec![surface(1, 0..20, 1.0), surface(2, 0..20, 2.0)];
        let tsce = vec![surface(2, 0..20, 0.5), surface(1, 0..20, 0.3)];
        let f = assemble_features(&tce, &tsce).unwrap();
        assert_eq!(f.columns.len(), 24);
        assert_eq!(f.n_rows(), 40);
        assert_eq!(f.keys[0], (1, 0));
        let (full, long, short) = (
            f.column("mu_tce").unwrap(),
            f.column("mu_tce_long").unwrap(),
            f.column("mu_tce_short").unwrap(),
        );
        for i in 0..40 {
            assert!((long[i] + short[i] - full[i]).abs() < 1e-8);
        }
        let swapped = assemble_features(&[tce[1].clone(), tce[0].clone()], &tsce).unwrap();
        assert_eq!(swapped, f);
    }

    #[test]
    fn zero_surfaces_give_zero_features() {
        let z = |c| TrendSurface {
            cell_id: c,
            months: (0..6).collect(),
            mu_full: vec![0.0; 6],
            mu_long: vec![0.0; 6],
            mu_short: vec![0.0; 6],
            sigma: vec![1.0; 6],
            lengthscales: (1.0, 1.0),
        };
        let f = assemble_features(&[z(1)], &[z(1)]).unwrap();
        assert!(f.columns.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatch_lists_missing_keys() {
        let tce = vec![surface(1, 0..10, 1.0), surface(2, 0..10, 1.0)];
        let tsce = vec![surface(1, 0..9, 1.0)];
        match assemble_features(&tce, &tsce) {
            Err(Error::SurfaceMismatch(m)) => {
                assert!(m.contains("(1, 9) missing from TSCE"), "{m}");
                assert!(m.contains("cell 2"), "{m}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let f = assemble_features(&[surface(4, 3..12, 1.0)], &[surface(4, 3..12, 0.2)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.csv");
        f.write_csv(&p).unwrap();
        assert_eq!(FeatureMatrix::read_csv(&p).unwrap(), f);
    }

    /// Scores are a fixed table over subsets, exercising the stopping logic only.
    struct Table2(fn(&[usize]) -> f64);
    impl SubsetScorer for Table2 {
        fn score(&self, c: &[usize]) -> Result<f64> {
            Ok((self.0)(c))
        }
    }

    #[test]
    fn first_dip_stops_and_ties_continue() {
        // feature 5 is best alone; second round is a tie (continue), third dips
        let t = forward_select(&Table2(|c| match c.len() {
            1 => f64::from(c[0] == 5),
            2 => 1.0,
            _ => 0.5,
        }))
        .unwrap();
        assert_eq!(t.chosen_subset, vec!["dmu_tce_short", "mu_tce"]);
        assert_eq!(t.steps.len(), 3);
        assert_eq!(t.dip_round, Some(3));
    }

    #[test]
    fn never_dipping_selects_everything() {
        let t = forward_select(&Table2(|c| c.len() as f64)).unwrap();
        assert_eq!(t.chosen_subset.len(), 24);
        assert_eq!(t.chosen_subset[0], "mu_tce");
        assert_eq!(t.dip_round, None);
    }

    struct Failing;
    impl SubsetScorer for Failing {
        fn score(&self, c: &[usize]) -> Result<f64> {
            if c.len() == 2 {
                Err(Error::UndefinedMetric("boom".into()))
            } else {
                Ok(c[0] as f64)
            }
        }
    }

    #[test]
    fn scorer_errors_carry_the_round() {
        match forward_select(&Failing) {
            Err(Error::SelectionRound { round: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn slope_of_mass_recovers_constant(c in -5.0f64..5.0, n in 3usize..50) {
            let v = vec![c; n];
            let d = derive_slope(&cumulative_mass(&v)).unwrap();
            for x in &d {
                prop_assert!((x - c).abs() < 1e-9);
            }
        }
    }
}
