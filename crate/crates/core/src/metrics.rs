//! Ranking metrics, threshold calibration and confusion rasters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_file, GridCell, GridLayout};
use crate::{Error, Result};

/// One scored cell-month with its observed label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub cell_id: i64,
    pub month_index: i64,
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    /// Reported as 1.0 when nothing is predicted positive.
    pub precision: f64,
    /// Reported as 0.0 when there are no positive labels.
    pub recall: f64,
    pub counts: Counts,
    pub no_predicted_positives: bool,
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidData(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidData("NaN score".into()));
    }
    Ok(())
}

/// Counts with `score >= threshold` predicted positive.
pub fn precision_recall(scores: &[f64], labels: &[u8], threshold: f64) -> Result<PrecisionRecall> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::InvalidData("no scores".into()));
    }
    let mut c = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l > 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let none = c.tp + c.fp == 0;
    Ok(PrecisionRecall {
        precision: if none { 1.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 },
        recall: if c.tp + c.fn_ == 0 {
            0.0
        } else {
            c.tp as f64 / (c.tp + c.fn_) as f64
        },
        counts: c,
        no_predicted_positives: none,
    })
}

/// `(tp, fp)` cumulated at each descending unique score.
fn cumulative_counts(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in idx.iter().enumerate() {
        if labels[i] > 0 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = k + 1 == idx.len() || scores[idx[k + 1]] != scores[i];
        if last {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

/// `Σ (R_n − R_{n−1})·P_n` over descending unique thresholds; tied scores form one step.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l > 0).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in cumulative_counts(scores, labels) {
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// `(recall, precision)` at every unique threshold, highest threshold first.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l > 0).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "precision-recall curve needs a positive label".into(),
        ));
    }
    Ok(cumulative_counts(scores, labels)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

/// ROC points `(fp_rate, tp_rate)` from (0,0) to (1,1) and the AUC as the
/// fraction of positive/negative pairs ordered correctly, ties counting ½.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(Vec<(f64, f64)>, f64)> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l > 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    // Twice the Mann-Whitney count, kept integral.
    let mut twice_u: u128 = 0;
    let (mut tp_prev, mut fp_prev) = (0usize, 0usize);
    for (_, tp, fp) in cumulative_counts(scores, labels) {
        let (dt, df) = (tp - tp_prev, fp - fp_prev);
        // positives in this tie group beat every negative below it and tie with those inside
        twice_u += (dt as u128) * (2 * (neg - fp) as u128 + df as u128);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        tp_prev = tp;
        fp_prev = fp;
    }
    let auc = twice_u as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((points, auc))
}

/// Threshold that makes roughly `target_count` predictions positive.
///
/// With unique predictions `u_1 > u_2 > …`, takes the lowest `u_k` whose
/// count of predictions `>= u_k` does not exceed `target_count`, then steps
/// down one rank to `u_{k+1}` so the positive count brackets the target.
/// If even `u_1` overshoots (ties at the top) the result is `u_1`; if
/// `target_count >= n` the result is 0 and everything is positive.
pub fn calibrate_threshold(predictions: &[f64], target_count: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidData("no predictions to calibrate against".into()));
    }
    if predictions.iter().any(|p| p.is_nan()) {
        return Err(Error::InvalidData("NaN prediction".into()));
    }
    if target_count >= predictions.len() {
        return Ok(0.0);
    }
    let mut sorted = predictions.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut unique: Vec<(f64, usize)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 == sorted.len() || sorted[i + 1] != v {
            unique.push((v, i + 1));
        }
    }
    let within = unique.iter().rposition(|&(_, count)| count <= target_count);
    Ok(match within {
        None => unique[0].0,
        Some(k) => unique.get(k + 1).unwrap_or(&unique[k]).0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfusionLabel {
    TP,
    FP,
    TN,
    FN,
}

impl ConfusionLabel {
    pub fn of(score: f64, label: u8, threshold: f64) -> Self {
        match (score >= threshold, label > 0) {
            (true, true) => Self::TP,
            (true, false) => Self::FP,
            (false, false) => Self::TN,
            (false, true) => Self::FN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TP => "TP",
            Self::FP => "FP",
            Self::TN => "TN",
            Self::FN => "FN",
        }
    }
}

/// Per-month cell labels at a fixed threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMap {
    pub threshold: f64,
    pub months: BTreeMap<i64, BTreeMap<i64, ConfusionLabel>>,
}

impl ConfusionMap {
    pub fn counts(&self, month: i64) -> Counts {
        let mut c = Counts::default();
        for l in self.months.get(&month).into_iter().flat_map(|m| m.values()) {
            match l {
                ConfusionLabel::TP => c.tp += 1,
                ConfusionLabel::FP => c.fp += 1,
                ConfusionLabel::TN => c.tn += 1,
                ConfusionLabel::FN => c.fn_ += 1,
            }
        }
        c
    }

    /// One raster per month, `confusion_month_<m>.csv`.
    pub fn write_rasters(&self, dir: &Path, cells: &[GridCell]) -> Result<()> {
        let layout = GridLayout::new(cells);
        for (month, labels) in &self.months {
            let text = layout.render(|c| labels.get(&c).map(|l| l.as_str().to_string()));
            write_file(&dir.join(format!("confusion_month_{month:04}.csv")), text.as_bytes())?;
        }
        Ok(())
    }
}

/// Labels every cell in `cells` for every month in `months`.
pub fn confusion_map(rows: &[ScoredRow], threshold: f64, months: &[i64], cells: &[GridCell]) -> Result<ConfusionMap> {
    let lookup: HashMap<(i64, i64), &ScoredRow> = rows.iter().map(|r| ((r.cell_id, r.month_index), r)).collect();
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for &m in months {
        let mut labels = BTreeMap::new();
        for c in cells {
            match lookup.get(&(c.cell_id, m)) {
                Some(r) => {
                    labels.insert(c.cell_id, ConfusionLabel::of(r.score, r.label, threshold));
                }
                None => missing.push((c.cell_id, m)),
            }
        }
        out.insert(m, labels);
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(10).map(|(c, m)| format!("({c}, {m})")).collect();
        return Err(Error::InvalidData(format!(
            "{} cell-months have no prediction, e.g. {}",
            missing.len(),
            shown.join(" ")
        )));
    }
    Ok(ConfusionMap { threshold, months: out })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthMetrics {
    pub month_index: i64,
    pub rows: usize,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    /// Why a metric was not computed, if any.
    pub skipped: Option<String>,
}

/// AP and AUC within each month on its own rows.
pub fn per_month_metrics(rows: &[ScoredRow], months: &[i64]) -> Vec<MonthMetrics> {
    let mut by_month: BTreeMap<i64, (Vec<f64>, Vec<u8>)> = months.iter().map(|&m| (m, Default::default())).collect();
    for r in rows {
        if let Some((s, l)) = by_month.get_mut(&r.month_index) {
            s.push(r.score);
            l.push(r.label);
        }
    }
    by_month
        .into_iter()
        .map(|(month, (s, l))| {
            let positives = l.iter().filter(|&&v| v > 0).count();
            let ap = average_precision(&s, &l).ok();
            let auc = roc_auc(&s, &l).ok().map(|r| r.1);
            let skipped = if s.is_empty() {
                Some("no rows".to_string())
            } else if positives == 0 {
                Some("no positives".to_string())
            } else if positives == s.len() {
                Some("no negatives; AUC undefined".to_string())
            } else {
                None
            };
            MonthMetrics {
                month_index: month,
                rows: s.len(),
                positives,
                ap,
                auc,
                skipped,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonthConfusion {
    pub month_index: i64,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: usize,
    pub positives: usize,
    pub base_rate: f64,
    pub ap: f64,
    pub auc: f64,
    pub threshold: f64,
    pub at_threshold: PrecisionRecall,
    pub pr_points: Vec<(f64, f64)>,
    pub roc_points: Vec<(f64, f64)>,
    pub per_month: Vec<MonthMetrics>,
    pub confusion: Vec<MonthConfusion>,
}

/// Pooled and per-month metrics over `rows`; confusion labels at `threshold`.
pub fn evaluate(rows: &[ScoredRow], threshold: f64, cells: &[GridCell]) -> Result<(EvaluationReport, ConfusionMap)> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let positives = labels.iter().filter(|&&l| l > 0).count();
    let ap = average_precision(&scores, &labels)?;
    let (roc_points, auc) = roc_auc(&scores, &labels)?;
    let mut months: Vec<i64> = rows.iter().map(|r| r.month_index).collect();
    months.sort_unstable();
    months.dedup();
    let map = confusion_map(rows, threshold, &months, cells)?;
    let report = EvaluationReport {
        rows: rows.len(),
        positives,
        base_rate: positives as f64 / rows.len() as f64,
        ap,
        auc,
        threshold,
        at_threshold: precision_recall(&scores, &labels, threshold)?,
        pr_points: pr_curve(&scores, &labels)?,
        roc_points,
        per_month: per_month_metrics(rows, &months),
        confusion: months
            .iter()
            .map(|&m| MonthConfusion {
                month_index: m,
                counts: map.counts(m),
            })
            .collect(),
    };
    Ok((report, map))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvaluationReport {
    /// Writes `evaluation.json`, `pr_curve.csv`, `roc_curve.csv` and `per_month.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_file(&dir.join("evaluation.json"), json.as_bytes())?;
        let mut pr = String::from("recall,precision\n");
        for (r, p) in &self.pr_points {
            pr.push_str(&format!("{r},{p}\n"));
        }
        write_file(&dir.join("pr_curve.csv"), pr.as_bytes())?;
        let mut roc = String::from("fp_rate,tp_rate\n");
        for (f, t) in &self.roc_points {
            roc.push_str(&format!("{f},{t}\n"));
        }
        write_file(&dir.join("roc_curve.csv"), roc.as_bytes())?;
        let mut pm = String::from("month_index,rows,positives,ap,auc,skipped\n");
        for m in &self.per_month {
            pm.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.month_index,
                m.rows,
                m.positives,
                opt(m.ap),
                opt(m.auc),
                m.skipped.as_deref().unwrap_or("")
            ));
        }
        write_file(&dir.join("per_month.csv"), pm.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S: [f64; 4] = [0.9, 0.8, 0.3, 0.2];
    const L: [u8; 4] = [1, 0, 1, 0];

    #[test]
    fn worked_example() {
        let pr = precision_recall(&S, &L, 0.5).unwrap();
        assert_eq!(
            pr.counts,
            Counts {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!((pr.precision, pr.recall), (0.5, 0.5));
        assert!((average_precision(&S, &L).unwrap() - 0.833_333_333_333).abs() < 1e-9);
        assert_eq!(roc_auc(&S, &L).unwrap().1, 0.75);
    }

    #[test]
    fn threshold_extremes() {
        let all = precision_recall(&S, &L, 0.0).unwrap();
        assert_eq!((all.recall, all.precision), (1.0, 0.5));
        let none = precision_recall(&S, &L, 1.0).unwrap();
        assert_eq!((none.counts.tp, none.counts.fp, none.recall), (0, 0, 0.0));
        assert!(none.no_predicted_positives);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let s = [0.9, 0.7, 0.2, 0.1];
        let l = [1, 1, 0, 0];
        assert_eq!(average_precision(&s, &l).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &l).unwrap().1, 1.0);
    }

    #[test]
    fn undefined_metrics() {
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_scorer_baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let l: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.05)).collect();
        let rate = l.iter().filter(|&&v| v > 0).count() as f64 / n as f64;
        assert!((average_precision(&s, &l).unwrap() - rate).abs() < 0.02);
        let balanced: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        assert!((roc_auc(&s, &balanced).unwrap().1 - 0.5).abs() < 0.02);
    }

    #[test]
    fn calibration_rules() {
        assert_eq!(calibrate_threshold(&[0.1, 0.2], 2).unwrap(), 0.0);
        assert_eq!(calibrate_threshold(&[0.4; 5], 2).unwrap(), 0.4);
        // counts at 0.9, 0.7, 0.5, 0.1: 1, 3, 4, 5; target 3 -> 0.7, stepped to 0.5
        let p = [0.9, 0.7, 0.7, 0.5, 0.1];
        assert_eq!(calibrate_threshold(&p, 3).unwrap(), 0.5);
        assert_eq!(calibrate_threshold(&p, 0).unwrap(), 0.9);
    }

    #[test]
    fn toy_confusion_grid() {
        let cells: Vec<GridCell> = (0..4)
            .map(|i| GridCell {
                cell_id: i,
                lat: if i < 2 { 1.0 } else { 0.5 },
                lon: (i % 2) as f64 * 0.5,
            })
            .collect();
        let rows: Vec<ScoredRow> = [(0.9, 1), (0.6, 0), (0.2, 1), (0.1, 0)]
            .iter()
            .enumerate()
            .map(|(i, &(score, label))| ScoredRow {
                cell_id: i as i64,
                month_index: 7,
                score,
                label,
            })
            .collect();
        let map = confusion_map(&rows, 0.5, &[7], &cells).unwrap();
        let dir = tempfile::tempdir().unwrap();
        map.write_rasters(dir.path(), &cells).unwrap();
        let text = std::fs::read_to_string(dir.path().join("confusion_month_0007.csv")).unwrap();
        assert_eq!(text, "lat\\lon,0,0.5\n1,TP,FP\n0.5,FN,TN\n");
        assert!(confusion_map(&rows, 0.5, &[8], &cells).is_err());
        let all = confusion_map(&rows, 0.0, &[7], &cells).unwrap().counts(7);
        assert_eq!(
            all,
            Counts {
                tp: 2,
                fp: 2,
                tn: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn single_month_matches_global_and_skips_are_marked() {
        let rows: Vec<ScoredRow> = S
            .iter()
            .zip(L)
            .enumerate()
            .map(|(i, (&score, label))| ScoredRow {
                cell_id: i as i64,
                month_index: 3,
                score,
                label,
            })
            .collect();
        let m = per_month_metrics(&rows, &[3, 4]);
        assert_eq!(m[0].ap, Some(average_precision(&S, &L).unwrap()));
        assert_eq!(m[1].skipped.as_deref(), Some("no rows"));
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            s in prop::collection::vec(0.0f64..1.0, 2..40),
            l in prop::collection::vec(0u8..2, 2..40),
        ) {
            let n = s.len().min(l.len());
            let (s, mut l) = (&s[..n], l[..n].to_vec());
            l[0] = 1;
            l[n - 1] = 0;
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(average_precision(s, &l).unwrap(), average_precision(&t, &l).unwrap());
            prop_assert_eq!(roc_auc(s, &l).unwrap().1, roc_auc(&t, &l).unwrap().1);
            let curve = pr_curve(s, &l).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0].0 <= w[1].0));
        }

        #[test]
        fn confusion_counts_sum_to_n(s in prop::collection::vec(0.0f64..1.0, 1..30), thr in 0.0f64..1.0) {
            let l: Vec<u8> = s.iter().map(|v| u8::from(*v > 0.4)).collect();
            let pr = precision_recall(&s, &l, thr).unwrap();
            prop_assert_eq!(pr.counts.total(), s.len());
        }
    }
}
