//! Two-trend temporal exposure: a long SE trend plus a short Matérn-3/2
//! trend fitted on selected timelines, then extrapolated for every cell.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{write_file, Timeline};
use crate::gp::{map_estimate, FittedModel, GpModel, HyperPrior, Inputs, KernelKind, OptimizerOptions, Predictor};
use crate::{Error, Result};

/// Posterior trends of one cell over training plus forecast months.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSurface {
    pub cell_id: i64,
    pub months: Vec<i64>,
    pub mu_full: Vec<f64>,
    pub mu_long: Vec<f64>,
    pub mu_short: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `(ℓ_long, ℓ_short)` of the model that produced the surface.
    pub lengthscales: (f64, f64),
}

impl TrendSurface {
    /// Largest `|mu_long + mu_short − mu_full|` relative to `max|mu_full|`.
    pub fn decomposition_error(&self) -> f64 {
        let scale = self
            .mu_full
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        self.mu_full
            .iter()
            .zip(self.mu_long.iter().zip(&self.mu_short))
            .map(|(f, (l, s))| (l + s - f).abs() / scale)
            .fold(0.0, f64::max)
    }
}

/// Fits the long-SE + short-Matérn model on the given timelines by MAP.
pub fn fit_two_trend(timelines: &[&Timeline], prior: &HyperPrior, opts: &OptimizerOptions) -> Result<FittedModel> {
    if timelines.is_empty() {
        return Err(Error::InvalidData("no timelines selected for fitting".into()));
    }
    let init = prior.mode_model(&[KernelKind::SquaredExponential, KernelKind::Matern32])?;
    let data: Vec<(Inputs, Vec<f64>)> = timelines
        .iter()
        .map(|t| (Inputs::from_1d(&t.months_f64()), t.values.clone()))
        .collect();
    map_estimate(&init, prior, &data, opts)
}

/// TCE fit on magnitude timelines (already restricted to training months).
pub fn fit_tce(timelines: &[&Timeline], prior: &HyperPrior, opts: &OptimizerOptions) -> Result<FittedModel> {
    fit_two_trend(timelines, prior, opts)
}

/// Heuristic forecast-reliability limit: a trend carries little signal beyond
/// the last training month plus its lengthscale.
pub fn signal_horizon(lengthscale: f64) -> f64 {
    lengthscale
}

fn lengthscales(model: &GpModel) -> Result<(f64, f64)> {
    match model.components.as_slice() {
        [long, short] => Ok((long.lengthscale, short.lengthscale)),
        _ => Err(Error::InvalidData("expected a two-component trend model".into())),
    }
}

fn query_months(t: &Timeline, horizon: usize) -> Vec<i64> {
    let mut months = t.months.clone();
    let last = *months.last().unwrap_or(&-1);
    months.extend((1..=horizon as i64).map(|h| last + h));
    months
}

/// Posterior trends over the timeline's months plus `horizon` future months.
pub fn extrapolate_tce(timeline: &Timeline, model: &GpModel, horizon: usize) -> Result<TrendSurface> {
    Ok(extrapolate_all(std::slice::from_ref(timeline), model, horizon)?.remove(0))
}

/// Extrapolates every timeline with shared hyperparameters.
///
/// Timelines over the same months share one factorization; all-zero
/// timelines get μ = 0 without a solve.
pub fn extrapolate_all(timelines: &[Timeline], model: &GpModel, horizon: usize) -> Result<Vec<TrendSurface>> {
    let ls = lengthscales(model)?;
    let mut groups: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (i, t) in timelines.iter().enumerate() {
        if t.months.is_empty() || t.months.len() != t.values.len() {
            return Err(Error::InvalidData(format!(
                "timeline of cell {} is empty or ragged",
                t.cell_id
            )));
        }
        groups.entry(t.months.clone()).or_default().push(i);
    }
    let mut out: Vec<Option<TrendSurface>> = vec![None; timelines.len()];
    let solved: Vec<Result<Vec<(usize, TrendSurface)>>> = groups
        .par_iter()
        .map(|(months, members)| {
            let x = Inputs::from_1d(&months.iter().map(|&m| m as f64).collect::<Vec<_>>());
            let q_months = query_months(&timelines[members[0]], horizon);
            let q = Inputs::from_1d(&q_months.iter().map(|&m| m as f64).collect::<Vec<_>>());
            let predictor = Predictor::new(model, &x, &q)?;
            let nonzero: Vec<usize> = members.iter().copied().filter(|&i| !timelines[i].is_zero()).collect();
            let ys: Vec<&[f64]> = nonzero.iter().map(|&i| timelines[i].values.as_slice()).collect();
            let posts = predictor.predict_many(&ys)?;
            let mut res = Vec::with_capacity(members.len());
            for (&i, p) in nonzero.iter().zip(posts) {
                let mut comps = p.mu_component.into_iter();
                res.push((
                    i,
                    TrendSurface {
                        cell_id: timelines[i].cell_id,
                        months: q_months.clone(),
                        mu_full: p.mu_full,
                        mu_long: comps.next().unwrap_or_default(),
                        mu_short: comps.next().unwrap_or_default(),
                        sigma: p.sigma_full,
                        lengthscales: ls,
                    },
                ));
            }
            let zeros = vec![0.0; q_months.len()];
            for &i in members.iter().filter(|&&i| timelines[i].is_zero()) {
                res.push((
                    i,
                    TrendSurface {
                        cell_id: timelines[i].cell_id,
                        months: q_months.clone(),
                        mu_full: zeros.clone(),
                        mu_long: zeros.clone(),
                        mu_short: zeros.clone(),
                        sigma: predictor.sigma().to_vec(),
                        lengthscales: ls,
                    },
                ));
            }
            Ok(res)
        })
        .collect();
    for group in solved {
        for (i, s) in group? {
            out[i] = Some(s);
        }
    }
    Ok(out
        .into_iter()
        .map(|s| s.expect("every timeline belongs to a group"))
        .collect())
}

pub const TREND_HEADER: &str = "cell_id,month_index,mu_full,mu_long,mu_short,sigma";

/// Writes surfaces as `cell_id,month_index,mu_full,mu_long,mu_short,sigma`.
pub fn write_trend_csv(path: &Path, surfaces: &[TrendSurface]) -> Result<()> {
    let mut s = String::from(TREND_HEADER);
    s.push('\n');
    for t in surfaces {
        for i in 0..t.months.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.cell_id, t.months[i], t.mu_full[i], t.mu_long[i], t.mu_short[i], t.sigma[i]
            ));
        }
    }
    write_file(path, s.as_bytes())
}

/// Reads surfaces written by [`write_trend_csv`]. Lengthscales are not part
/// of the CSV and are taken from `lengthscales`.
pub fn read_trend_csv(path: &Path, lengthscales: (f64, f64)) -> Result<Vec<TrendSurface>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut by_cell: BTreeMap<i64, TrendSurface> = BTreeMap::new();
    let mut order = Vec::new();
    for (i, row) in reader.deserialize::<(i64, i64, f64, f64, f64, f64)>().enumerate() {
        let (cell, month, full, long, short, sigma) = row.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            row: i + 2,
            message: e.to_string(),
        })?;
        let t = by_cell.entry(cell).or_insert_with(|| {
            order.push(cell);
            TrendSurface {
                cell_id: cell,
                months: vec![],
                mu_full: vec![],
                mu_long: vec![],
                mu_short: vec![],
                sigma: vec![],
                lengthscales,
            }
        });
        t.months.push(month);
        t.mu_full.push(full);
        t.mu_long.push(long);
        t.mu_short.push(short);
        t.sigma.push(sigma);
    }
    Ok(order
        .into_iter()
        .map(|c| by_cell.remove(&c).expect("cell present"))
        .collect())
}
