//! Pseudo-3D exposure: per-month 2D Matérn-3/2 GPs over cell centroids give
//! spatial exposure surfaces (SCE); a two-trend temporal GP over each cell's
//! SCE timeline gives tempo-spatial exposure (TSCE).

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    dense_month, select_spatial_subset, write_file, CellMonthRecord, GridCell, GridLayout, MonthRange, Timeline,
};
use crate::gp::{map_estimate, FittedModel, GpModel, HyperPrior, Inputs, KernelKind, OptimizerOptions, Predictor};
use crate::temporal::{extrapolate_all, fit_two_trend, TrendSurface};
use crate::{Error, Result};

/// Spatial exposure for every cell in one month.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialSurface {
    pub month_index: i64,
    pub cell_ids: Vec<i64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SpatialSurface {
    pub fn value(&self, cell_id: i64) -> Option<f64> {
        self.cell_ids.iter().position(|&c| c == cell_id).map(|i| self.mu[i])
    }
}

/// Same shape and invariants as the temporal trend surface.
pub type TsceSurface = TrendSurface;

fn centroid(c: &GridCell) -> [f64; 2] {
    [c.lon, c.lat]
}

/// Training inputs for one month: the top-`n` cells by magnitude.
fn month_training_set(
    records: &[CellMonthRecord],
    cells: &HashMap<i64, GridCell>,
    n: usize,
) -> Result<(Inputs, Vec<f64>)> {
    let subset = select_spatial_subset(records, n);
    let mut pts = Vec::with_capacity(subset.len());
    let mut ys = Vec::with_capacity(subset.len());
    for r in &subset {
        let c = cells.get(&r.cell_id).ok_or(Error::UnknownCell(r.cell_id))?;
        pts.push(centroid(c));
        ys.push(r.magnitude);
    }
    Ok((Inputs::from_2d(&pts), ys))
}

/// Fits one shared Matérn-3/2 `(ℓ, η, ε)` over the top-`subset_size` cells of
/// every month in `months`, summing the per-month likelihoods.
pub fn fit_sce(
    fatality_timelines: &[Timeline],
    cells: &[GridCell],
    months: MonthRange,
    subset_size: usize,
    prior: &HyperPrior,
    opts: &OptimizerOptions,
) -> Result<FittedModel> {
    let by_id: HashMap<i64, GridCell> = cells.iter().map(|c| (c.cell_id, *c)).collect();
    let data = months
        .months()
        .map(|m| month_training_set(&dense_month(fatality_timelines, m), &by_id, subset_size))
        .collect::<Result<Vec<_>>>()?;
    if data.iter().all(|(x, _)| x.is_empty()) {
        return Err(Error::InvalidData("no cells to fit the spatial model on".into()));
    }
    let data: Vec<_> = data.into_iter().filter(|(x, _)| !x.is_empty()).collect();
    let init = prior.mode_model(&[KernelKind::Matern32])?;
    map_estimate(&init, prior, &data, opts)
}

/// Posterior spatial exposure at every cell centroid for one month.
pub fn estimate_sce_month(
    records: &[CellMonthRecord],
    cells: &[GridCell],
    model: &GpModel,
    subset_size: usize,
) -> Result<SpatialSurface> {
    let month_index = records.first().map(|r| r.month_index).unwrap_or(0);
    if records.iter().any(|r| r.month_index != month_index) {
        return Err(Error::InvalidData("records span more than one month".into()));
    }
    let by_id: HashMap<i64, GridCell> = cells.iter().map(|c| (c.cell_id, *c)).collect();
    let query = Inputs::from_2d(&cells.iter().map(centroid).collect::<Vec<_>>());
    let cell_ids: Vec<i64> = cells.iter().map(|c| c.cell_id).collect();
    if records.is_empty() {
        let sd = model.signal_variance().sqrt();
        return Ok(SpatialSurface {
            month_index,
            cell_ids,
            mu: vec![0.0; cells.len()],
            sigma: vec![sd; cells.len()],
        });
    }
    let (x, y) = month_training_set(records, &by_id, subset_size)?;
    let predictor = Predictor::new(model, &x, &query)?;
    let p = predictor.predict(&y)?;
    Ok(SpatialSurface {
        month_index,
        cell_ids,
        mu: p.mu_full,
        sigma: p.sigma_full,
    })
}

/// Spatial surfaces for every month in `months`.
pub fn estimate_sce_surfaces(
    fatality_timelines: &[Timeline],
    cells: &[GridCell],
    months: MonthRange,
    model: &GpModel,
    subset_size: usize,
) -> Result<Vec<SpatialSurface>> {
    months
        .months()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&m| {
            let recs = dense_month(fatality_timelines, m);
            let mut s = estimate_sce_month(&recs, cells, model, subset_size)?;
            s.month_index = m;
            Ok(s)
        })
        .collect()
}

/// Re-slices monthly surfaces into one μ_SCE timeline per cell (cell order of `cells`).
pub fn sce_timelines(surfaces: &[SpatialSurface], cells: &[GridCell]) -> Result<Vec<Timeline>> {
    let mut sorted: Vec<&SpatialSurface> = surfaces.iter().collect();
    sorted.sort_by_key(|s| s.month_index);
    let months: Vec<i64> = sorted.iter().map(|s| s.month_index).collect();
    cells
        .iter()
        .map(|c| {
            let values = sorted
                .iter()
                .map(|s| {
                    s.value(c.cell_id)
                        .ok_or_else(|| Error::InvalidData(format!("month {} lacks cell {}", s.month_index, c.cell_id)))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Timeline {
                cell_id: c.cell_id,
                months: months.clone(),
                values,
            })
        })
        .collect()
}

/// Two-trend fit on μ_SCE timelines.
pub fn fit_tsce(sce_timelines: &[&Timeline], prior: &HyperPrior, opts: &OptimizerOptions) -> Result<FittedModel> {
    fit_two_trend(sce_timelines, prior, opts)
}

/// Extrapolates one μ_SCE timeline `horizon` months ahead.
pub fn extrapolate_tsce(sce_timeline: &Timeline, model: &GpModel, horizon: usize) -> Result<TsceSurface> {
    crate::temporal::extrapolate_tce(sce_timeline, model, horizon)
}

/// Extrapolates every μ_SCE timeline.
pub fn extrapolate_tsce_all(sce_timelines: &[Timeline], model: &GpModel, horizon: usize) -> Result<Vec<TsceSurface>> {
    extrapolate_all(sce_timelines, model, horizon)
}

pub const SCE_HEADER: &str = "cell_id,month_index,mu_sce,sigma_sce";

/// Writes surfaces as `cell_id,month_index,mu_sce,sigma_sce`, ordered by cell then month.
pub fn write_sce_csv(path: &Path, surfaces: &[SpatialSurface]) -> Result<()> {
    let mut sorted: Vec<&SpatialSurface> = surfaces.iter().collect();
    sorted.sort_by_key(|s| s.month_index);
    let mut s = String::from(SCE_HEADER);
    s.push('\n');
    if let Some(first) = sorted.first() {
        for (i, cell) in first.cell_ids.iter().enumerate() {
            for surf in &sorted {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    cell, surf.month_index, surf.mu[i], surf.sigma[i]
                ));
            }
        }
    }
    write_file(path, s.as_bytes())
}

/// Reads surfaces written by [`write_sce_csv`].
pub fn read_sce_csv(path: &Path) -> Result<Vec<SpatialSurface>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut by_month: std::collections::BTreeMap<i64, SpatialSurface> = Default::default();
    for (i, row) in reader.deserialize::<(i64, i64, f64, f64)>().enumerate() {
        let (cell, month, mu, sigma) = row.map_err(|e| Error::MalformedRow {
            path: path.to_path_buf(),
            row: i + 2,
            message: e.to_string(),
        })?;
        let s = by_month.entry(month).or_insert_with(|| SpatialSurface {
            month_index: month,
            cell_ids: vec![],
            mu: vec![],
            sigma: vec![],
        });
        s.cell_ids.push(cell);
        s.mu.push(mu);
        s.sigma.push(sigma);
    }
    Ok(by_month.into_values().collect())
}

/// Writes one CSV matrix per month (`sce_month_<m>.csv`) keyed by (lat_row, lon_col).
pub fn write_sce_rasters(dir: &Path, surfaces: &[SpatialSurface], cells: &[GridCell]) -> Result<()> {
    let layout = GridLayout::new(cells);
    for s in surfaces {
        let values: HashMap<i64, f64> = s.cell_ids.iter().copied().zip(s.mu.iter().copied()).collect();
        let text = layout.render(|c| values.get(&c).map(|v| v.to_string()));
        write_file(
            &dir.join(format!("sce_month_{:04}.csv", s.month_index)),
            text.as_bytes(),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelSpec;

    fn grid(n: usize) -> Vec<GridCell> {
        (0..n * n)
            .map(|i| GridCell {
                cell_id: i as i64,
                lat: (i / n) as f64 * 0.5 + 0.25,
                lon: (i % n) as f64 * 0.5 + 0.25,
            })
            .collect()
    }

    fn model() -> GpModel {
        GpModel::new(vec![KernelSpec::matern32(0.72, 1.0)], 0.11).unwrap()
    }

    fn month(cells: &[GridCell], hot: &[(i64, u64)]) -> Vec<CellMonthRecord> {
        cells
            .iter()
            .map(|c| {
                let f = hot.iter().find(|h| h.0 == c.cell_id).map_or(0, |h| h.1);
                CellMonthRecord::new(c.cell_id, 0, f)
            })
            .collect()
    }

    #[test]
    fn zero_month_gives_zero_surface() {
        let cells = grid(6);
        let s = estimate_sce_month(&month(&cells, &[]), &cells, &model(), 60).unwrap();
        assert!(s.mu.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_source_radiates() {
        let cells = grid(7);
        let src = 3 * 7 + 3;
        let s = estimate_sce_month(&month(&cells, &[(src, 50)]), &cells, &model(), 60).unwrap();
        let at = |id: i64| s.value(id).unwrap();
        for nb in [src - 1, src + 1, src - 7, src + 7] {
            assert!(at(nb) > 0.0 && at(nb) < at(src));
        }
    }

    #[test]
    fn encirclement_beats_adjacency() {
        let cells = grid(10);
        let id = |r: i64, c: i64| r * 10 + c;
        // encircled (8,2) vs adjacency-only (8,6) next to (8,7); rows 7-9 lie
        // outside the zero-filled top-60 subset, so neither cell is observed
        let ring = [id(7, 2), id(9, 2), id(8, 1), id(8, 3)];
        let mut hot: Vec<(i64, u64)> = ring.iter().map(|&c| (c, 20)).collect();
        hot.push((id(8, 7), 20));
        let recs = month(&cells, &hot);
        let subset = select_spatial_subset(&recs, 60);
        assert!(subset.iter().all(|r| r.cell_id != id(8, 2) && r.cell_id != id(8, 6)));
        let s = estimate_sce_month(&recs, &cells, &model(), 60).unwrap();
        assert!(s.value(id(8, 2)).unwrap() > s.value(id(8, 6)).unwrap());
    }

    #[test]
    fn record_order_does_not_matter() {
        let cells = grid(5);
        let recs = month(&cells, &[(3, 4), (7, 9), (12, 1)]);
        let mut rev = recs.clone();
        rev.reverse();
        let a = estimate_sce_month(&recs, &cells, &model(), 10).unwrap();
        let b = estimate_sce_month(&rev, &cells, &model(), 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sce_csv_round_trip() {
        let cells = grid(3);
        let s0 = estimate_sce_month(&month(&cells, &[(4, 3)]), &cells, &model(), 60).unwrap();
        let s1 = SpatialSurface {
            month_index: 1,
            ..s0.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        write_sce_csv(&dir.path().join("s.csv"), &[s1.clone(), s0.clone()]).unwrap();
        assert_eq!(read_sce_csv(&dir.path().join("s.csv")).unwrap(), vec![s0, s1]);
    }
}
