//! Synthetic ground truth sampled from the additive GP model.
//!
//! Each cell carries a latent log-magnitude
//! `baseline + link_scale · (static + long + short)` where the static field
//! varies over space only and the two trends vary over months with the
//! squared-exponential (long) and Matérn-3/2 (short) kernels. All three share
//! a Matérn-3/2 spatial correlation, so conflict clusters and diffuses.
//! Fatalities are `round(exp(latent + ε·z) − 1)` clamped at zero.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_file, CellMonthRecord, EventData, GridCell, Timeline};
use crate::gp::likelihood::{factor_with_jitter, gram_matrix};
use crate::gp::{sample_prior, GpModel, Inputs, KernelSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub months: usize,
    /// Degrees between neighbouring centroids.
    pub cell_size: f64,
    /// Centroid of the south-west cell, `(lat, lon)`.
    pub origin: (f64, f64),
    pub long_lengthscale: f64,
    pub long_amplitude: f64,
    pub short_lengthscale: f64,
    pub short_amplitude: f64,
    /// Standard deviation of the emission noise on the log scale.
    pub noise: f64,
    /// Lengthscale of the spatial correlation, in degrees.
    pub spatial_lengthscale: f64,
    /// Amplitude of the static hotspot field.
    pub spatial_amplitude: f64,
    /// Share of independent (per-cell) variation in the spatial correlation.
    pub spatial_noise: f64,
    /// Latent offset; negative values make most cell-months peaceful.
    pub baseline: f64,
    /// Scale mapping the latent GP sum onto log fatalities.
    pub link_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            cols: 20,
            months: 372,
            cell_size: 0.5,
            origin: (0.25, 30.25),
            long_lengthscale: 60.0,
            long_amplitude: 0.8,
            short_lengthscale: 4.0,
            short_amplitude: 0.8,
            noise: 0.5,
            spatial_lengthscale: 1.0,
            spatial_amplitude: 1.0,
            spatial_noise: 0.3,
            baseline: -3.0,
            link_scale: 1.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cell_size", self.cell_size),
            ("long_lengthscale", self.long_lengthscale),
            ("long_amplitude", self.long_amplitude),
            ("short_lengthscale", self.short_lengthscale),
            ("short_amplitude", self.short_amplitude),
            ("noise", self.noise),
            ("spatial_lengthscale", self.spatial_lengthscale),
            ("spatial_amplitude", self.spatial_amplitude),
            ("spatial_noise", self.spatial_noise),
            ("link_scale", self.link_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidData(format!("synth {name} must be positive, got {v}")));
            }
        }
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidData("synthetic grid must be at least 2×2".into()));
        }
        if self.months < 24 {
            return Err(Error::InvalidData("synthetic data needs at least 24 months".into()));
        }
        if !self.baseline.is_finite() || !self.origin.0.is_finite() || !self.origin.1.is_finite() {
            return Err(Error::InvalidData("synth baseline and origin must be finite".into()));
        }
        Ok(())
    }

    /// Cells in row-major order from the south-west corner; ids start at 1.
    pub fn cells(&self) -> Vec<GridCell> {
        (0..self.rows * self.cols)
            .map(|i| GridCell {
                cell_id: i as i64 + 1,
                lat: self.origin.0 + (i / self.cols) as f64 * self.cell_size,
                lon: self.origin.1 + (i % self.cols) as f64 * self.cell_size,
            })
            .collect()
    }
}

/// Latent components per cell-month, row-major by cell then month.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub cell_ids: Vec<i64>,
    pub months: usize,
    pub static_field: Vec<f64>,
    pub long: Vec<Vec<f64>>,
    pub short: Vec<Vec<f64>>,
    /// `baseline + link_scale · (static + long + short)`.
    pub latent: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub events: EventData,
    pub truth: SynthTruth,
}

/// Lower Cholesky factor of a kernel Gram matrix (no noise, minimal jitter).
fn kernel_factor(spec: KernelSpec, x: &Inputs, extra_diagonal: f64) -> Result<DMatrix<f64>> {
    let model = GpModel::new(vec![spec], 1.0)?;
    let k = gram_matrix(&model, x, false)?;
    Ok(factor_with_jitter(k, extra_diagonal, spec.variance())?.chol.l())
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // filled row by row so the draw order does not depend on storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

/// Samples a dataset; identical configs give identical output.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let cells = config.cells();
    let n = cells.len();
    let t = config.months;
    let pts: Vec<[f64; 2]> = cells.iter().map(|c| [c.lon, c.lat]).collect();
    let space = Inputs::from_2d(&pts);
    let months = Inputs::months(0, t);

    // R = (M32(ℓ_s) + ε_s² I) / (1 + ε_s²), unit variance per cell
    let s2 = config.spatial_noise * config.spatial_noise;
    let l_space = kernel_factor(KernelSpec::matern32(config.spatial_lengthscale, 1.0), &space, s2)? / (1.0 + s2).sqrt();
    let l_long = kernel_factor(KernelSpec::se(config.long_lengthscale, 1.0), &months, 0.0)?;
    let l_short = kernel_factor(KernelSpec::matern32(config.short_lengthscale, 1.0), &months, 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let z_static = normal_matrix(n, 1, &mut rng);
    let z_long = normal_matrix(n, t, &mut rng);
    let z_short = normal_matrix(n, t, &mut rng);
    let static_field = (&l_space * z_static) * config.spatial_amplitude;
    let long = &l_space * z_long * l_long.transpose() * config.long_amplitude;
    let short = &l_space * z_short * l_short.transpose() * config.short_amplitude;

    let mut records = Vec::with_capacity(n * t);
    let mut truth = SynthTruth {
        cell_ids: cells.iter().map(|c| c.cell_id).collect(),
        months: t,
        static_field: static_field.iter().copied().collect(),
        long: Vec::with_capacity(n),
        short: Vec::with_capacity(n),
        latent: Vec::with_capacity(n),
    };
    for (i, cell) in cells.iter().enumerate() {
        let lo: Vec<f64> = long.row(i).iter().copied().collect();
        let sh: Vec<f64> = short.row(i).iter().copied().collect();
        let latent: Vec<f64> = (0..t)
            .map(|m| config.baseline + config.link_scale * (static_field[i] + lo[m] + sh[m]))
            .collect();
        for (m, &z) in latent.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            let fatalities = ((z + config.noise * e).exp() - 1.0).round().max(0.0);
            records.push(CellMonthRecord::new(
                cell.cell_id,
                m as i64,
                fatalities.min(1e12) as u64,
            ));
        }
        truth.long.push(lo);
        truth.short.push(sh);
        truth.latent.push(latent);
    }
    Ok(SynthOutput {
        events: EventData { records, cells },
        truth,
    })
}

pub const TRUTH_HEADER: &str = "cell_id,month_index,latent,static,long,short";

impl SynthTruth {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRUTH_HEADER}\n");
        for (i, cell) in self.cell_ids.iter().enumerate() {
            for m in 0..self.months {
                s.push_str(&format!(
                    "{cell},{m},{},{},{},{}\n",
                    self.latent[i][m], self.static_field[i], self.long[i][m], self.short[i][m]
                ));
            }
        }
        s
    }
}

/// Writes `events.csv`, `truth.csv` and `synth_config.json` into `dir`.
pub fn write_synth(dir: &Path, config: &SynthConfig, out: &SynthOutput) -> Result<()> {
    crate::data::write_events(&dir.join("events.csv"), &out.events)?;
    write_file(&dir.join("truth.csv"), out.truth.to_csv().as_bytes())?;
    write_file(
        &dir.join("synth_config.json"),
        serde_json::to_string_pretty(config)?.as_bytes(),
    )
}

/// `count` independent noisy draws `f + ε` from `model` over months `0..months`,
/// as timelines with cell ids `0..count`.
pub fn two_trend_timelines(model: &GpModel, count: usize, months: usize, seed: u64) -> Result<Vec<Timeline>> {
    let x = Inputs::months(0, months);
    (0..count)
        .map(|i| {
            let values = sample_prior(model, &x, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64))?;
            Ok(Timeline {
                cell_id: i as i64,
                months: (0..months as i64).collect(),
                values,
            })
        })
        .collect()
}
