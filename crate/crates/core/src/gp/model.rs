use serde::{Deserialize, Serialize};

use super::kernel::{KernelKind, KernelSpec};
use crate::{Error, Result};

/// Input locations of a GP, stored row-major with a fixed dimension.
///
/// One-dimensional inputs are months; two-dimensional inputs are
/// `(lon, lat)` centroids in decimal degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    dim: usize,
    data: Vec<f64>,
}

impl Inputs {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::InvalidData(format!(
                "input buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_1d(xs: &[f64]) -> Self {
        Self {
            dim: 1,
            data: xs.to_vec(),
        }
    }

    pub fn from_2d(points: &[[f64; 2]]) -> Self {
        Self {
            dim: 2,
            data: points.iter().flatten().copied().collect(),
        }
    }

    /// Integer month grid `start..start+len`.
    pub fn months(start: i64, len: usize) -> Self {
        Self::from_1d(&(0..len).map(|i| (start + i as i64) as f64).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Concatenates two input sets of the same dimension.
    pub fn concat(&self, other: &Inputs) -> Result<Inputs> {
        if self.dim != other.dim {
            return Err(Error::InvalidData("input dimension mismatch".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Inputs { dim: self.dim, data })
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::InvalidData(format!(
                "non-finite input coordinate at point {}",
                pos / self.dim
            ))),
            None => Ok(()),
        }
    }

    /// Euclidean distance between point `i` of `self` and point `j` of `other`.
    #[inline]
    pub fn distance(&self, i: usize, other: &Inputs, j: usize) -> f64 {
        let a = self.point(i);
        let b = other.point(j);
        if self.dim == 1 {
            return (a[0] - b[0]).abs();
        }
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

/// Zero-mean GP with additive kernel components and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub components: Vec<KernelSpec>,
    /// Observation noise standard deviation ε; the Gram diagonal gets ε².
    pub noise: f64,
}

impl GpModel {
    pub fn new(components: Vec<KernelSpec>, noise: f64) -> Result<Self> {
        let model = Self { components, noise };
        model.validate()?;
        Ok(model)
    }

    /// Long-term SE plus short-term Matérn-3/2 trend model.
    pub fn two_trend(
        long_lengthscale: f64,
        long_amplitude: f64,
        short_lengthscale: f64,
        short_amplitude: f64,
        noise: f64,
    ) -> Result<Self> {
        Self::new(
            vec![
                KernelSpec::se(long_lengthscale, long_amplitude),
                KernelSpec::matern32(short_lengthscale, short_amplitude),
            ],
            noise,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidData("GP model needs at least one kernel".into()));
        }
        for c in &self.components {
            if !(c.lengthscale > 0.0 && c.lengthscale.is_finite()) || !(c.amplitude > 0.0 && c.amplitude.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "kernel hyperparameters must be positive and finite: {c:?}"
                )));
            }
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidData(format!(
                "noise must be positive and finite, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Number of free hyperparameters (two per component plus noise).
    pub fn n_params(&self) -> usize {
        2 * self.components.len() + 1
    }

    /// `[ln ℓ₁, ln η₁, …, ln ℓₘ, ln ηₘ, ln ε]`.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for c in &self.components {
            p.push(c.lengthscale.ln());
            p.push(c.amplitude.ln());
        }
        p.push(self.noise.ln());
        p
    }

    pub fn with_log_params(&self, p: &[f64]) -> GpModel {
        debug_assert_eq!(p.len(), self.n_params());
        let components = self
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| KernelSpec::new(c.kind, p[2 * i].exp(), p[2 * i + 1].exp()))
            .collect();
        GpModel {
            components,
            noise: p[p.len() - 1].exp(),
        }
    }

    /// Σ η² over components.
    pub fn signal_variance(&self) -> f64 {
        self.components.iter().map(KernelSpec::variance).sum()
    }

    /// Sum of all component covariances at distance `d`.
    #[inline]
    pub fn cov(&self, d: f64) -> f64 {
        self.components.iter().map(|c| c.eval(d)).sum()
    }

    pub fn kinds(&self) -> Vec<KernelKind> {
        self.components.iter().map(|c| c.kind).collect()
    }
}

/// Normal prior on a log-hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub log_mean: f64,
    pub log_sd: f64,
}

impl LogNormalPrior {
    /// Prior whose median on the natural scale is `median`.
    pub fn around(median: f64, log_sd: f64) -> Self {
        Self {
            log_mean: median.ln(),
            log_sd,
        }
    }

    /// Log density of `ln θ` and its derivative.
    pub fn log_density(&self, log_value: f64) -> (f64, f64) {
        let z = (log_value - self.log_mean) / self.log_sd;
        let norm = -(self.log_sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
        (norm - 0.5 * z * z, -z / self.log_sd)
    }

    pub fn mode(&self) -> f64 {
        self.log_mean.exp()
    }
}

/// Priors for every hyperparameter, in the same order as [`GpModel::log_params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    /// `(lengthscale, amplitude)` per component.
    pub components: Vec<(LogNormalPrior, LogNormalPrior)>,
    pub noise: LogNormalPrior,
}

impl HyperPrior {
    /// Default priors for the long-SE plus short-Matérn trend model.
    pub fn two_trend_default() -> Self {
        let amp = LogNormalPrior::around(0.5, 1.5);
        Self {
            components: vec![
                (LogNormalPrior::around(100.0, 1.0), amp),
                (LogNormalPrior::around(5.0, 1.0), amp),
            ],
            noise: LogNormalPrior::around(0.5, 1.5),
        }
    }

    /// Default priors for a single spatial Matérn component (degrees).
    pub fn spatial_default() -> Self {
        let amp = LogNormalPrior::around(0.5, 1.5);
        Self {
            components: vec![(LogNormalPrior::around(1.0, 1.0), amp)],
            noise: LogNormalPrior::around(0.5, 1.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .components
            .iter()
            .flat_map(|(a, b)| [a, b])
            .chain(std::iter::once(&self.noise));
        for p in all {
            if !(p.log_sd > 0.0 && p.log_sd.is_finite() && p.log_mean.is_finite()) {
                return Err(Error::InvalidData(format!("invalid prior {p:?}")));
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<LogNormalPrior> {
        let mut v: Vec<_> = self.components.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.push(self.noise);
        v
    }

    /// Model at the prior modes, with the given kernel kinds.
    pub fn mode_model(&self, kinds: &[KernelKind]) -> Result<GpModel> {
        if kinds.len() != self.components.len() {
            return Err(Error::InvalidData("prior/kernel count mismatch".into()));
        }
        GpModel::new(
            kinds
                .iter()
                .zip(&self.components)
                .map(|(&k, (l, a))| KernelSpec::new(k, l.mode(), a.mode()))
                .collect(),
            self.noise.mode(),
        )
    }
}
