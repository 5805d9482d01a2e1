//! Posterior means with per-component decomposition, and prior sampling.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::likelihood::{component_cross_covariance, Factor};
use super::model::{GpModel, Inputs};
use crate::{Error, Result};

/// Posterior over query points. `mu_component` sums to `mu_full`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub query_points: Inputs,
    pub mu_full: Vec<f64>,
    /// Latent-function standard deviation (observation noise excluded).
    pub sigma_full: Vec<f64>,
    pub mu_component: Vec<Vec<f64>>,
}

/// A GP conditioned on fixed training inputs and evaluated at fixed query
/// points. Any number of target vectors can be pushed through it.
pub struct Predictor {
    factor: Factor,
    query: Inputs,
    n_train: usize,
    cross_components: Vec<DMatrix<f64>>,
    cross_full: DMatrix<f64>,
    sigma: Vec<f64>,
}

impl Predictor {
    pub fn new(model: &GpModel, x: &Inputs, query: &Inputs) -> Result<Self> {
        model.validate()?;
        if x.dim() != query.dim() {
            return Err(Error::InvalidData(
                "training and query inputs differ in dimension".into(),
            ));
        }
        query.check_finite()?;
        let factor = Factor::new(model, x)?;
        let cross_components: Vec<DMatrix<f64>> = (0..model.components.len())
            .map(|c| component_cross_covariance(model, c, query, x))
            .collect();
        let mut cross_full = cross_components[0].clone();
        for c in &cross_components[1..] {
            cross_full += c;
        }
        // v = L⁻¹ K(X, X*); σ² = k(x*, x*) − ‖v‖²
        let v = factor
            .chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&cross_full.transpose())
            .ok_or(Error::Singular {
                jitter: factor.relative_jitter,
            })?;
        let prior_var = model.signal_variance();
        let sigma = v
            .column_iter()
            .map(|col| (prior_var - col.norm_squared()).max(0.0).sqrt())
            .collect();
        Ok(Self {
            factor,
            query: query.clone(),
            n_train: x.len(),
            cross_components,
            cross_full,
            sigma,
        })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn query(&self) -> &Inputs {
        &self.query
    }

    /// Posterior for one target vector.
    pub fn predict(&self, y: &[f64]) -> Result<PosteriorSummary> {
        Ok(self.predict_many(&[y])?.pop().expect("one column"))
    }

    /// Posterior for several target vectors sharing the training inputs.
    pub fn predict_many(&self, ys: &[&[f64]]) -> Result<Vec<PosteriorSummary>> {
        if let Some(bad) = ys.iter().find(|y| y.len() != self.n_train) {
            return Err(Error::InvalidData(format!(
                "{} targets for {} training inputs",
                bad.len(),
                self.n_train
            )));
        }
        if ys.is_empty() {
            return Ok(Vec::new());
        }
        let y = DMatrix::from_fn(self.n_train, ys.len(), |i, j| ys[j][i]);
        let alpha = self.factor.chol.solve(&y);
        let full = &self.cross_full * &alpha;
        let comps: Vec<DMatrix<f64>> = self.cross_components.iter().map(|k| k * &alpha).collect();
        Ok((0..ys.len())
            .map(|j| {
                let summary = PosteriorSummary {
                    query_points: self.query.clone(),
                    mu_full: full.column(j).iter().copied().collect(),
                    sigma_full: self.sigma.clone(),
                    mu_component: comps.iter().map(|m| m.column(j).iter().copied().collect()).collect(),
                };
                debug_assert!(decomposition_error(&summary) <= 1e-10);
                summary
            })
            .collect())
    }

    /// `Σ|αᵢ|` for a target vector; used in kernel-decay bounds.
    pub fn alpha_l1(&self, y: &[f64]) -> f64 {
        let a = self.factor.solve(&DVector::from_column_slice(y));
        a.iter().map(|v| v.abs()).sum()
    }
}

/// Posterior of `model` given `(x, y)`, evaluated at `query`.
pub fn posterior(model: &GpModel, x: &Inputs, y: &[f64], query: &Inputs) -> Result<PosteriorSummary> {
    if x.len() != y.len() {
        return Err(Error::InvalidData(format!(
            "{} inputs but {} targets",
            x.len(),
            y.len()
        )));
    }
    Predictor::new(model, x, query)?.predict(y)
}

/// Largest relative deviation between the component sum and the full mean.
pub fn decomposition_error(p: &PosteriorSummary) -> f64 {
    let scale = p
        .mu_full
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    (0..p.mu_full.len())
        .map(|i| {
            let s: f64 = p.mu_component.iter().map(|c| c[i]).sum();
            (s - p.mu_full[i]).abs() / scale
        })
        .fold(0.0, f64::max)
}

/// One draw from `N(0, K_noisy(X, X))`, deterministic in `seed`.
pub fn sample_prior(model: &GpModel, x: &Inputs, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = Factor::new(model, x)?;
    let z = DVector::from_fn(x.len(), |_, _| StandardNormal.sample(&mut rng));
    let l = factor.chol.l();
    Ok((l * z).iter().copied().collect())
}
