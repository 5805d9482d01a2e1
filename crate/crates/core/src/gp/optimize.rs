//! Box-constrained BFGS minimization and multi-start MAP estimation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::likelihood::joint_lml;
use super::model::{GpModel, HyperPrior, Inputs};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub starts: usize,
    pub max_iterations: usize,
    /// Convergence when the projected gradient ∞-norm falls below this.
    pub gradient_tolerance: f64,
    /// Largest per-coordinate step in log-space.
    pub max_step: f64,
    /// Log-parameters are kept within `log_mean ± bound_sds·log_sd` of their prior.
    pub bound_sds: f64,
    pub seed: u64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            max_iterations: 500,
            gradient_tolerance: 1e-5,
            max_step: 2.0,
            bound_sds: 6.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Projected gradient below tolerance.
    Gradient,
    /// No further decrease possible at working precision.
    Stalled,
    MaxIterations,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations)
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

/// Minimizes `f` inside the box `[lower, upper]` with projected BFGS and a
/// backtracking Armijo line search. Evaluation errors inside the line search
/// are treated as infeasible points.
pub fn minimize_bfgs<F>(f: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &OptimizerOptions) -> Result<Minimum>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lower[i], upper[i]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("objective not finite at start".into()));
    }
    let mut h = identity(n);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut stall_resets = 0;

    while iterations < opts.max_iterations {
        let (pg, active) = projected_gradient(&x, &g, lower, upper);
        if inf_norm(&pg) < opts.gradient_tolerance {
            termination = Termination::Gradient;
            break;
        }
        let mut d: Vec<f64> = (0..n)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    -(0..n).filter(|&j| !active[j]).map(|j| h[i][j] * pg[j]).sum::<f64>()
                }
            })
            .collect();
        if dot(&d, &pg) >= 0.0 {
            h = identity(n);
            d = pg.iter().map(|v| -v).collect();
        }
        let dn = inf_norm(&d);
        if dn > opts.max_step {
            d.iter_mut().for_each(|v| *v *= opts.max_step / dn);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            clamp(&mut xn);
            let decrease: f64 = g.iter().zip(xn.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if let Ok((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) && fn_ <= fx + 1e-4 * decrease {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        iterations += 1;
        let Some((xn, fn_, gn)) = accepted else {
            if stall_resets == 0 {
                // retry once along the steepest descent direction
                h = identity(n);
                stall_resets += 1;
                continue;
            }
            termination = Termination::Stalled;
            break;
        };
        stall_resets = 0;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt().max(1e-300) && sy > 0.0 {
            bfgs_update(&mut h, &s, &yv, sy);
        }
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if improvement.abs() <= 1e-14 * fx.abs().max(1.0) && inf_norm(&s) < 1e-10 {
            termination = Termination::Stalled;
            break;
        }
    }
    Ok(Minimum {
        x,
        value: fx,
        gradient: g,
        iterations,
        termination,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut pg = g.to_vec();
    let mut active = vec![false; x.len()];
    for i in 0..x.len() {
        if (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0) {
            pg[i] = 0.0;
            active[i] = true;
        }
    }
    (pg, active)
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Per-start outcome recorded with a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub initial: Vec<f64>,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub starts: Vec<StartReport>,
    pub best_start: usize,
    /// Log posterior (LML + log prior) at the optimum.
    pub log_posterior: f64,
    /// Joint log marginal likelihood at the optimum.
    pub log_marginal_likelihood: f64,
}

/// A MAP-fitted GP with its prior and optimizer metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub model: GpModel,
    pub prior: HyperPrior,
    pub optimizer: OptimizerReport,
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Joint LML plus log prior density, both with gradients over log-parameters.
pub fn log_posterior(model: &GpModel, prior: &HyperPrior, timelines: &[(Inputs, Vec<f64>)]) -> Result<(f64, Vec<f64>)> {
    let (mut value, mut grad) = joint_lml(model, timelines)?;
    for ((p, g), theta) in prior.flat().iter().zip(grad.iter_mut()).zip(model.log_params()) {
        let (lp, dlp) = p.log_density(theta);
        value += lp;
        *g += dlp;
    }
    Ok((value, grad))
}

/// Maximizes joint LML plus log prior over log-hyperparameters.
///
/// The first start is `init`; the remaining starts are drawn from the prior
/// (truncated at ±2 sd). The best converged start wins.
pub fn map_estimate(
    init: &GpModel,
    prior: &HyperPrior,
    timelines: &[(Inputs, Vec<f64>)],
    opts: &OptimizerOptions,
) -> Result<FittedModel> {
    init.validate()?;
    prior.validate()?;
    if prior.components.len() != init.components.len() {
        return Err(Error::InvalidData("prior does not match the kernel count".into()));
    }
    if timelines.is_empty() {
        return Err(Error::InvalidData("no timelines to fit".into()));
    }
    let flat = prior.flat();
    let lower: Vec<f64> = flat.iter().map(|p| p.log_mean - opts.bound_sds * p.log_sd).collect();
    let upper: Vec<f64> = flat.iter().map(|p| p.log_mean + opts.bound_sds * p.log_sd).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![init.log_params()];
    for _ in 1..opts.starts.max(1) {
        starts.push(
            flat.iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p.log_mean + p.log_sd * z.clamp(-2.0, 2.0)
                })
                .collect(),
        );
    }

    let objective = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let model = init.with_log_params(theta);
        let (v, g) = log_posterior(&model, prior, timelines)?;
        Ok((-v, g.into_iter().map(|x| -x).collect()))
    };

    let results: Vec<Result<Minimum>> = starts
        .par_iter()
        .map(|x0| minimize_bfgs(objective, x0, &lower, &upper, opts))
        .collect();

    let mut reports = Vec::with_capacity(starts.len());
    let mut best: Option<(usize, &Minimum)> = None;
    for (i, (x0, r)) in starts.iter().zip(&results).enumerate() {
        match r {
            Ok(m) => {
                reports.push(StartReport {
                    initial: x0.clone(),
                    objective: Some(-m.value),
                    iterations: m.iterations,
                    termination: Some(m.termination),
                    error: None,
                });
                if m.termination.converged() && best.is_none_or(|(_, b)| m.value < b.value) {
                    best = Some((i, m));
                }
            }
            Err(e) => reports.push(StartReport {
                initial: x0.clone(),
                objective: None,
                iterations: 0,
                termination: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((best_start, m)) = best else {
        let diagnostics = reports
            .iter()
            .enumerate()
            .map(|(i, r)| match (&r.error, r.termination) {
                (Some(e), _) => format!("start {i}: {e}"),
                (None, t) => format!("start {i}: {t:?} after {} iterations", r.iterations),
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::NonConvergence {
            starts: starts.len(),
            diagnostics,
        });
    };
    let model = init.with_log_params(&m.x);
    let (lml, _) = joint_lml(&model, timelines)?;
    Ok(FittedModel {
        model,
        prior: prior.clone(),
        optimizer: OptimizerReport {
            starts: reports,
            best_start,
            log_posterior: -m.value,
            log_marginal_likelihood: lml,
        },
    })
}
