//! Gram matrices, Cholesky factorization with jitter, and the log marginal
//! likelihood with analytic gradients over log-hyperparameters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::model::{GpModel, Inputs};
use crate::{Error, Result};

/// Initial diagonal jitter, relative to Σ η².
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before the model is declared singular.
pub const JITTER_MAX: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Covariance between two input sets, summed over components.
pub fn cross_covariance(model: &GpModel, a: &Inputs, b: &Inputs) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| model.cov(a.distance(i, b, j)))
}

/// Covariance between two input sets for a single component.
pub fn component_cross_covariance(model: &GpModel, component: usize, a: &Inputs, b: &Inputs) -> DMatrix<f64> {
    let spec = &model.components[component];
    DMatrix::from_fn(a.len(), b.len(), |i, j| spec.eval(a.distance(i, b, j)))
}

/// Gram matrix `K(X, X)`; with `include_noise`, `ε² + jitter` is added to the diagonal.
pub fn gram_matrix(model: &GpModel, x: &Inputs, include_noise: bool) -> Result<DMatrix<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidData("empty input set".into()));
    }
    x.check_finite()?;
    let mut k = symmetric_gram(model, x);
    if include_noise {
        let add = model.noise * model.noise + JITTER_START * model.signal_variance();
        for i in 0..x.len() {
            k[(i, i)] += add;
        }
    }
    Ok(k)
}

fn symmetric_gram(model: &GpModel, x: &Inputs) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = model.cov(x.distance(i, x, j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of the noisy Gram matrix and the relative jitter that made it succeed.
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub relative_jitter: f64,
}

impl Factor {
    pub fn new(model: &GpModel, x: &Inputs) -> Result<Factor> {
        if x.is_empty() {
            return Err(Error::InvalidData("empty input set".into()));
        }
        x.check_finite()?;
        let base = symmetric_gram(model, x);
        factor_with_jitter(base, model.noise * model.noise, model.signal_variance())
    }

    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(y)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Factorizes `base + (noise_var + jitter) I`, escalating the jitter ×10 from
/// [`JITTER_START`] to [`JITTER_MAX`] (relative to `scale`).
pub fn factor_with_jitter(base: DMatrix<f64>, noise_var: f64, scale: f64) -> Result<Factor> {
    let n = base.nrows();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut rel = JITTER_START;
    loop {
        let mut k = base.clone();
        let add = noise_var + rel * scale;
        for i in 0..n {
            k[(i, i)] += add;
        }
        if let Some(chol) = Cholesky::new(k) {
            let ok = chol.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0);
            if ok {
                return Ok(Factor {
                    chol,
                    relative_jitter: rel,
                });
            }
        }
        if rel >= JITTER_MAX * (1.0 - 1e-12) {
            return Err(Error::Singular { jitter: rel * scale });
        }
        rel *= 10.0;
    }
}

/// Log marginal likelihood of one target vector with its gradient with
/// respect to [`GpModel::log_params`].
pub fn log_marginal_likelihood(model: &GpModel, x: &Inputs, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    lml_shared_inputs(model, x, &[y])
}

/// Sum of the log marginal likelihoods of several target vectors observed at
/// the same inputs. One factorization serves every column.
pub fn lml_shared_inputs(model: &GpModel, x: &Inputs, ys: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
    let n = x.len();
    if n == 0 {
        return Err(Error::InvalidData("empty input set".into()));
    }
    if let Some(bad) = ys.iter().find(|y| y.len() != n) {
        return Err(Error::InvalidData(format!("{} targets for {n} inputs", bad.len())));
    }
    if ys.is_empty() {
        return Ok((0.0, vec![0.0; model.n_params()]));
    }
    let m = ys.len();
    let factor = Factor::new(model, x)?;
    let y = DMatrix::from_fn(n, m, |i, j| ys[j][i]);
    let alpha = factor.chol.solve(&y);

    let data_fit: f64 = y.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
    let value = -0.5 * data_fit - 0.5 * m as f64 * factor.log_det() - 0.5 * (m * n) as f64 * LN_2PI;

    // dL/dθ = ½ tr((ααᵀ − m K⁻¹) ∂K/∂θ)
    let mut w = &alpha * alpha.transpose();
    let k_inv = factor.chol.inverse();
    w -= k_inv * (m as f64);

    let n_comp = model.components.len();
    let mut grad = vec![0.0; model.n_params()];
    let mut diag_w = 0.0;
    for i in 0..n {
        diag_w += w[(i, i)];
        for j in 0..i {
            let d = x.distance(i, x, j);
            // off-diagonal pairs appear twice in the trace
            let wij = 2.0 * w[(i, j)];
            for (c, spec) in model.components.iter().enumerate() {
                let (_, dl, de) = spec.eval_with_grad(d);
                grad[2 * c] += wij * dl;
                grad[2 * c + 1] += wij * de;
            }
        }
    }
    let rel = factor.relative_jitter;
    for (c, spec) in model.components.iter().enumerate() {
        // diagonal: ∂η²/∂lnη = 2η², plus the jitter term rel·Σ η²
        grad[2 * c + 1] += diag_w * 2.0 * spec.variance() * (1.0 + rel);
    }
    grad[2 * n_comp] = diag_w * 2.0 * model.noise * model.noise;
    for g in &mut grad {
        *g *= 0.5;
    }
    Ok((value, grad))
}

/// Joint log marginal likelihood of independent timelines sharing hyperparameters.
///
/// Timelines with identical inputs are batched through one factorization;
/// groups are evaluated in parallel and summed in order of first appearance.
pub fn joint_lml(model: &GpModel, timelines: &[(Inputs, Vec<f64>)]) -> Result<(f64, Vec<f64>)> {
    if timelines.is_empty() {
        return Err(Error::InvalidData(
            "joint likelihood needs at least one timeline".into(),
        ));
    }
    let groups = group_by_inputs(timelines);
    let parts: Vec<Result<(f64, Vec<f64>)>> = groups
        .par_iter()
        .map(|members| {
            let x = &timelines[members[0]].0;
            let ys: Vec<&[f64]> = members.iter().map(|&i| timelines[i].1.as_slice()).collect();
            lml_shared_inputs(model, x, &ys)
        })
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for part in parts {
        let (v, g) = part?;
        value += v;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((value, grad))
}

/// Indices of timelines grouped by bitwise-identical inputs, in order of first appearance.
pub(crate) fn group_by_inputs(timelines: &[(Inputs, Vec<f64>)]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: std::collections::HashMap<(usize, Vec<u64>), usize> = Default::default();
    for (i, (x, _)) in timelines.iter().enumerate() {
        let key = (x.dim(), x.as_slice().iter().map(|v| v.to_bits()).collect());
        match index.get(&key) {
            Some(&g) => groups[g].push(i),
            None => {
                index.insert(key, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel::KernelSpec;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_gram() {
        let model = GpModel::new(vec![KernelSpec::se(1.0, 1.0)], 0.5).unwrap();
        let k = gram_matrix(&model, &Inputs::from_1d(&[3.0]), true).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert_relative_eq!(k[(0, 0)], 1.25 + 1e-8, max_relative = 1e-15);
    }

    #[test]
    fn duplicate_inputs_give_identical_rows() {
        let model = GpModel::new(vec![KernelSpec::matern32(2.0, 1.0)], 0.1).unwrap();
        let k = gram_matrix(&model, &Inputs::from_1d(&[1.0, 1.0, 4.0]), false).unwrap();
        assert_eq!(k.row(0), k.row(1));
        assert!(k.determinant().abs() < 1e-12);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let model = GpModel::new(vec![KernelSpec::se(1.0, 1.0)], 0.1).unwrap();
        let err = gram_matrix(&model, &Inputs::from_1d(&[0.0, f64::NAN]), true).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn one_by_one_closed_form() {
        let model = GpModel::new(vec![KernelSpec::se(1.0, 1.0)], 1.0).unwrap();
        let (v, g) = log_marginal_likelihood(&model, &Inputs::from_1d(&[0.0]), &[0.0]).unwrap();
        let expected = -0.5 * (2.0f64 + 1e-8).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(v, expected, max_relative = 1e-14);
        // no lengthscale dependence for a single point
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn zero_targets_have_no_lengthscale_data_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..10.0)).collect();
        let x = Inputs::from_1d(&xs);
        let zeros = vec![0.0; 10];
        let model = GpModel::two_trend(5.0, 0.7, 1.0, 0.3, 0.4).unwrap();
        let (_, g) = log_marginal_likelihood(&model, &x, &zeros).unwrap();
        // with y = 0 only the −½ log|K| term remains: −½ tr(K⁻¹ ∂K)
        let factor = Factor::new(&model, &x).unwrap();
        let kinv = factor.chol.inverse();
        let dk = DMatrix::from_fn(10, 10, |i, j| {
            model.components[0].eval_with_grad(x.distance(i, &x, j)).1
        });
        let expect = -0.5 * (&kinv * dk).trace();
        assert_relative_eq!(g[0], expect, max_relative = 1e-9);
    }

    #[test]
    fn joint_is_sum_and_batches_match() {
        let model = GpModel::two_trend(8.0, 0.6, 2.0, 0.3, 0.5).unwrap();
        let x = Inputs::months(0, 12);
        let y1: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).sin()).collect();
        let y2: Vec<f64> = (0..12).map(|i| (i as f64 * 0.1).cos()).collect();
        let (a, ga) = log_marginal_likelihood(&model, &x, &y1).unwrap();
        let (b, gb) = log_marginal_likelihood(&model, &x, &y2).unwrap();
        let (j, gj) = joint_lml(&model, &[(x.clone(), y1.clone()), (x.clone(), y2.clone())]).unwrap();
        assert_relative_eq!(j, a + b, max_relative = 1e-12);
        for k in 0..gj.len() {
            assert_relative_eq!(gj[k], ga[k] + gb[k], max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_reported_after_escalation() {
        let base = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = factor_with_jitter(base, 0.0, 1.0).err().unwrap();
        assert!(matches!(err, Error::Singular { .. }));
    }
}
