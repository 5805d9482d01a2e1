//! Stationary covariance functions.

use serde::{Deserialize, Serialize};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Squared exponential, `η²·exp(−d²/(2ℓ²))`.
    SquaredExponential,
    /// Matérn ν=3/2, `η²·(1+√3·d/ℓ)·exp(−√3·d/ℓ)`.
    Matern32,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::SquaredExponential => "se",
            KernelKind::Matern32 => "matern32",
        }
    }
}

/// One additive kernel component with its lengthscale and amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub lengthscale: f64,
    pub amplitude: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, lengthscale: f64, amplitude: f64) -> Self {
        Self {
            kind,
            lengthscale,
            amplitude,
        }
    }

    pub fn se(lengthscale: f64, amplitude: f64) -> Self {
        Self::new(KernelKind::SquaredExponential, lengthscale, amplitude)
    }

    pub fn matern32(lengthscale: f64, amplitude: f64) -> Self {
        Self::new(KernelKind::Matern32, lengthscale, amplitude)
    }

    /// Prior variance `k(x, x) = η²`.
    pub fn variance(&self) -> f64 {
        self.amplitude * self.amplitude
    }

    /// Covariance at distance `d`.
    #[inline]
    pub fn eval(&self, d: f64) -> f64 {
        kernel_eval(self, d)
    }

    /// Covariance and its derivatives with respect to `ln ℓ` and `ln η`.
    #[inline]
    pub fn eval_with_grad(&self, d: f64) -> (f64, f64, f64) {
        let eta2 = self.variance();
        match self.kind {
            KernelKind::SquaredExponential => {
                let q = d * d / (self.lengthscale * self.lengthscale);
                let k = eta2 * (-0.5 * q).exp();
                (k, k * q, 2.0 * k)
            }
            KernelKind::Matern32 => {
                let r = SQRT3 * d / self.lengthscale;
                let e = (-r).exp();
                let k = eta2 * (1.0 + r) * e;
                (k, eta2 * r * r * e, 2.0 * k)
            }
        }
    }
}

/// Evaluates a kernel at a non-negative distance.
#[inline]
pub fn kernel_eval(spec: &KernelSpec, d: f64) -> f64 {
    let eta2 = spec.variance();
    match spec.kind {
        KernelKind::SquaredExponential => {
            let q = d / spec.lengthscale;
            eta2 * (-0.5 * q * q).exp()
        }
        KernelKind::Matern32 => {
            let r = SQRT3 * d / spec.lengthscale;
            eta2 * (1.0 + r) * (-r).exp()
        }
    }
}
