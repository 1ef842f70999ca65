//! Matrix-free spectral density estimation (stochastic Lanczos quadrature),
//! spectrum statistics and a dense eigendecomposition oracle.

mod hessian;
mod lanczos;
mod slq;

pub use hessian::{dense_hessian_oracle, ste_hessian_operator, DenseHessian, SteHessian, DENSE_ORACLE_LIMIT};
pub use lanczos::{lanczos_tridiagonalize, tql2_first_row, Tridiagonal, BREAKDOWN_TOL};
pub use slq::{rademacher_probe, slq_estimate, SlqConfig, SpectrumEstimate};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WinqError};

/// Default near-zero threshold for eigenvalue mass.
pub const DEFAULT_TAU: f64 = 1e-3;

/// A linear map `v ↦ A v` with `A` symmetric, accessed only through products.
pub trait SymmetricOperator<F = f64>: Sync {
    fn dim(&self) -> usize;

    fn apply(&self, v: &[F]) -> Result<Vec<F>>;

    fn describe(&self) -> String {
        format!("operator of dimension {}", self.dim())
    }
}

/// `diag(values)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalOperator<F>(pub Vec<F>);

impl<F: Float + Send + Sync> SymmetricOperator<F> for DiagonalOperator<F> {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, v: &[F]) -> Result<Vec<F>> {
        check_len(self.dim(), v.len())?;
        Ok(self.0.iter().zip(v).map(|(&a, &x)| a * x).collect())
    }

    fn describe(&self) -> String {
        format!("diagonal({})", self.0.len())
    }
}

/// Dense symmetric matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOperator<F> {
    n: usize,
    data: Vec<F>,
}

impl<F: Float> DenseOperator<F> {
    pub fn new(n: usize, data: Vec<F>) -> Result<Self> {
        check_len(n * n, data.len())?;
        Ok(Self { n, data })
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.n + j]
    }
}

impl<F: Float + Send + Sync> SymmetricOperator<F> for DenseOperator<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, v: &[F]) -> Result<Vec<F>> {
        check_len(self.n, v.len())?;
        Ok(self
            .data
            .chunks(self.n)
            .map(|row| row.iter().zip(v).fold(F::zero(), |acc, (&a, &x)| acc + a * x))
            .collect())
    }

    fn describe(&self) -> String {
        format!("dense({})", self.n)
    }
}

/// `Σ λ_i u_i u_iᵀ` over explicitly stored orthonormal vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankOperator<F> {
    dim: usize,
    terms: Vec<(F, Vec<F>)>,
}

impl<F: Float> LowRankOperator<F> {
    pub fn new(dim: usize, terms: Vec<(F, Vec<F>)>) -> Result<Self> {
        for (_, u) in &terms {
            check_len(dim, u.len())?;
        }
        Ok(Self { dim, terms })
    }
}

impl<F: Float + Send + Sync> SymmetricOperator<F> for LowRankOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[F]) -> Result<Vec<F>> {
        check_len(self.dim, v.len())?;
        let mut out = vec![F::zero(); self.dim];
        for (lambda, u) in &self.terms {
            let c = *lambda * u.iter().zip(v).fold(F::zero(), |acc, (&a, &x)| acc + a * x);
            for (o, &ui) in out.iter_mut().zip(u) {
                *o = *o + c * ui;
            }
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("low_rank({}, rank {})", self.dim, self.terms.len())
    }
}

/// `A + shift·I`.
pub struct Shifted<'a, F, O: ?Sized> {
    pub inner: &'a O,
    pub shift: F,
}

impl<F: Float + Send + Sync, O: SymmetricOperator<F> + ?Sized> SymmetricOperator<F> for Shifted<'_, F, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn apply(&self, v: &[F]) -> Result<Vec<F>> {
        let mut out = self.inner.apply(v)?;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + self.shift * x;
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("{} + shift", self.inner.describe())
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(WinqError::Shape { context: "operator input".into(), expected: vec![expected], actual: vec![actual] });
    }
    Ok(())
}

/// Summary statistics of a discrete spectral estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub max_abs: f64,
    pub near_zero_mass: f64,
    pub negative_mass: f64,
    pub positive_mass: f64,
    pub tau: f64,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
}

/// Mass within `|θ| ≤ τ`, beyond it on either side, and the largest `|θ|`
/// carrying positive weight.
pub fn spectrum_stats(estimate: &SpectrumEstimate, tau: f64) -> Result<SpectrumStats> {
    if !(tau > 0.0) {
        return Err(WinqError::Argument(format!("threshold tau {tau} must be positive")));
    }
    if estimate.nodes.is_empty() {
        return Err(WinqError::Argument("empty spectrum estimate".into()));
    }
    let (mut near, mut neg, mut pos, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    for &(theta, w) in &estimate.nodes {
        if w > 0.0 {
            max_abs = max_abs.max(theta.abs());
        }
        if theta.abs() <= tau {
            near += w;
        } else if theta < 0.0 {
            neg += w;
        } else {
            pos += w;
        }
    }
    Ok(SpectrumStats {
        max_abs,
        near_zero_mass: near,
        negative_mass: neg,
        positive_mass: pos,
        tau,
        m: estimate.probes,
        k: estimate.steps,
        seed: estimate.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationarityClass {
    NotStationary,
    ApproxStrictSaddle,
    ApproxLocalMinimumRegion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaddleReport {
    pub grad_rel_norm: f64,
    pub class: StationarityClass,
    pub negative_mass: f64,
    pub tau: f64,
}

/// Classify a point from its gradient and a spectrum estimated there: not
/// stationary when `‖∇‖/‖W‖ > eps`, otherwise a strict saddle when any mass
/// lies below `−τ` (τ taken from `stats`).
pub fn saddle_diagnostic(grad: &[f64], params: &[f64], stats: &SpectrumStats, eps: f64) -> SaddleReport {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let wn = norm(params);
    let grad_rel_norm = if wn == 0.0 { norm(grad) } else { norm(grad) / wn };
    let class = if grad_rel_norm > eps {
        StationarityClass::NotStationary
    } else if stats.negative_mass > 0.0 {
        StationarityClass::ApproxStrictSaddle
    } else {
        StationarityClass::ApproxLocalMinimumRegion
    };
    SaddleReport { grad_rel_norm, class, negative_mass: stats.negative_mass, tau: stats.tau }
}
