use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::SymmetricOperator;
use crate::autodiff::Graph;
use crate::data::Batch;
use crate::error::{Result, WinqError};
use crate::quant::QuantConfig;
use crate::tensor::ParamVector;

/// Largest operator the dense oracle will materialize.
pub const DENSE_ORACLE_LIMIT: usize = 2000;

/// Hessian of the loss under the straight-through convention, restricted to
/// a subset of coordinates, on one fixed batch.
pub struct SteHessian<'a> {
    graph: &'a Graph,
    params: ParamVector,
    batch: Batch,
    quant: QuantConfig,
    coords: Vec<usize>,
}

/// Build the operator. `mask` selects coordinates (all when `None`); learnable
/// step parameters are included unless the mask drops them.
pub fn ste_hessian_operator<'a>(
    graph: &'a Graph,
    params: &ParamVector,
    batch: &Batch,
    quant: &QuantConfig,
    mask: Option<&[bool]>,
) -> Result<SteHessian<'a>> {
    let coords: Vec<usize> = match mask {
        None => (0..params.len()).collect(),
        Some(m) => {
            if m.len() != params.len() {
                return Err(WinqError::Shape {
                    context: "Hessian coordinate mask".into(),
                    expected: vec![params.len()],
                    actual: vec![m.len()],
                });
            }
            (0..m.len()).filter(|&i| m[i]).collect()
        }
    };
    if coords.is_empty() {
        return Err(WinqError::Argument("Hessian coordinate mask selects nothing".into()));
    }
    // Surface evaluation errors at construction rather than inside Lanczos.
    graph.loss(params, batch, quant)?;
    Ok(SteHessian { graph, params: params.clone(), batch: batch.clone(), quant: quant.clone(), coords })
}

impl SteHessian<'_> {
    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }
}

impl SymmetricOperator for SteHessian<'_> {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.coords.len() {
            return Err(WinqError::Shape { context: "Hessian operator input".into(), expected: vec![self.coords.len()], actual: vec![v.len()] });
        }
        let mut full = vec![0.0; self.params.len()];
        for (&i, &x) in self.coords.iter().zip(v) {
            full[i] = x;
        }
        let hv = self.graph.hvp(&self.params, &self.batch, &self.quant, &full)?;
        Ok(self.coords.iter().map(|&i| hv[i]).collect())
    }

    fn describe(&self) -> String {
        let q = match self.quant.weights {
            Some(s) => format!("{:?}/{}-bit", s.kind, s.bits),
            None => "full-precision".into(),
        };
        format!("ste_hessian(dim={}, weights={q}, activations={}-bit, hadamard={})", self.coords.len(), self.quant.activation_bits, self.quant.hadamard)
    }
}

/// Explicit Hessian built column by column from operator products.
#[derive(Clone, Debug)]
pub struct DenseHessian {
    pub dim: usize,
    /// Symmetrized `(H + Hᵀ)/2`, row-major.
    pub matrix: Vec<f64>,
    /// `‖H − Hᵀ‖∞ / ‖H‖∞` before symmetrization.
    pub asymmetry: f64,
    /// `Σ e_iᵀ H e_i`.
    pub trace: f64,
    /// All eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
}

impl DenseHessian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    /// `(1/d) Σ λᵖ`.
    pub fn moment(&self, p: i32) -> f64 {
        self.eigenvalues.iter().map(|l| l.powi(p)).sum::<f64>() / self.dim as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, l| m.max(l.abs()))
    }
}

/// Materialize `op` (at most [`DENSE_ORACLE_LIMIT`] wide), symmetrize, and
/// diagonalize with a dense symmetric eigensolver.
pub fn dense_hessian_oracle<O: SymmetricOperator + ?Sized>(op: &O) -> Result<DenseHessian> {
    let d = op.dim();
    if d > DENSE_ORACLE_LIMIT {
        return Err(WinqError::TooLarge { dim: d, limit: DENSE_ORACLE_LIMIT });
    }
    let columns: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            op.apply(&e)
        })
        .collect::<Result<_>>()?;
    // columns[j][i] = H[i][j]
    let raw = |i: usize, j: usize| columns[j][i];
    let row_norm = |f: &dyn Fn(usize, usize) -> f64| (0..d).map(|i| (0..d).map(|j| f(i, j).abs()).sum::<f64>()).fold(0.0, f64::max);
    let h_norm = row_norm(&raw);
    let skew_norm = row_norm(&|i, j| raw(i, j) - raw(j, i));
    let asymmetry = if h_norm == 0.0 { 0.0 } else { skew_norm / h_norm };
    let trace = (0..d).map(|i| raw(i, i)).sum();
    let sym = DMatrix::from_fn(d, d, |i, j| 0.5 * (raw(i, j) + raw(j, i)));
    let matrix: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| sym[(i, j)]).collect();
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(DenseHessian { dim: d, matrix, asymmetry, trace, eigenvalues })
}
