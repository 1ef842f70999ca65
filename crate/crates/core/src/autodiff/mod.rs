//! Reverse-mode differentiation over a static graph, and exact
//! Hessian-vector products by running the same reverse pass over dual numbers.

mod eval;
pub mod graph;

pub use graph::{param_shape, Graph, GraphBuilder, Node, NodeId, NodeShape, Op, Rows, TokenSource};

use crate::data::Batch;
use crate::error::{Result, WinqError};
use crate::quant::QuantConfig;
use crate::scalar::{Dual, Scalar};
use crate::tensor::{ParamLayout, ParamVector};

impl Graph {
    /// Loss for an arbitrary scalar type.
    pub fn loss_with<S: Scalar>(&self, layout: &ParamLayout, params: &[S], batch: &Batch, quant: &QuantConfig) -> Result<S> {
        Ok(eval::forward(self, layout, params, batch, quant)?.output(self))
    }

    /// Loss and gradient for an arbitrary scalar type.
    pub fn grad_with<S: Scalar>(&self, layout: &ParamLayout, params: &[S], batch: &Batch, quant: &QuantConfig) -> Result<(S, Vec<S>)> {
        let tape = eval::forward(self, layout, params, batch, quant)?;
        let grad = eval::backward(self, layout, &tape, batch, quant);
        Ok((tape.output(self), grad))
    }

    pub fn loss(&self, params: &ParamVector, batch: &Batch, quant: &QuantConfig) -> Result<f64> {
        self.loss_with(params.layout(), params.as_slice(), batch, quant)
    }

    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch, quant: &QuantConfig) -> Result<(f64, Vec<f64>)> {
        self.grad_with(params.layout(), params.as_slice(), batch, quant)
    }

    /// `H v`, exact up to rounding: the gradient evaluated over `Dual(w, v)`
    /// carries the directional derivative of the gradient in its tangent.
    pub fn hvp(&self, params: &ParamVector, batch: &Batch, quant: &QuantConfig, v: &[f64]) -> Result<Vec<f64>> {
        check_direction(params, v)?;
        let seeded: Vec<Dual<f64>> = params.as_slice().iter().zip(v).map(|(&w, &d)| Dual::new(w, d)).collect();
        let (_, g) = self.grad_with(params.layout(), &seeded, batch, quant)?;
        Ok(g.into_iter().map(|x| x.eps).collect())
    }

    /// Central differences of gradients along `v`. `eps = None` picks
    /// `sqrt(machine eps)·(1 + ‖W‖∞)`.
    ///
    /// Only defined for full-precision evaluation: the quantizer is piecewise
    /// constant, so differences of straight-through gradients do not see the
    /// curvature that the straight-through Hessian carries.
    pub fn hvp_fd(&self, params: &ParamVector, batch: &Batch, quant: &QuantConfig, v: &[f64], eps: Option<f64>) -> Result<Vec<f64>> {
        check_direction(params, v)?;
        if !quant.is_identity() {
            return Err(WinqError::Config("finite-difference Hessian products need a full-precision configuration".into()));
        }
        let eps = match eps {
            Some(e) if e > 0.0 && e.is_finite() => e,
            Some(e) => return Err(WinqError::Argument(format!("finite-difference step {e} must be positive"))),
            None => {
                let wmax = params.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
                f64::EPSILON.sqrt() * (1.0 + wmax)
            }
        };
        let shifted = |sign: f64| -> Result<Vec<f64>> {
            let x: Vec<f64> = params.as_slice().iter().zip(v).map(|(&w, &d)| w + sign * eps * d).collect();
            Ok(self.grad_with(params.layout(), &x, batch, quant)?.1)
        };
        let (gp, gm) = (shifted(1.0)?, shifted(-1.0)?);
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    }
}

fn check_direction(params: &ParamVector, v: &[f64]) -> Result<()> {
    if v.len() != params.len() {
        return Err(WinqError::Shape { context: "direction vector".into(), expected: vec![params.len()], actual: vec![v.len()] });
    }
    Ok(())
}

pub fn forward_eval(graph: &Graph, params: &ParamVector, batch: &Batch, quant: &QuantConfig) -> Result<f64> {
    graph.loss(params, batch, quant)
}

pub fn backward_grad(graph: &Graph, params: &ParamVector, batch: &Batch, quant: &QuantConfig) -> Result<Vec<f64>> {
    Ok(graph.loss_and_grad(params, batch, quant)?.1)
}

pub fn hvp(graph: &Graph, params: &ParamVector, batch: &Batch, quant: &QuantConfig, v: &[f64]) -> Result<Vec<f64>> {
    graph.hvp(params, batch, quant, v)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(WinqError::Argument(format!("finite-difference step {eps} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}
