//! Re-initialization as a proximal step: closed-form prox updates, the
//! interpolation/regularization map, a Hessian shift check, and the curvature
//! sweep along the path from latent to quantized weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Batch;
use crate::error::{Result, WinqError};
use crate::hadamard::fwht_rows;
use crate::quant::{quantize_grouped, QuantConfig};
use crate::scalar::{Dual, Scalar};
use crate::spectrum::{
    dense_hessian_oracle, slq_estimate, spectrum_stats, ste_hessian_operator, SlqConfig, SteHessian, SymmetricOperator,
};
use crate::tensor::ParamVector;
use crate::train::reinit_interpolate;

/// Step size, regularization strength and pull target of one prox update.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxParams {
    pub eta: f64,
    pub gamma: f64,
    pub target: Vec<f64>,
}

impl ProxParams {
    pub fn new(eta: f64, gamma: f64, target: Vec<f64>) -> Result<Self> {
        check_eta(eta)?;
        if !(gamma >= 0.0) {
            return Err(WinqError::Argument(format!("regularization strength {gamma} must be ≥ 0")));
        }
        Ok(Self { eta, gamma, target })
    }

    /// Equivalent interpolation weight `ηγ/(1+ηγ)`.
    pub fn alpha(&self) -> f64 {
        alpha_of(self.eta, self.gamma)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(WinqError::Argument(format!("learning rate eta {eta} must be positive and finite")));
    }
    Ok(())
}

fn alpha_of(eta: f64, gamma: f64) -> f64 {
    if gamma.is_infinite() {
        return 1.0;
    }
    let t = eta * gamma;
    t / (1.0 + t)
}

/// `argmin_W γ/2‖W−q‖² + ‖W−V‖²/(2η) = V/(1+ηγ) + ηγ/(1+ηγ)·q`.
pub fn prox_step(v: &[f64], p: &ProxParams) -> Result<Vec<f64>> {
    check_eta(p.eta)?;
    if v.len() != p.target.len() {
        return Err(WinqError::Shape { context: "prox target".into(), expected: vec![v.len()], actual: vec![p.target.len()] });
    }
    if p.gamma.is_infinite() {
        return Ok(p.target.clone());
    }
    let t = p.eta * p.gamma;
    let keep = 1.0 / (1.0 + t);
    let pull = t / (1.0 + t);
    Ok(v.iter().zip(&p.target).map(|(&x, &q)| keep * x + pull * q).collect())
}

/// `α = ηγ/(1+ηγ)`.
pub fn alpha_gamma_map(eta: f64, gamma: f64) -> Result<f64> {
    check_eta(eta)?;
    if !(gamma >= 0.0) {
        return Err(WinqError::Argument(format!("regularization strength {gamma} must be ≥ 0")));
    }
    Ok(alpha_of(eta, gamma))
}

/// Inverse of [`alpha_gamma_map`]: `γ = α / (η(1−α))`. `α = 1` maps to an
/// infinite strength (a hard projection onto the grid).
pub fn gamma_from_alpha(eta: f64, alpha: f64) -> Result<f64> {
    check_eta(eta)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(WinqError::Argument(format!("interpolation alpha {alpha} outside [0, 1]")));
    }
    if alpha == 1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(alpha / (eta * (1.0 - alpha)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxReport {
    pub eta: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// `‖prox − interpolation‖∞`.
    pub max_deviation: f64,
    /// Quantized coordinates checked for staying in their cell.
    pub checked: usize,
    /// Coordinates whose quantized value changes after interpolation (grids
    /// held at `W`).
    pub cell_exits: Vec<usize>,
}

/// Compare the prox update toward `Q(W)` with `γ = γ(α)` against the
/// re-initialization interpolation, and list coordinates that would leave
/// their quantization cell.
pub fn verify_prox_equivalence(params: &ParamVector, quant: &QuantConfig, eta: f64, alpha: f64) -> Result<ProxReport> {
    let gamma = gamma_from_alpha(eta, alpha)?;
    let frozen = quant.clone().with_frozen(quant.current_grids(params)?);
    let target = reinit_interpolate(params, 1.0, &frozen)?;
    let prox = prox_step(params.as_slice(), &ProxParams::new(eta, gamma, target.as_slice().to_vec())?)?;
    let mixed = reinit_interpolate(params, alpha, &frozen)?;
    let max_deviation = prox.iter().zip(mixed.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let mut cell_exits = Vec::new();
    let mut checked = 0;
    if let Some(spec) = quant.weights {
        let grids = frozen.current_grids(params)?;
        for e in params.layout().entries().iter().filter(|e| e.quantized) {
            let cols = *e.shape.last().unwrap_or(&1);
            let mut before = params.slice(&e.name).expect("layout entry").to_vec();
            let mut after = mixed.slice(&e.name).expect("layout entry").to_vec();
            if quant.hadamard {
                fwht_rows(&mut before, cols);
                fwht_rows(&mut after, cols);
            }
            let qb = quantize_grouped(&before, &grids[&e.name], &spec);
            let qa = quantize_grouped(&after, &grids[&e.name], &spec);
            for (i, (x, y)) in qb.iter().zip(&qa).enumerate() {
                if x != y {
                    cell_exits.push(e.offset + i);
                }
            }
            checked += before.len();
        }
    }
    Ok(ProxReport { eta, alpha, gamma, max_deviation, checked, cell_exits })
}

/// Hessian of `Φ(W) = L_Q(W) + γ/2‖W − q‖²` over the coordinates of an STE
/// Hessian operator. The regularizer's contribution is obtained by pushing
/// a tangent through its gradient, not by adding `γv` directly.
pub struct RegularizedHessian<'a> {
    base: SteHessian<'a>,
    gamma: f64,
    target: Vec<f64>,
}

impl<'a> RegularizedHessian<'a> {
    /// `target` holds `q` on the operator's coordinates.
    pub fn new(base: SteHessian<'a>, gamma: f64, target: Vec<f64>) -> Result<Self> {
        if target.len() != base.dim() {
            return Err(WinqError::Shape { context: "regularizer target".into(), expected: vec![base.dim()], actual: vec![target.len()] });
        }
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(WinqError::Argument(format!("regularization strength {gamma} must be finite and ≥ 0")));
        }
        Ok(Self { base, gamma, target })
    }
}

fn regularizer_grad<S: Scalar>(w: &[S], target: &[f64], gamma: f64) -> Vec<S> {
    let g = S::from_f64(gamma);
    w.iter().zip(target).map(|(&x, &q)| g * (x - S::from_f64(q))).collect()
}

impl SymmetricOperator for RegularizedHessian<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.base.apply(v)?;
        let params = self.base.params().as_slice();
        let w: Vec<Dual<f64>> = self.base.coords().iter().zip(v).map(|(&i, &t)| Dual::new(params[i], t)).collect();
        for (o, r) in out.iter_mut().zip(regularizer_grad(&w, &self.target, self.gamma)) {
            *o += r.eps;
        }
        Ok(out)
    }

    fn describe(&self) -> String {
        format!("{} + l2(gamma={})", self.base.describe(), self.gamma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub gamma: f64,
    pub dim: usize,
    /// `max |∇²Φ − ∇²L_Q − γI|` entrywise.
    pub max_entry_error: f64,
    /// `max |λ_i(∇²Φ) − λ_i(∇²L_Q) − γ|` after sorting.
    pub max_eigenvalue_error: f64,
}

/// Build both dense Hessians (the model must fit the dense oracle) and
/// measure how far the regularized one is from a pure `γ` shift.
pub fn verify_hessian_shift(
    graph: &Graph,
    params: &ParamVector,
    batch: &Batch,
    quant: &QuantConfig,
    gamma: f64,
    mask: Option<&[bool]>,
) -> Result<ShiftReport> {
    let frozen = quant.clone().with_frozen(quant.current_grids(params)?);
    let q = reinit_interpolate(params, 1.0, &frozen)?;
    let plain = ste_hessian_operator(graph, params, batch, &frozen, mask)?;
    let target: Vec<f64> = plain.coords().iter().map(|&i| q.as_slice()[i]).collect();
    let h = dense_hessian_oracle(&plain)?;
    let reg = RegularizedHessian::new(ste_hessian_operator(graph, params, batch, &frozen, mask)?, gamma, target)?;
    let hphi = dense_hessian_oracle(&reg)?;
    let mut max_entry_error = 0.0f64;
    for i in 0..h.dim {
        for j in 0..h.dim {
            let shift = if i == j { gamma } else { 0.0 };
            max_entry_error = max_entry_error.max((hphi.get(i, j) - h.get(i, j) - shift).abs());
        }
    }
    let max_eigenvalue_error = h
        .eigenvalues
        .iter()
        .zip(&hphi.eigenvalues)
        .fold(0.0f64, |m, (a, b)| m.max((b - a - gamma).abs()));
    Ok(ShiftReport { gamma, dim: h.dim, max_entry_error, max_eigenvalue_error })
}

/// Which grids quantize the interpolated weights during a sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Grids fitted at the starting point and held fixed.
    #[default]
    Frozen,
    /// Grids refitted at every interpolated point.
    Recompute,
}

/// Default interpolation weights for a sweep.
pub const DEFAULT_SWEEP_ALPHAS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub max_abs_theta: f64,
    pub near_zero_mass: f64,
    /// Quantized loss at the interpolated point under the sweep's grid mode.
    pub loss: f64,
    /// `|L_recomputed − L_frozen| / |L_frozen|` at the interpolated point.
    pub loss_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub slq: SlqConfig,
    pub tau: f64,
    pub mode: GridMode,
}

impl SweepResult {
    /// CSV with header `alpha,max_abs_theta,near_zero_mass,loss`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,max_abs_theta,near_zero_mass,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.alpha, r.max_abs_theta, r.near_zero_mass, r.loss));
        }
        out
    }
}

/// Sorted, de-duplicated copy of `alphas`, each checked to lie in [0, 1].
pub fn normalize_alphas(alphas: &[f64]) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(WinqError::Argument("empty alpha grid".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(WinqError::Argument(format!("interpolation alpha {a} outside [0, 1]")));
    }
    let mut out = alphas.to_vec();
    out.sort_by(|a, b| a.total_cmp(b));
    out.dedup();
    Ok(out)
}

/// For each α, move to `W_α = (1−α)W + αQ(W)` (grids held at `W`), estimate
/// the STE-Hessian spectrum there with the same SLQ seed, and record the
/// curvature statistics and quantized loss.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_curvature_sweep(
    graph: &Graph,
    params: &ParamVector,
    batch: &Batch,
    quant: &QuantConfig,
    alphas: &[f64],
    slq: &SlqConfig,
    tau: f64,
    mode: GridMode,
    mask: Option<&[bool]>,
) -> Result<SweepResult> {
    let alphas = normalize_alphas(alphas)?;
    let frozen = quant.clone().with_frozen(quant.current_grids(params)?);
    let rows = alphas
        .par_iter()
        .map(|&alpha| -> Result<SweepRow> {
            let point = reinit_interpolate(params, alpha, &frozen)?;
            let eval_quant = match mode {
                GridMode::Frozen => &frozen,
                GridMode::Recompute => quant,
            };
            let op = ste_hessian_operator(graph, &point, batch, eval_quant, mask)?;
            let stats = spectrum_stats(&slq_estimate(&op, slq)?, tau)?;
            let frozen_loss = graph.loss(&point, batch, &frozen)?;
            let fresh_loss = graph.loss(&point, batch, quant)?;
            let loss = if mode == GridMode::Frozen { frozen_loss } else { fresh_loss };
            let loss_drift = (fresh_loss - frozen_loss).abs() / frozen_loss.abs().max(f64::MIN_POSITIVE);
            Ok(SweepRow { alpha, max_abs_theta: stats.max_abs, near_zero_mass: stats.near_zero_mass, loss, loss_drift })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows, slq: *slq, tau, mode })
}
