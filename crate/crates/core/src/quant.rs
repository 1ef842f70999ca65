//! Uniform weight/activation quantizers and their straight-through gradients.
//!
//! `Q(W) = a·round(clip((W − b)/a, v_neg, v_pos)) + b`, with the scale `a`
//! and bias `b` either derived from the tensor (min-max), owned by the
//! optimizer (learnable step), or fixed by the 1-bit / ternary stand-ins.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WinqError};
use crate::tensor::{ParamEntry, ParamVector};

/// Smallest admissible scale; degenerate (all-zero) tensors fall back to it.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantKind {
    SymmetricMinmax,
    AsymmetricMinmax,
    LearnableStep,
    /// `sign(W)·mean|W|`.
    Binary,
    /// Levels `{−a, 0, a}` with `a = max|W|`.
    Ternary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    /// One grid per output channel (row of a `[out, in]` matrix).
    PerChannel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingMode {
    #[default]
    HalfEven,
    /// Only used for fault injection in the verification harness.
    HalfAway,
}

/// How the straight-through estimator treats coordinates outside the clip range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteMode {
    #[default]
    ClipMasked,
    PassThrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantKind,
    pub bits: u32,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub rounding: RoundingMode,
}

impl QuantizerSpec {
    pub fn new(kind: QuantKind, bits: u32) -> Result<Self> {
        let spec = Self { kind, bits, granularity: Granularity::PerTensor, rounding: RoundingMode::HalfEven };
        spec.validate()?;
        Ok(spec)
    }

    pub fn binary() -> Self {
        Self { kind: QuantKind::Binary, bits: 1, granularity: Granularity::PerTensor, rounding: RoundingMode::HalfEven }
    }

    /// Ternary ("1.58-bit"); stored with `bits = 2` since three levels need two bits.
    pub fn ternary() -> Self {
        Self { kind: QuantKind::Ternary, bits: 2, granularity: Granularity::PerTensor, rounding: RoundingMode::HalfEven }
    }

    /// Default quantizer for a weight bit-width: binary at 1 bit, learnable
    /// step for 2–8 bits, `None` (full precision) at 16 bits and above.
    pub fn for_bits(bits: u32) -> Result<Option<Self>> {
        match bits {
            1 => Ok(Some(Self::binary())),
            2..=8 => Self::new(QuantKind::LearnableStep, bits).map(Some),
            b if b >= 16 => Ok(None),
            b => Err(WinqError::Config(format!("unsupported weight bit-width {b}"))),
        }
    }

    pub fn with_granularity(mut self, g: Granularity) -> Self {
        self.granularity = g;
        self
    }

    pub fn with_rounding(mut self, r: RoundingMode) -> Self {
        self.rounding = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            QuantKind::SymmetricMinmax | QuantKind::AsymmetricMinmax | QuantKind::LearnableStep => {
                if !(2..=16).contains(&self.bits) {
                    return Err(WinqError::Config(format!("{:?} needs 2..=16 bits, got {}", self.kind, self.bits)));
                }
            }
            QuantKind::Binary if self.bits != 1 => {
                return Err(WinqError::Config("binary quantizer requires bits = 1".into()));
            }
            QuantKind::Ternary if self.bits != 2 => {
                return Err(WinqError::Config("ternary quantizer is stored with bits = 2".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// Integer clip bounds `(v_neg, v_pos)`.
    pub fn clip_bounds(&self) -> (i64, i64) {
        match self.kind {
            QuantKind::SymmetricMinmax | QuantKind::LearnableStep => {
                let h = 1i64 << (self.bits - 1);
                (-h, h - 1)
            }
            QuantKind::AsymmetricMinmax => (0, (1i64 << self.bits) - 1),
            QuantKind::Binary | QuantKind::Ternary => (-1, 1),
        }
    }

    pub fn max_levels(&self) -> usize {
        match self.kind {
            QuantKind::Binary => 2,
            QuantKind::Ternary => 3,
            _ => 1usize << self.bits,
        }
    }

    pub fn is_learnable(&self) -> bool {
        self.kind == QuantKind::LearnableStep
    }
}

/// A realized grid: scale, bias, and integer clip bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub a: f64,
    pub b: f64,
    pub v_neg: i64,
    pub v_pos: i64,
    pub learnable: bool,
    pub degenerate: bool,
}

impl QuantGrid {
    /// Grid with an externally owned scale (a learnable step).
    pub fn with_scale(spec: &QuantizerSpec, a: f64) -> Self {
        let (v_neg, v_pos) = spec.clip_bounds();
        let degenerate = !(a >= SCALE_FLOOR);
        Self { a: if degenerate { SCALE_FLOOR } else { a }, b: 0.0, v_neg, v_pos, learnable: true, degenerate }
    }

    pub fn lo(&self) -> f64 {
        self.a * self.v_neg as f64 + self.b
    }

    pub fn hi(&self) -> f64 {
        self.a * self.v_pos as f64 + self.b
    }
}

pub fn round_with<F: Float>(x: F, mode: RoundingMode) -> F {
    let r = x.round();
    match mode {
        RoundingMode::HalfAway => r,
        RoundingMode::HalfEven => {
            let half = F::from(0.5).unwrap();
            if (r - x).abs() == half {
                let two = F::from(2.0).unwrap();
                two * (x / two).round()
            } else {
                r
            }
        }
    }
}

fn f64_of<F: Float>(x: F) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// Build the grid for one group of values.
pub fn make_grid<F: Float>(w: &[F], spec: &QuantizerSpec) -> Result<QuantGrid> {
    if w.is_empty() {
        return Err(WinqError::Argument("cannot build a quantization grid for an empty tensor".into()));
    }
    spec.validate()?;
    let (v_neg, v_pos) = spec.clip_bounds();
    let max_abs = w.iter().fold(0.0f64, |m, &x| m.max(f64_of(x).abs()));
    let (a, b) = match spec.kind {
        QuantKind::SymmetricMinmax | QuantKind::LearnableStep => (max_abs / ((1i64 << (spec.bits - 1)) - 1) as f64, 0.0),
        QuantKind::AsymmetricMinmax => {
            let lo = w.iter().fold(f64::INFINITY, |m, &x| m.min(f64_of(x)));
            let hi = w.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(f64_of(x)));
            ((hi - lo) / ((1i64 << spec.bits) - 1) as f64, lo)
        }
        QuantKind::Binary => (w.iter().map(|&x| f64_of(x).abs()).sum::<f64>() / w.len() as f64, 0.0),
        QuantKind::Ternary => (max_abs, 0.0),
    };
    let degenerate = !(a >= SCALE_FLOOR);
    Ok(QuantGrid {
        a: if degenerate { SCALE_FLOOR } else { a },
        b,
        v_neg,
        v_pos,
        learnable: spec.is_learnable(),
        degenerate,
    })
}

/// Length of one quantization group for a tensor of this shape.
pub fn group_len(shape: &[usize], granularity: Granularity) -> usize {
    let n: usize = shape.iter().product();
    match granularity {
        Granularity::PerTensor => n,
        Granularity::PerChannel if shape.len() >= 2 => *shape.last().unwrap(),
        Granularity::PerChannel => n,
    }
}

/// One grid per group, in group order.
pub fn make_grids<F: Float>(w: &[F], shape: &[usize], spec: &QuantizerSpec) -> Result<Vec<QuantGrid>> {
    let g = group_len(shape, spec.granularity);
    w.chunks(g).map(|c| make_grid(c, spec)).collect()
}

#[inline]
pub fn quantize_value<F: Float>(x: F, grid: &QuantGrid, spec: &QuantizerSpec) -> F {
    let a = F::from(grid.a).unwrap();
    let b = F::from(grid.b).unwrap();
    match spec.kind {
        QuantKind::Binary => {
            if x - b >= F::zero() {
                a + b
            } else {
                b - a
            }
        }
        _ => {
            let lo = F::from(grid.v_neg).unwrap();
            let hi = F::from(grid.v_pos).unwrap();
            let z = ((x - b) / a).max(lo).min(hi);
            a * round_with(z, spec.rounding) + b
        }
    }
}

/// Quantize a single group with one grid.
pub fn quantize<F: Float>(w: &[F], grid: &QuantGrid, spec: &QuantizerSpec) -> Vec<F> {
    w.iter().map(|&x| quantize_value(x, grid, spec)).collect()
}

/// Quantize a tensor group-by-group.
pub fn quantize_grouped<F: Float>(w: &[F], grids: &[QuantGrid], spec: &QuantizerSpec) -> Vec<F> {
    let g = w.len() / grids.len().max(1);
    w.chunks(g).zip(grids).flat_map(|(c, grid)| quantize(c, grid, spec)).collect()
}

/// Per-element straight-through coefficients `(∂Q/∂W, ∂Q/∂a)`.
///
/// Inside the clip range `∂Q/∂W = 1`; outside it is 0 under
/// [`SteMode::ClipMasked`]. For learnable grids the step gradient is
/// `round(clip(z)) − z·1[in range]`.
#[inline]
pub fn ste_coefficients(x: f64, grid: &QuantGrid, spec: &QuantizerSpec, mode: SteMode) -> (f64, f64) {
    let z = (x - grid.b) / grid.a;
    let in_range = z >= grid.v_neg as f64 && z <= grid.v_pos as f64;
    let pass = if in_range || mode == SteMode::PassThrough { 1.0 } else { 0.0 };
    let step = if grid.learnable {
        let zc = z.max(grid.v_neg as f64).min(grid.v_pos as f64);
        let r = round_with(zc, spec.rounding);
        if in_range { r - z } else { r }
    } else {
        0.0
    };
    (pass, step)
}

/// Gradients produced by [`ste_backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct SteGrad<F> {
    pub weight: Vec<F>,
    /// `∂L/∂a` per group, present only for learnable grids.
    pub step: Option<Vec<F>>,
}

/// Map `∂L/∂Q(W)` onto the latent weights (and learnable steps).
pub fn ste_backward<F: Float>(
    upstream: &[F],
    w: &[F],
    grids: &[QuantGrid],
    spec: &QuantizerSpec,
    mode: SteMode,
) -> Result<SteGrad<F>> {
    if upstream.len() != w.len() || grids.is_empty() || w.len() % grids.len() != 0 {
        return Err(WinqError::Shape {
            context: "ste_backward".into(),
            expected: vec![w.len()],
            actual: vec![upstream.len()],
        });
    }
    let g = w.len() / grids.len();
    let mut weight = Vec::with_capacity(w.len());
    let mut step = vec![F::zero(); grids.len()];
    for (gi, grid) in grids.iter().enumerate() {
        for i in gi * g..(gi + 1) * g {
            let (pass, s) = ste_coefficients(f64_of(w[i]), grid, spec, mode);
            weight.push(upstream[i] * F::from(pass).unwrap());
            step[gi] = step[gi] + upstream[i] * F::from(s).unwrap();
        }
    }
    let learnable = grids.iter().any(|g| g.learnable);
    Ok(SteGrad { weight, step: learnable.then_some(step) })
}

/// Activation bit-widths accepted by [`quantize_activations`].
pub const ACTIVATION_BITS: [u32; 3] = [4, 8, 16];

pub fn check_activation_bits(bits: u32) -> Result<()> {
    if ACTIVATION_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(WinqError::Config(format!("unsupported activation bit-width {bits} (expected 4, 8 or 16)")))
    }
}

/// Per-tensor symmetric grid for activations; `None` means identity
/// (16 bits, or a zero-range tensor).
pub fn activation_grid<F: Float>(x: &[F], bits: u32) -> Result<Option<QuantGrid>> {
    check_activation_bits(bits)?;
    if bits >= 16 || x.is_empty() {
        return Ok(None);
    }
    let lo = x.iter().fold(f64::INFINITY, |m, &v| m.min(f64_of(v)));
    let hi = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64_of(v)));
    if hi - lo == 0.0 {
        return Ok(None);
    }
    let spec = QuantizerSpec::new(QuantKind::SymmetricMinmax, bits)?;
    make_grid(x, &spec).map(Some)
}

/// Symmetric per-tensor activation quantization; 16 bits is the identity.
pub fn quantize_activations<F: Float>(x: &[F], bits: u32) -> Result<Vec<F>> {
    match activation_grid(x, bits)? {
        None => Ok(x.to_vec()),
        Some(grid) => {
            let spec = QuantizerSpec::new(QuantKind::SymmetricMinmax, bits)?;
            Ok(quantize(x, &grid, &spec))
        }
    }
}

/// Name of the learnable step tensor attached to a weight.
pub fn step_name(weight: &str) -> String {
    format!("{weight}.step")
}

/// Grids for one weight tensor of `params`, reading learnable steps from the
/// vector when present and falling back to the initialization formula.
pub fn tensor_grids(params: &ParamVector, entry: &ParamEntry, values: &[f64], spec: &QuantizerSpec) -> Result<Vec<QuantGrid>> {
    if spec.is_learnable() {
        if let Some(steps) = params.slice(&step_name(&entry.name)) {
            return Ok(steps.iter().map(|&a| QuantGrid::with_scale(spec, a)).collect());
        }
    }
    make_grids(values, &entry.shape, spec)
}

/// Attach learnable step tensors to every quantized weight, initialized with
/// the symmetric min-max scale. Existing steps are kept.
pub fn attach_learnable_steps(params: &ParamVector, spec: &QuantizerSpec) -> Result<ParamVector> {
    if !spec.is_learnable() {
        return Ok(params.clone());
    }
    let mut out = params.clone();
    for e in params.layout().entries().iter().filter(|e| e.quantized) {
        let name = step_name(&e.name);
        if out.layout().index_of(&name).is_some() {
            continue;
        }
        let w = params.slice(&e.name).expect("layout entry");
        let steps: Vec<f64> = make_grids(w, &e.shape, spec)?.iter().map(|g| g.a).collect();
        out = out.extended(&name, vec![steps.len()], crate::tensor::ParamKind::Step, &steps)?;
    }
    Ok(out)
}

/// `‖Q(W) − W‖₂ / ‖W‖₂` over the concatenation of all quantized tensors
/// (0 when `‖W‖ = 0` or nothing is quantized).
pub fn relative_quant_error(params: &ParamVector, spec: &QuantizerSpec) -> Result<f64> {
    let mut err = 0.0;
    let mut norm = 0.0;
    for e in params.layout().entries().iter().filter(|e| e.quantized) {
        let w = params.slice(&e.name).expect("layout entry");
        let grids = tensor_grids(params, e, w, spec)?;
        let q = quantize_grouped(w, &grids, spec);
        err += q.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        norm += w.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(if norm == 0.0 { 0.0 } else { (err / norm).sqrt() })
}

/// Evaluation-time quantization settings for a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantConfig {
    /// `None` keeps weights in full precision.
    pub weights: Option<QuantizerSpec>,
    /// 16 keeps activations in full precision.
    pub activation_bits: u32,
    /// Rotate both operands of every quantized matmul by `H`.
    pub hadamard: bool,
    pub ste: SteMode,
    /// Grids held fixed per weight name (non-learnable quantizers only).
    pub frozen: Option<Arc<BTreeMap<String, Vec<QuantGrid>>>>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::full_precision()
    }
}

impl QuantConfig {
    pub fn full_precision() -> Self {
        Self { weights: None, activation_bits: 16, hadamard: false, ste: SteMode::ClipMasked, frozen: None }
    }

    pub fn weights(spec: QuantizerSpec) -> Self {
        Self { weights: Some(spec), ..Self::full_precision() }
    }

    /// Quantizer for a bit-width per [`QuantizerSpec::for_bits`].
    pub fn for_bits(weight_bits: u32, activation_bits: u32) -> Result<Self> {
        check_activation_bits(activation_bits)?;
        Ok(Self { weights: QuantizerSpec::for_bits(weight_bits)?, activation_bits, ..Self::full_precision() })
    }

    pub fn with_hadamard(mut self, on: bool) -> Self {
        self.hadamard = on;
        self
    }

    pub fn with_frozen(mut self, grids: BTreeMap<String, Vec<QuantGrid>>) -> Self {
        self.frozen = Some(Arc::new(grids));
        self
    }

    /// True when evaluation is plain full precision.
    pub fn is_identity(&self) -> bool {
        self.weights.is_none() && self.activation_bits >= 16
    }

    /// Grids currently in force for every quantized weight of `params`
    /// (computed on the rotated weights when Hadamard is on).
    pub fn current_grids(&self, params: &ParamVector) -> Result<BTreeMap<String, Vec<QuantGrid>>> {
        let mut out = BTreeMap::new();
        let Some(spec) = self.weights else { return Ok(out) };
        for e in params.layout().entries().iter().filter(|e| e.quantized) {
            let mut w = params.slice(&e.name).expect("layout entry").to_vec();
            if self.hadamard {
                crate::hadamard::fwht_rows(&mut w, *e.shape.last().unwrap_or(&1));
            }
            let grids = match self.frozen.as_ref().and_then(|f| f.get(&e.name)) {
                Some(g) if !spec.is_learnable() => g.clone(),
                _ => tensor_grids(params, e, &w, &spec)?,
            };
            out.insert(e.name.clone(), grids);
        }
        Ok(out)
    }
}
