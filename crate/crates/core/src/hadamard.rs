//! Normalized fast Walsh–Hadamard transform and the rotated re-initialization
//! `W ← Hᵀ((1−α)HW + αQ(HW))`.
//!
//! `H` is block diagonal; each block is the Sylvester Hadamard matrix scaled
//! by `1/√d`, which makes it symmetric and orthogonal (an involution).

use crate::autodiff::Graph;
use crate::data::Batch;
use crate::error::{Result, WinqError};
use crate::quant::{make_grids, quantize_grouped, step_name, QuantConfig, QuantGrid, QuantizerSpec};
use crate::scalar::Scalar;
use crate::tensor::ParamVector;

/// In-place normalized transform of one power-of-two block.
pub fn fwht_block<S: Scalar>(x: &mut [S]) {
    let n = x.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let a = x[i];
                let b = x[i + h];
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
    if n > 1 {
        let s = S::from_f64(1.0 / (n as f64).sqrt());
        for v in x.iter_mut() {
            *v *= s;
        }
    }
}

/// Apply the transform to every contiguous row of length `cols`.
pub fn fwht_rows<S: Scalar>(data: &mut [S], cols: usize) {
    for row in data.chunks_mut(cols) {
        fwht_block(row);
    }
}

/// Block structure of the rotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HadamardContext {
    blocks: Vec<usize>,
}

impl HadamardContext {
    pub fn new(blocks: Vec<usize>) -> Result<Self> {
        if let Some(&d) = blocks.iter().find(|&&d| d == 0 || !d.is_power_of_two()) {
            return Err(WinqError::Config(format!("Hadamard block dimension {d} is not a power of two")));
        }
        Ok(Self { blocks })
    }

    /// One block per row of every quantized `[out, in]` weight, in layout order.
    pub fn for_quantized_weights(params: &ParamVector) -> Result<Self> {
        let mut blocks = Vec::new();
        for e in params.layout().entries().iter().filter(|e| e.quantized) {
            let cols = *e.shape.last().unwrap_or(&1);
            blocks.extend(std::iter::repeat_n(cols, e.len / cols));
        }
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// `H x`; since `H` is symmetric this is also `Hᵀ x`.
    pub fn fwht<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        if x.len() != self.dim() {
            return Err(WinqError::Argument(format!(
                "vector of length {} does not match Hadamard dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut out = x.to_vec();
        let mut off = 0;
        for &d in &self.blocks {
            fwht_block(&mut out[off..off + d]);
            off += d;
        }
        Ok(out)
    }
}

/// Flat-vector convenience wrapper around [`HadamardContext::fwht`].
pub fn fwht<S: Scalar>(x: &[S], ctx: &HadamardContext) -> Result<Vec<S>> {
    ctx.fwht(x)
}

/// Grids for a rotated weight: learnable steps are read from `params`,
/// otherwise they are fit to the rotated values.
fn rotated_grids(params: &ParamVector, name: &str, shape: &[usize], rotated: &[f64], spec: &QuantizerSpec) -> Result<Vec<QuantGrid>> {
    if spec.is_learnable() {
        if let Some(steps) = params.slice(&step_name(name)) {
            return Ok(steps.iter().map(|&a| QuantGrid::with_scale(spec, a)).collect());
        }
    }
    make_grids(rotated, shape, spec)
}

/// `W ← Hᵀ((1−α)HW + αQ(HW))` on every quantized tensor, each row rotated by
/// its own block. Other tensors are untouched.
pub fn hadamard_reinit(params: &ParamVector, alpha: f64, spec: &QuantizerSpec) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(WinqError::Argument(format!("interpolation alpha {alpha} outside [0, 1]")));
    }
    let mut out = params.clone();
    for e in params.layout().entries().iter().filter(|e| e.quantized) {
        let cols = *e.shape.last().unwrap_or(&1);
        if !cols.is_power_of_two() {
            return Err(WinqError::Config(format!(
                "weight {} has input dimension {cols}, not a power of two",
                e.name
            )));
        }
        let mut hw = params.slice(&e.name).expect("layout entry").to_vec();
        fwht_rows(&mut hw, cols);
        let grids = rotated_grids(params, &e.name, &e.shape, &hw, spec)?;
        let q = quantize_grouped(&hw, &grids, spec);
        let mut mixed: Vec<f64> = hw.iter().zip(&q).map(|(&w, &qw)| (1.0 - alpha) * w + alpha * qw).collect();
        fwht_rows(&mut mixed, cols);
        out.slice_mut(&e.name).expect("layout entry").copy_from_slice(&mixed);
    }
    Ok(out)
}

/// Loss with every quantized matmul evaluated as `Q(HW)·Q(Hx)`. Since `H`
/// is orthogonal this equals the plain loss when nothing is quantized.
pub fn hadamard_quantized_forward(graph: &Graph, params: &ParamVector, batch: &Batch, quant: &QuantConfig) -> Result<f64> {
    graph.loss(params, batch, &quant.clone().with_hadamard(true))
}
