//! Dense tensors and the flat parameter vector.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WinqError};
use crate::scalar::Scalar;

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(WinqError::Argument(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(WinqError::Shape {
                context: "Tensor::new".into(),
                expected: vec![n],
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![S::zero(); n] }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn scalar(x: S) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interpret as a matrix: the last axis is the column axis, everything
    /// before it is folded into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

/// Role a parameter plays in the model; decides quantization, noise and decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Matmul weight stored `[out, in]`; subject to weight quantization.
    Weight,
    Embedding,
    Bias,
    NormGain,
    NormBias,
    /// Learnable quantizer step size.
    Step,
    /// Output head and other full-precision matrices.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub kind: ParamKind,
    pub quantized: bool,
}

/// Ordered name → slice map over one flat array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor slot; returns its index.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, kind: ParamKind) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(WinqError::Config(format!("duplicate parameter name {name}")));
        }
        let len: usize = shape.iter().product();
        if len == 0 {
            return Err(WinqError::Config(format!("parameter {name} is empty")));
        }
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            offset: self.total,
            len,
            kind,
            quantized: kind == ParamKind::Weight,
        });
        self.index.insert(name.to_string(), idx);
        self.total += len;
        Ok(idx)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
    }

    /// Per-coordinate mask of quantized coordinates.
    pub fn quantized_mask(&self) -> Vec<bool> {
        self.coordinate_mask(|e| e.quantized)
    }

    pub fn coordinate_mask(&self, pred: impl Fn(&ParamEntry) -> bool) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for e in &self.entries {
            if pred(e) {
                mask[e.offset..e.offset + e.len].fill(true);
            }
        }
        mask
    }
}

/// All trainable values as one flat `f64` array plus the layout mapping it
/// back to named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: ParamLayout,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if layout.total_len() != data.len() {
            return Err(WinqError::Shape {
                context: "ParamVector::new".into(),
                expected: vec![layout.total_len()],
                actual: vec![data.len()],
            });
        }
        Ok(Self { layout, data })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let data = vec![0.0; layout.total_len()];
        Self { layout, data }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), data)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.data[e.offset..e.offset + e.len])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.layout.get(name)?.clone();
        Some(&mut self.data[e.offset..e.offset + e.len])
    }

    /// Split into per-name tensors.
    pub fn unflatten(&self) -> Vec<(String, Tensor<f64>)> {
        self.layout
            .entries()
            .iter()
            .map(|e| {
                let t = Tensor { shape: e.shape.clone(), data: self.data[e.offset..e.offset + e.len].to_vec() };
                (e.name.clone(), t)
            })
            .collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten); tensors must match the layout order.
    pub fn flatten(layout: ParamLayout, tensors: &[(String, Tensor<f64>)]) -> Result<Self> {
        if tensors.len() != layout.entries().len() {
            return Err(WinqError::Argument("tensor count does not match layout".into()));
        }
        let mut data = Vec::with_capacity(layout.total_len());
        for (e, (name, t)) in layout.entries().iter().zip(tensors) {
            if &e.name != name || e.shape != t.shape {
                return Err(WinqError::Shape {
                    context: format!("flatten {name}"),
                    expected: e.shape.clone(),
                    actual: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Self::new(layout, data)
    }

    /// Append a new parameter tensor, returning the extended vector.
    pub fn extended(&self, name: &str, shape: Vec<usize>, kind: ParamKind, values: &[f64]) -> Result<Self> {
        let mut layout = self.layout.clone();
        layout.push(name, shape, kind)?;
        let mut data = self.data.clone();
        data.extend_from_slice(values);
        Self::new(layout, data)
    }
}
