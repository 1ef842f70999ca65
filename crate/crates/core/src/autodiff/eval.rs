//! Forward and reverse passes, generic over the scalar type.
//!
//! Quantization nodes evaluate the grid, rounding and straight-through
//! coefficients on primal values only and then act linearly on whatever
//! tangent the scalar carries: `Q(W) + pass·(W − W̄) + coef·(a − ā)`. Over
//! `f64` the correction terms vanish; over dual numbers this is exactly the
//! straight-through linearization, so a dual reverse pass yields the Hessian
//! of the loss at the quantized point.

use crate::data::Batch;
use crate::error::{Result, WinqError};
use crate::hadamard::fwht_rows;
use crate::quant::{activation_grid, make_grids, quantize_value, ste_coefficients, step_name, QuantConfig, QuantGrid, QuantKind, QuantizerSpec};
use crate::scalar::Scalar;
use crate::tensor::ParamLayout;

use super::graph::{Graph, NodeShape, Op, TokenSource};

const LAYER_NORM_EPS: f64 = 1e-5;

enum Aux<S> {
    None,
    LayerNorm { xhat: Vec<S>, rstd: Vec<S> },
    Attention { probs: Vec<S> },
    CrossEntropy { probs: Vec<S> },
    Quant { pass: Vec<f64>, coef: Vec<f64>, group: usize, step: Option<usize> },
    Act { pass: Vec<f64> },
}

/// Values of every node from one forward pass.
pub(crate) struct Tape<S> {
    values: Vec<Vec<S>>,
    dims: Vec<(usize, usize)>,
    aux: Vec<Aux<S>>,
    param_offsets: Vec<usize>,
}

impl<S: Scalar> Tape<S> {
    pub(crate) fn output(&self, graph: &Graph) -> S {
        self.values[graph.output()][0]
    }
}

#[inline]
fn strip<S: Scalar>(x: S) -> S {
    S::from_f64(x.primal())
}

fn matmul<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, transpose_b: bool) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    if transpose_b {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for p in 0..k {
                    acc += ar[p] * br[p];
                }
                c[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            let cr = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    cr[j] += aip * br[j];
                }
            }
        }
    }
    c
}

fn gelu_cdf<S: Scalar>(x: S) -> S {
    S::from_f64(0.5) * (S::one() + (x * S::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn row_max_primal<S: Scalar>(row: &[S]) -> f64 {
    row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.primal()))
}

fn quant_grids(spec: &QuantizerSpec, qc: &QuantConfig, name: &str, primal: &[f64], shape: [usize; 2], steps: Option<&[f64]>) -> Result<Vec<QuantGrid>> {
    if let Some(steps) = steps {
        return Ok(steps.iter().map(|&a| QuantGrid::with_scale(spec, a)).collect());
    }
    if let Some(g) = qc.frozen.as_ref().and_then(|f| f.get(name)) {
        return Ok(g.clone());
    }
    make_grids(primal, &shape, spec)
}

pub(crate) fn forward<S: Scalar>(graph: &Graph, layout: &ParamLayout, params: &[S], batch: &Batch, qc: &QuantConfig) -> Result<Tape<S>> {
    if params.len() != layout.total_len() {
        return Err(WinqError::Shape {
            context: "parameter vector".into(),
            expected: vec![layout.total_len()],
            actual: vec![params.len()],
        });
    }
    let tokens = batch.tokens();
    if tokens == 0 || batch.targets.len() != tokens {
        return Err(WinqError::Config("batch is empty or inputs/targets differ in length".into()));
    }
    let nodes = graph.nodes();
    let mut values: Vec<Vec<S>> = Vec::with_capacity(nodes.len());
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(nodes.len());
    let mut aux: Vec<Aux<S>> = Vec::with_capacity(nodes.len());
    let mut param_offsets = vec![usize::MAX; nodes.len()];

    for (id, node) in nodes.iter().enumerate() {
        let NodeShape { cols, .. } = node.shape;
        let rows = node.shape.rows_for(tokens);
        let mut extra = Aux::None;
        let value: Vec<S> = match &node.op {
            Op::Param(name) => {
                let e = layout.get(name).ok_or_else(|| WinqError::Config(format!("graph parameter {name} missing from parameter vector")))?;
                if e.len != rows * cols {
                    return Err(WinqError::Shape { context: format!("parameter {name}"), expected: vec![rows, cols], actual: e.shape.clone() });
                }
                param_offsets[id] = e.offset;
                params[e.offset..e.offset + e.len].to_vec()
            }
            Op::Const(t) => t.data().iter().map(|&x| S::from_f64(x)).collect(),
            Op::Embed { table, source } => {
                let (vocab, d) = dims[*table];
                let tab = &values[*table];
                let mut out = Vec::with_capacity(tokens * d);
                for r in 0..tokens {
                    let id = match source {
                        TokenSource::Inputs => batch.inputs[r] as usize,
                        TokenSource::Positions => r % batch.context,
                    };
                    if id >= vocab {
                        return Err(WinqError::Config(format!("token or position {id} outside embedding table of {vocab} rows")));
                    }
                    out.extend_from_slice(&tab[id * d..(id + 1) * d]);
                }
                out
            }
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = dims[*a];
                matmul(&values[*a], m, k, &values[*b], cols, *transpose_b)
            }
            Op::Add(a, b) => values[*a].iter().zip(&values[*b]).map(|(&x, &y)| x + y).collect(),
            Op::Mul(a, b) => values[*a].iter().zip(&values[*b]).map(|(&x, &y)| x * y).collect(),
            Op::AddRow { x, bias } => {
                let b = &values[*bias];
                values[*x].chunks(cols).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect()
            }
            Op::Scale { x, c } => {
                let c = S::from_f64(*c);
                values[*x].iter().map(|&v| v * c).collect()
            }
            Op::Gelu(x) => values[*x].iter().map(|&v| v * gelu_cdf(v)).collect(),
            Op::Softmax(x) => {
                let mut out = Vec::with_capacity(rows * cols);
                for row in values[*x].chunks(cols) {
                    let m = S::from_f64(row_max_primal(row));
                    let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
                    let z: S = e.iter().copied().sum();
                    out.extend(e.into_iter().map(|v| v / z));
                }
                out
            }
            Op::LayerNorm { x, gain, bias } => {
                let (g, b) = (&values[*gain], &values[*bias]);
                let n = S::from_f64(cols as f64);
                let mut out = Vec::with_capacity(rows * cols);
                let mut xhat = Vec::with_capacity(rows * cols);
                let mut rstd = Vec::with_capacity(rows);
                for row in values[*x].chunks(cols) {
                    let mean = row.iter().copied().sum::<S>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
                    let r = S::one() / (var + S::from_f64(LAYER_NORM_EPS)).sqrt();
                    for (j, &v) in row.iter().enumerate() {
                        let h = (v - mean) * r;
                        xhat.push(h);
                        out.push(h * g[j] + b[j]);
                    }
                    rstd.push(r);
                }
                extra = Aux::LayerNorm { xhat, rstd };
                out
            }
            Op::CausalAttention { q, k, v, heads } => {
                let t = batch.context;
                let (out, probs) = attention_forward(&values[*q], &values[*k], &values[*v], tokens / t, t, cols, *heads);
                extra = Aux::Attention { probs };
                out
            }
            Op::CrossEntropy(logits) => {
                let (n, vocab) = dims[*logits];
                let mut probs = Vec::with_capacity(n * vocab);
                let mut total = S::zero();
                for (r, row) in values[*logits].chunks(vocab).enumerate() {
                    let target = batch.targets[r] as usize;
                    if target >= vocab {
                        return Err(WinqError::Config(format!("target token {target} outside vocabulary of {vocab}")));
                    }
                    let m = S::from_f64(row_max_primal(row));
                    let e: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
                    let z: S = e.iter().copied().sum();
                    total += z.ln() + m - row[target];
                    probs.extend(e.into_iter().map(|v| v / z));
                }
                extra = Aux::CrossEntropy { probs };
                vec![total / S::from_f64(n as f64)]
            }
            Op::Sum(x) => vec![values[*x].iter().copied().sum()],
            Op::Rotate(x) => {
                let mut out = values[*x].clone();
                if qc.hadamard {
                    if !cols.is_power_of_two() {
                        return Err(WinqError::Config(format!("Hadamard rotation needs a power-of-two width, got {cols}")));
                    }
                    fwht_rows(&mut out, cols);
                }
                out
            }
            Op::QuantWeight { w, param } => match qc.weights {
                None => values[*w].clone(),
                Some(spec) => {
                    let src = &values[*w];
                    let primal: Vec<f64> = src.iter().map(|x| x.primal()).collect();
                    let step = if spec.is_learnable() {
                        let sname = step_name(param);
                        let e = layout.get(&sname).ok_or_else(|| {
                            WinqError::Config(format!("learnable quantizer needs parameter {sname}; attach steps first"))
                        })?;
                        Some((e.offset, e.len))
                    } else {
                        None
                    };
                    let step_primal: Option<Vec<f64>> = step.map(|(o, l)| params[o..o + l].iter().map(|x| x.primal()).collect());
                    let grids = quant_grids(&spec, qc, param, &primal, [rows, cols], step_primal.as_deref())?;
                    if primal.len() % grids.len() != 0 {
                        return Err(WinqError::Config(format!("{} grids do not divide weight {param}", grids.len())));
                    }
                    let group = primal.len() / grids.len();
                    let mut pass = Vec::with_capacity(primal.len());
                    let mut coef = Vec::with_capacity(primal.len());
                    let mut out = Vec::with_capacity(primal.len());
                    for (i, (&x, &xp)) in src.iter().zip(&primal).enumerate() {
                        let g = &grids[i / group];
                        let q = quantize_value(xp, g, &spec);
                        let (p, c) = ste_coefficients(xp, g, &spec, qc.ste);
                        let mut y = S::from_f64(q) + (x - strip(x)) * S::from_f64(p);
                        if let Some((o, _)) = step {
                            let a = params[o + i / group];
                            y += (a - strip(a)) * S::from_f64(c);
                        }
                        out.push(y);
                        pass.push(p);
                        coef.push(c);
                    }
                    extra = Aux::Quant { pass, coef, group, step: step.map(|(o, _)| o) };
                    out
                }
            },
            Op::QuantAct(x) => {
                let src = &values[*x];
                let primal: Vec<f64> = src.iter().map(|v| v.primal()).collect();
                match activation_grid(&primal, qc.activation_bits)? {
                    None => src.clone(),
                    Some(grid) => {
                        let spec = crate::quant::QuantizerSpec::new(QuantKind::SymmetricMinmax, qc.activation_bits)?;
                        let mut pass = Vec::with_capacity(primal.len());
                        let out = src
                            .iter()
                            .zip(&primal)
                            .map(|(&v, &vp)| {
                                let (p, _) = ste_coefficients(vp, &grid, &spec, qc.ste);
                                pass.push(p);
                                S::from_f64(quantize_value(vp, &grid, &spec)) + (v - strip(v)) * S::from_f64(p)
                            })
                            .collect();
                        extra = Aux::Act { pass };
                        out
                    }
                }
            }
        };
        debug_assert_eq!(value.len(), rows * cols, "node {id} ({})", node.op.name());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(WinqError::NonFinite { node: id, op: node.op.name() });
        }
        values.push(value);
        dims.push((rows, cols));
        aux.push(extra);
    }
    Ok(Tape { values, dims, aux, param_offsets })
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<S: Scalar>(q: &[S], k: &[S], v: &[S], seqs: usize, t: usize, d: usize, heads: usize) -> (Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![S::zero(); seqs * t * d];
    let mut probs = vec![S::zero(); seqs * heads * t * t];
    let mut scores = vec![S::zero(); t];
    for b in 0..seqs {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let qi = &q[(b * t + i) * d + col..(b * t + i) * d + col + dh];
                for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                    let kj = &k[(b * t + j) * d + col..(b * t + j) * d + col + dh];
                    let mut acc = S::zero();
                    for c in 0..dh {
                        acc += qi[c] * kj[c];
                    }
                    *s = acc * scale;
                }
                let m = S::from_f64(row_max_primal(&scores[..=i]));
                let mut z = S::zero();
                for s in scores[..=i].iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let prow = &mut probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                for j in 0..=i {
                    prow[j] = scores[j] / z;
                }
                let orow = &mut out[(b * t + i) * d + col..(b * t + i) * d + col + dh];
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &v[(b * t + j) * d + col..(b * t + j) * d + col + dh];
                    for c in 0..dh {
                        orow[c] += p * vj[c];
                    }
                }
            }
        }
    }
    (out, probs)
}

fn grad_buf<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, len: usize) -> &mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); len])
}

/// Reverse pass; returns the gradient of the output with respect to the
/// flat parameter array.
pub(crate) fn backward<S: Scalar>(graph: &Graph, layout: &ParamLayout, tape: &Tape<S>, batch: &Batch, qc: &QuantConfig) -> Vec<S> {
    let nodes = graph.nodes();
    let mut flat = vec![S::zero(); layout.total_len()];
    let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
    grads[graph.output()] = Some(vec![S::one()]);
    let tokens = batch.tokens();

    for id in (0..nodes.len()).rev() {
        let Some(dy) = grads[id].take() else { continue };
        let (rows, cols) = tape.dims[id];
        let len_of = |n: usize| tape.dims[n].0 * tape.dims[n].1;
        match &nodes[id].op {
            Op::Param(_) => {
                let off = tape.param_offsets[id];
                for (g, d) in flat[off..off + dy.len()].iter_mut().zip(&dy) {
                    *g += *d;
                }
            }
            Op::Const(_) => {}
            Op::Embed { table, source } => {
                let (_, d) = tape.dims[*table];
                let n = len_of(*table);
                let gt = grad_buf(&mut grads, *table, n);
                for r in 0..tokens {
                    let tok = match source {
                        TokenSource::Inputs => batch.inputs[r] as usize,
                        TokenSource::Positions => r % batch.context,
                    };
                    for c in 0..d {
                        gt[tok * d + c] += dy[r * d + c];
                    }
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = tape.dims[*a];
                let n = cols;
                let (va, vb) = (&tape.values[*a], &tape.values[*b]);
                // dA = dC·Bᵀ (or dC·B when B is stored transposed).
                let da = matmul(&dy, m, n, vb, k, !*transpose_b);
                let ga = grad_buf(&mut grads, *a, m * k);
                for (g, d) in ga.iter_mut().zip(&da) {
                    *g += *d;
                }
                let gb = grad_buf(&mut grads, *b, k * n);
                for i in 0..m {
                    let dyr = &dy[i * n..(i + 1) * n];
                    let ar = &va[i * k..(i + 1) * k];
                    if *transpose_b {
                        for j in 0..n {
                            let dj = dyr[j];
                            let gr = &mut gb[j * k..(j + 1) * k];
                            for p in 0..k {
                                gr[p] += dj * ar[p];
                            }
                        }
                    } else {
                        for p in 0..k {
                            let ap = ar[p];
                            let gr = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                gr[j] += ap * dyr[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &src in &[*a, *b] {
                    let g = grad_buf(&mut grads, src, dy.len());
                    for (g, d) in g.iter_mut().zip(&dy) {
                        *g += *d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&tape.values[*a], &tape.values[*b]);
                let ga = grad_buf(&mut grads, *a, dy.len());
                for i in 0..dy.len() {
                    ga[i] += dy[i] * vb[i];
                }
                let gb = grad_buf(&mut grads, *b, dy.len());
                for i in 0..dy.len() {
                    gb[i] += dy[i] * va[i];
                }
            }
            Op::AddRow { x, bias } => {
                let gx = grad_buf(&mut grads, *x, dy.len());
                for (g, d) in gx.iter_mut().zip(&dy) {
                    *g += *d;
                }
                let gb = grad_buf(&mut grads, *bias, cols);
                for row in dy.chunks(cols) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += *d;
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = S::from_f64(*c);
                let gx = grad_buf(&mut grads, *x, dy.len());
                for (g, d) in gx.iter_mut().zip(&dy) {
                    *g += *d * c;
                }
            }
            Op::Gelu(x) => {
                let vx = &tape.values[*x];
                let inv_sqrt_2pi = S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let gx = grad_buf(&mut grads, *x, dy.len());
                for i in 0..dy.len() {
                    let v = vx[i];
                    let pdf = (-(v * v) * S::from_f64(0.5)).exp() * inv_sqrt_2pi;
                    gx[i] += dy[i] * (gelu_cdf(v) + v * pdf);
                }
            }
            Op::Softmax(x) => {
                let y = &tape.values[id];
                let gx = grad_buf(&mut grads, *x, dy.len());
                for r in 0..rows {
                    let (yr, dr) = (&y[r * cols..(r + 1) * cols], &dy[r * cols..(r + 1) * cols]);
                    let dot: S = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] += yr[c] * (dr[c] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let Aux::LayerNorm { xhat, rstd } = &tape.aux[id] else { unreachable!() };
                let g = &tape.values[*gain];
                let n = S::from_f64(cols as f64);
                {
                    let gg = grad_buf(&mut grads, *gain, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += dy[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let gb = grad_buf(&mut grads, *bias, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += dy[r * cols + c];
                        }
                    }
                }
                let gx = grad_buf(&mut grads, *x, rows * cols);
                let mut dxhat = vec![S::zero(); cols];
                for r in 0..rows {
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for c in 0..cols {
                        dxhat[c] = dy[r * cols + c] * g[c];
                        s1 += dxhat[c];
                        s2 += dxhat[c] * xhat[r * cols + c];
                    }
                    let scale = rstd[r] / n;
                    for c in 0..cols {
                        gx[r * cols + c] += scale * (n * dxhat[c] - s1 - xhat[r * cols + c] * s2);
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads } => {
                let Aux::Attention { probs } = &tape.aux[id] else { unreachable!() };
                let t = batch.context;
                let (dq, dk, dv) = attention_backward(
                    &dy,
                    &tape.values[*q],
                    &tape.values[*k],
                    &tape.values[*v],
                    probs,
                    tokens / t,
                    t,
                    cols,
                    *heads,
                );
                for (src, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    let g = grad_buf(&mut grads, src, d.len());
                    for (g, d) in g.iter_mut().zip(&d) {
                        *g += *d;
                    }
                }
            }
            Op::CrossEntropy(logits) => {
                let Aux::CrossEntropy { probs } = &tape.aux[id] else { unreachable!() };
                let (n, vocab) = tape.dims[*logits];
                let scale = dy[0] / S::from_f64(n as f64);
                let gl = grad_buf(&mut grads, *logits, n * vocab);
                for r in 0..n {
                    let target = batch.targets[r] as usize;
                    for c in 0..vocab {
                        let mut p = probs[r * vocab + c];
                        if c == target {
                            p -= S::one();
                        }
                        gl[r * vocab + c] += scale * p;
                    }
                }
            }
            Op::Sum(x) => {
                let n = len_of(*x);
                let gx = grad_buf(&mut grads, *x, n);
                for g in gx.iter_mut() {
                    *g += dy[0];
                }
            }
            Op::Rotate(x) => {
                let mut d = dy.clone();
                if qc.hadamard {
                    fwht_rows(&mut d, cols);
                }
                let gx = grad_buf(&mut grads, *x, d.len());
                for (g, d) in gx.iter_mut().zip(&d) {
                    *g += *d;
                }
            }
            Op::QuantWeight { w, .. } => match &tape.aux[id] {
                Aux::Quant { pass, coef, group, step } => {
                    let gw = grad_buf(&mut grads, *w, dy.len());
                    for i in 0..dy.len() {
                        gw[i] += dy[i] * S::from_f64(pass[i]);
                    }
                    if let Some(off) = step {
                        for i in 0..dy.len() {
                            flat[off + i / group] += dy[i] * S::from_f64(coef[i]);
                        }
                    }
                }
                _ => {
                    let gw = grad_buf(&mut grads, *w, dy.len());
                    for (g, d) in gw.iter_mut().zip(&dy) {
                        *g += *d;
                    }
                }
            },
            Op::QuantAct(x) => {
                let gx = grad_buf(&mut grads, *x, dy.len());
                match &tape.aux[id] {
                    Aux::Act { pass } => {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * S::from_f64(pass[i]);
                        }
                    }
                    _ => {
                        for (g, d) in gx.iter_mut().zip(&dy) {
                            *g += *d;
                        }
                    }
                }
            }
        }
    }
    flat
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<S: Scalar>(
    dout: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    seqs: usize,
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); t];
    for b in 0..seqs {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..t {
                let row = (b * t + i) * d + col;
                let prow = &probs[((b * heads + h) * t + i) * t..((b * heads + h) * t + i + 1) * t];
                let doi = &dout[row..row + dh];
                let mut dot = S::zero();
                for j in 0..=i {
                    let vrow = (b * t + j) * d + col;
                    let mut acc = S::zero();
                    for c in 0..dh {
                        acc += doi[c] * v[vrow + c];
                        dv[vrow + c] += prow[j] * doi[c];
                    }
                    dp[j] = acc;
                    dot += prow[j] * acc;
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let krow = (b * t + j) * d + col;
                    for c in 0..dh {
                        dq[row + c] += ds * k[krow + c];
                        dk[krow + c] += ds * q[row + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
