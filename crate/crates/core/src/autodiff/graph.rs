use crate::error::{Result, WinqError};
use crate::tensor::{ParamLayout, Tensor};

pub type NodeId = usize;

/// Row dimension of a node: fixed, or one row per token of the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rows {
    Fixed(usize),
    Tokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub rows: Rows,
    pub cols: usize,
}

impl NodeShape {
    pub fn fixed(rows: usize, cols: usize) -> Self {
        Self { rows: Rows::Fixed(rows), cols }
    }

    pub fn tokens(cols: usize) -> Self {
        Self { rows: Rows::Tokens, cols }
    }

    pub fn rows_for(&self, tokens: usize) -> usize {
        match self.rows {
            Rows::Fixed(r) => r,
            Rows::Tokens => tokens,
        }
    }

    fn is_scalar(&self) -> bool {
        self.rows == Rows::Fixed(1) && self.cols == 1
    }
}

/// Which token ids an embedding lookup reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Inputs,
    /// Position within the sequence, `row mod context`.
    Positions,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Param(String),
    Const(Tensor<f64>),
    Embed { table: NodeId, source: TokenSource },
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `x + bias` with a `[1, cols]` bias broadcast over rows.
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Multi-head causal self-attention over `[tokens, d]` projections.
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize },
    /// Mean next-token cross-entropy against the batch targets.
    CrossEntropy(NodeId),
    Sum(NodeId),
    /// Row-wise Hadamard rotation, active only when the evaluation enables it.
    Rotate(NodeId),
    /// Weight quantization of the named parameter's (possibly rotated) value.
    QuantWeight { w: NodeId, param: String },
    QuantAct(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Embed { .. } => "embed",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Rotate(_) => "rotate",
            Op::QuantWeight { .. } => "quant_weight",
            Op::QuantAct(_) => "quant_act",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Param(_) | Op::Const(_) => vec![],
            Op::Embed { table, .. } => vec![table],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddRow { x, bias } => vec![x, bias],
            Op::Scale { x, .. } | Op::Gelu(x) | Op::Softmax(x) | Op::CrossEntropy(x) | Op::Sum(x) => vec![x],
            Op::Rotate(x) | Op::QuantAct(x) => vec![x],
            Op::QuantWeight { w, .. } => vec![w],
            Op::LayerNorm { x, gain, bias } => vec![x, gain, bias],
            Op::CausalAttention { q, k, v, .. } => vec![q, k, v],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub shape: NodeShape,
}

/// Static computation graph with a single scalar output. Nodes only refer
/// to earlier nodes, so the node order is a topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    output: NodeId,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    /// Names of all parameters the graph reads.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}

/// Shape of a parameter tensor as a matrix: leading axes fold into rows.
pub fn param_shape(shape: &[usize]) -> NodeShape {
    match shape {
        [] => NodeShape::fixed(1, 1),
        [n] => NodeShape::fixed(1, *n),
        _ => {
            let cols = *shape.last().unwrap();
            NodeShape::fixed(shape.iter().product::<usize>() / cols, cols)
        }
    }
}

/// Incremental graph construction with shape checking against a layout.
pub struct GraphBuilder<'a> {
    layout: &'a ParamLayout,
    nodes: Vec<Node>,
}

impl<'a> GraphBuilder<'a> {
    pub fn new(layout: &'a ParamLayout) -> Self {
        Self { layout, nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: NodeShape) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> Result<NodeShape> {
        self.nodes
            .get(id)
            .map(|n| n.shape)
            .ok_or_else(|| WinqError::Config(format!("node {id} does not exist")))
    }

    fn mismatch(context: &str, a: NodeShape, b: NodeShape) -> WinqError {
        let dims = |s: NodeShape| match s.rows {
            Rows::Fixed(r) => vec![r, s.cols],
            Rows::Tokens => vec![usize::MAX, s.cols],
        };
        WinqError::Shape { context: context.into(), expected: dims(a), actual: dims(b) }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let e = self
            .layout
            .get(name)
            .ok_or_else(|| WinqError::Config(format!("unknown parameter {name}")))?;
        let shape = param_shape(&e.shape);
        Ok(self.push(Op::Param(name.to_string()), shape))
    }

    pub fn constant(&mut self, t: Tensor<f64>) -> NodeId {
        let shape = param_shape(t.shape());
        self.push(Op::Const(t), shape)
    }

    pub fn embed(&mut self, table: NodeId, source: TokenSource) -> Result<NodeId> {
        let s = self.shape(table)?;
        Ok(self.push(Op::Embed { table, source }, NodeShape::tokens(s.cols)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        let Rows::Fixed(b_rows) = sb.rows else {
            return Err(WinqError::Config("matmul right operand must have fixed rows".into()));
        };
        let (k, n) = if transpose_b { (sb.cols, b_rows) } else { (b_rows, sb.cols) };
        if sa.cols != k {
            return Err(Self::mismatch("matmul", sa, sb));
        }
        Ok(self.push(Op::MatMul { a, b, transpose_b }, NodeShape { rows: sa.rows, cols: n }))
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Self::mismatch(op.name(), sa, sb));
        }
        Ok(self.push(op, sa))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x)?, self.shape(bias)?);
        if sb.rows != Rows::Fixed(1) || sb.cols != sx.cols {
            return Err(Self::mismatch("add_row", sx, sb));
        }
        Ok(self.push(Op::AddRow { x, bias }, sx))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let s = self.shape(x)?;
        Ok(self.push(Op::Scale { x, c }, s))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?;
        Ok(self.push(Op::Gelu(x), s))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?;
        Ok(self.push(Op::Softmax(x), s))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x)?;
        for p in [gain, bias] {
            let sp = self.shape(p)?;
            if sp != NodeShape::fixed(1, sx.cols) {
                return Err(Self::mismatch("layer_norm", sx, sp));
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, sx))
    }

    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let sq = self.shape(q)?;
        for o in [k, v] {
            let so = self.shape(o)?;
            if so != sq {
                return Err(Self::mismatch("causal_attention", sq, so));
            }
        }
        if sq.rows != Rows::Tokens || heads == 0 || sq.cols % heads != 0 {
            return Err(WinqError::Config(format!(
                "attention needs token rows and width {} divisible by {heads} heads",
                sq.cols
            )));
        }
        Ok(self.push(Op::CausalAttention { q, k, v, heads }, sq))
    }

    pub fn cross_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let s = self.shape(logits)?;
        if s.rows != Rows::Tokens {
            return Err(WinqError::Config("cross-entropy logits must have one row per token".into()));
        }
        Ok(self.push(Op::CrossEntropy(logits), NodeShape::fixed(1, 1)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.shape(x)?;
        Ok(self.push(Op::Sum(x), NodeShape::fixed(1, 1)))
    }

    pub fn rotate(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?;
        Ok(self.push(Op::Rotate(x), s))
    }

    pub fn quant_act(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x)?;
        Ok(self.push(Op::QuantAct(x), s))
    }

    pub fn quant_weight(&mut self, w: NodeId, param: &str) -> Result<NodeId> {
        let s = self.shape(w)?;
        Ok(self.push(Op::QuantWeight { w, param: param.to_string() }, s))
    }

    /// `y = x Wᵀ (+ b)` for a weight stored `[out, in]`. Quantized weights get
    /// the rotation and quantization stages on both operands.
    pub fn linear(&mut self, x: NodeId, weight: &str, bias: Option<&str>) -> Result<NodeId> {
        let quantized = self
            .layout
            .get(weight)
            .ok_or_else(|| WinqError::Config(format!("unknown parameter {weight}")))?
            .quantized;
        let w = self.param(weight)?;
        let y = if quantized {
            let xr = self.rotate(x)?;
            let xq = self.quant_act(xr)?;
            let wr = self.rotate(w)?;
            let wq = self.quant_weight(wr, weight)?;
            self.matmul(xq, wq, true)?
        } else {
            self.matmul(x, w, true)?
        };
        match bias {
            Some(b) => {
                let b = self.param(b)?;
                self.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn finish(self, output: NodeId) -> Result<Graph> {
        let s = self.shape(output)?;
        if !s.is_scalar() {
            return Err(WinqError::Config("graph output must be a scalar".into()));
        }
        Ok(Graph { nodes: self.nodes, output })
    }
}
