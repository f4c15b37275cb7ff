//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Parameters enter
//! through [`Graph::param`], which caches one leaf per name, so several
//! streams reading the same [`ParamTree`] share a single leaf and their
//! gradients add up on it.
//!
//! Forward rules are written once, generically over [`Real`], and run on
//! `f64` or, in [`Precision::Extended`], on double-double values whose low
//! words ride alongside each node.

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::dd::{sum, Dd, Real};
use super::params::ParamTree;
use super::tensor::{mm, mm_nt, mm_tn, transpose, Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Backward rule for a user-defined unary op: `(input, output, upstream) -> d_input`.
pub type CustomBackward = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    Param,
    Detach,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    SubScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    MeanRows(NodeId),
    SumAll(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    ScatterRows { x: NodeId, idx: Vec<usize> },
    PickFlat { x: NodeId, idx: Vec<usize> },
    L2NormalizeRows { x: NodeId, norms: Vec<f64> },
    Ln(NodeId),
    Exp(NodeId),
    Square(NodeId),
    ClampMin { x: NodeId, floor: f64 },
    MinAll { x: NodeId, argmin: usize },
    Custom { x: NodeId, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    /// Double-double low words; present only in extended precision.
    lo: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Output of a forward rule: high words and, in extended mode, low words.
type Parts = (Vec<f64>, Option<Vec<f64>>);

/// Expands one generic forward body into its `f64` and double-double closures.
macro_rules! both {
    (|$x:ident| $body:expr) => {
        (|$x: &[&[f64]]| $body, |$x: &[&[Dd]]| $body)
    };
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    precision: Precision,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    /// `(hi, lo)` of a scalar node; `lo` is 0 outside extended precision.
    pub fn scalar_parts(&self, id: NodeId) -> Result<(f64, f64)> {
        let hi = self.value(id).item()?;
        let lo = self.nodes[id.0].lo.as_ref().map_or(0.0, |l| l[0]);
        Ok((hi, lo))
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn extended(&self) -> bool {
        self.precision == Precision::Extended
    }

    fn push(&mut self, shape: Vec<usize>, (mut hi, lo): Parts, op: Op, needs_grad: bool) -> NodeId {
        self.precision.round_all(&mut hi);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, hi),
            lo,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dd_values(&self, id: NodeId) -> Vec<Dd> {
        let node = &self.nodes[id.0];
        let hi = node.value.data();
        match &node.lo {
            Some(lo) => hi.iter().zip(lo).map(|(&h, &l)| Dd { hi: h, lo: l }).collect(),
            None => hi.iter().map(|&h| Dd::c(h)).collect(),
        }
    }

    /// Runs a forward rule on the inputs' values in the graph's precision.
    fn compute<F, G>(&self, ids: &[NodeId], (f, g): (F, G)) -> Parts
    where
        F: FnOnce(&[&[f64]]) -> Vec<f64>,
        G: FnOnce(&[&[Dd]]) -> Vec<Dd>,
    {
        if self.extended() {
            let owned: Vec<Vec<Dd>> = ids.iter().map(|&i| self.dd_values(i)).collect();
            let xs: Vec<&[Dd]> = owned.iter().map(Vec::as_slice).collect();
            let out = g(&xs);
            let hi = out.iter().map(|d| d.hi).collect();
            let lo = out.iter().map(|d| d.lo).collect();
            (hi, Some(lo))
        } else {
            let xs: Vec<&[f64]> = ids.iter().map(|&i| self.value(i).data()).collect();
            (f(&xs), None)
        }
    }

    /// Applies a pure data movement to the high words and, if present, the low words.
    fn relayout(&self, ids: &[NodeId], f: impl Fn(&[&[f64]]) -> Vec<f64>) -> Parts {
        let hi: Vec<&[f64]> = ids.iter().map(|&i| self.value(i).data()).collect();
        let out = f(&hi);
        let lo = self.extended().then(|| {
            let zeros: Vec<Vec<f64>>;
            let lo: Vec<&[f64]> = if ids.iter().all(|i| self.nodes[i.0].lo.is_some()) {
                ids.iter().map(|i| self.nodes[i.0].lo.as_deref().unwrap()).collect()
            } else {
                zeros = ids
                    .iter()
                    .map(|&i| match &self.nodes[i.0].lo {
                        Some(l) => l.clone(),
                        None => vec![0.0; self.value(i).numel()],
                    })
                    .collect();
                zeros.iter().map(Vec::as_slice).collect()
            };
            f(&lo)
        });
        (out, lo)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn rc(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    fn leaf(&mut self, t: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let lo = self.extended().then(|| vec![0.0; t.numel()]);
        let shape = t.shape().to_vec();
        self.push(shape, (t.into_data(), lo), op, needs_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, Op::Leaf, false)
    }

    /// Trainable leaf bound to `name` in `tree`. Repeated calls return the same node.
    pub fn param(&mut self, tree: &ParamTree, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = tree
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let id = self.leaf(p.tensor.clone(), Op::Param, true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Same value, no gradient path back to `x`.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let parts = self.relayout(&[x], |v| v[0].to_vec());
        let shape = self.shape(x).to_vec();
        self.push(shape, parts, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 || self.shape(b).len() > 2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.compute(&[a, b], both!(|x| mm(x[0], x[1], m, k, n)));
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let out = self.compute(&[a, b], both!(|x| mm_nt(x[0], x[1], m, k, n)));
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rc(a);
        let out = self.relayout(&[a], |x| transpose(x[0], m, n));
        let ng = self.ng(&[a]);
        self.push(vec![n, m], out, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, out: Parts, op: Op) -> NodeId {
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        self.push(shape, out, op, ng)
    }

    fn unary(&mut self, a: NodeId, out: Parts, op: Op) -> NodeId {
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out = self.compute(&[a, b], both!(|x| zip(x[0], x[1], |p, q| p + q)));
        Ok(self.binary(a, b, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.compute(&[a, b], both!(|x| zip(x[0], x[1], |p, q| p - q)));
        Ok(self.binary(a, b, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.compute(&[a, b], both!(|x| zip(x[0], x[1], |p, q| p * q)));
        Ok(self.binary(a, b, out, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<()> {
        if self.value(row).numel() != self.value(a).cols() {
            return Err(Error::dim(
                op,
                format!("{:?} with row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        Ok(())
    }

    /// Adds a row vector to every row (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row("add_row", a, row)?;
        let out = self.compute(&[a, row], both!(|x| broadcast_row(x[0], x[1], |p, q| p + q)));
        Ok(self.binary(a, row, out, Op::AddRow(a, row)))
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check_row("mul_row", a, row)?;
        let out = self.compute(&[a, row], both!(|x| broadcast_row(x[0], x[1], |p, q| p * q)));
        Ok(self.binary(a, row, out, Op::MulRow(a, row)))
    }

    fn check_scalar(&self, op: &'static str, s: NodeId) -> Result<f64> {
        let v = self.value(s);
        if v.numel() != 1 {
            return Err(Error::dim(op, format!("expected scalar, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    /// `a - s` for a scalar node `s`.
    pub fn sub_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.check_scalar("sub_scalar", s)?;
        let out = self.compute(&[a, s], both!(|x| x[0].iter().map(|&v| v - x[1][0]).collect()));
        Ok(self.binary(a, s, out, Op::SubScalar(a, s)))
    }

    /// `a / s` for a scalar node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.check_scalar("div_scalar", s)? == 0.0 {
            return Err(Error::Numeric("division by zero in div_scalar".into()));
        }
        let out = self.compute(&[a, s], both!(|x| x[0].iter().map(|&v| v / x[1][0]).collect()));
        Ok(self.binary(a, s, out, Op::DivScalar(a, s)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.compute(&[a], both!(|x| scale(x[0], c)));
        self.unary(a, out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.compute(&[a], both!(|x| add_const(x[0], c)));
        self.unary(a, out, Op::AddConst(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.compute(&[a], both!(|x| x[0].iter().map(|&v| gelu(v)).collect()));
        self.unary(a, out, Op::Gelu(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::Numeric(format!("ln of non-positive value {x}")));
        }
        let out = self.compute(&[a], both!(|x| x[0].iter().map(|&v| v.ln()).collect()));
        Ok(self.unary(a, out, Op::Ln(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.compute(&[a], both!(|x| x[0].iter().map(|&v| v.exp()).collect()));
        self.unary(a, out, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.compute(&[a], both!(|x| x[0].iter().map(|&v| v * v).collect()));
        self.unary(a, out, Op::Square(a))
    }

    /// `max(a, floor)` elementwise; the gradient passes where `a > floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let out = self.compute(&[a], both!(|x| clamp_min(x[0], floor)));
        self.unary(a, out, Op::ClampMin { x: a, floor })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let c = self.value(a).cols();
        let out = self.compute(&[a], both!(|x| softmax(x[0], c)));
        self.unary(a, out, Op::Softmax(a))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let c = self.value(a).cols();
        let out = self.compute(&[a], both!(|x| log_softmax(x[0], c)));
        if out.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite logits in log_softmax".into()));
        }
        Ok(self.unary(a, out, Op::LogSoftmax(a)))
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let c = self.value(a).cols();
        let (inv_std, _) = standardize(self.value(a).data(), c, eps);
        let out = self.compute(&[a], both!(|x| standardize(x[0], c, eps).1));
        self.unary(a, out, Op::LayerNorm { x: a, inv_std })
    }

    /// Mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.rc(a);
        let out = self.compute(&[a], both!(|x| mean_rows(x[0], m, n)));
        let ng = self.ng(&[a]);
        self.push(vec![1, n], out, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let out = self.compute(&[a], both!(|x| vec![sum(x[0].iter().copied())]));
        let ng = self.ng(&[a]);
        self.push(vec![1], out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column mismatch {:?} vs {:?}", self.shape(first), v.shape()),
                ));
            }
            rows += v.rows();
        }
        let out = self.relayout(parts, |xs| xs.concat());
        let ng = self.ng(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let r = self.value(first).rows();
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(Error::dim(
                "concat_cols",
                format!("row mismatch {:?} vs {:?}", self.shape(first), self.shape(bad)),
            ));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let out = self.relayout(parts, |xs| {
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for (x, &w) in xs.iter().zip(&widths) {
                    data.extend_from_slice(&x[i * w..(i + 1) * w]);
                }
            }
            data
        });
        let ng = self.ng(parts);
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.rc(a);
        if start >= end || end > n {
            return Err(Error::dim(
                "slice_cols",
                format!("range {start}..{end} of {:?}", self.shape(a)),
            ));
        }
        let out = self.relayout(&[a], |x| {
            x[0].chunks(n).flat_map(|row| &row[start..end]).copied().collect()
        });
        let ng = self.ng(&[a]);
        Ok(self.push(vec![m, end - start], out, Op::SliceCols { x: a, start }, ng))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.rc(a);
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::dim(
                "gather_rows",
                format!("index {bad} out of range for {:?}", self.shape(a)),
            ));
        }
        let out = self.relayout(&[a], |x| {
            idx.iter().flat_map(|&i| &x[0][i * n..(i + 1) * n]).copied().collect()
        });
        let ng = self.ng(&[a]);
        let op = Op::GatherRows {
            x: a,
            idx: idx.to_vec(),
        };
        Ok(self.push(vec![idx.len(), n], out, op, ng))
    }

    /// Places row `k` of `a` at row `idx[k]` of a zero `[total x n]` matrix.
    pub fn scatter_rows(&mut self, a: NodeId, idx: &[usize], total: usize) -> Result<NodeId> {
        let (m, n) = self.rc(a);
        if idx.len() != m {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} indices for {:?}", idx.len(), self.shape(a)),
            ));
        }
        let mut seen = vec![false; total];
        for &i in idx {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(Error::dim(
                    "scatter_rows",
                    format!("index {i} out of range or repeated (total {total})"),
                ));
            }
        }
        let out = self.relayout(&[a], |x| {
            let mut data = vec![0.0; total * n];
            for (k, &i) in idx.iter().enumerate() {
                data[i * n..(i + 1) * n].copy_from_slice(&x[0][k * n..(k + 1) * n]);
            }
            data
        });
        let ng = self.ng(&[a]);
        let op = Op::ScatterRows {
            x: a,
            idx: idx.to_vec(),
        };
        Ok(self.push(vec![total, n], out, op, ng))
    }

    /// Gathers individual elements by flat index into a vector.
    pub fn pick_flat(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let n = self.value(a).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim(
                "pick_flat",
                format!("bad indices for {:?}", self.shape(a)),
            ));
        }
        let out = self.relayout(&[a], |x| idx.iter().map(|&i| x[0][i]).collect());
        let ng = self.ng(&[a]);
        let op = Op::PickFlat {
            x: a,
            idx: idx.to_vec(),
        };
        Ok(self.push(vec![idx.len()], out, op, ng))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let c = self.value(a).cols();
        let norms = row_norms(self.value(a).data(), c);
        if let Some((r, nrm)) = norms
            .iter()
            .enumerate()
            .find(|(_, n)| **n == 0.0 || !n.is_finite())
        {
            return Err(Error::DegenerateEmbedding(format!("row {r} has norm {nrm}")));
        }
        let out = self.compute(&[a], both!(|x| l2_normalize(x[0], c)));
        Ok(self.unary(a, out, Op::L2NormalizeRows { x: a, norms }))
    }

    /// Global minimum as a scalar; the gradient flows to the first argmin.
    pub fn min_all(&mut self, a: NodeId) -> NodeId {
        let argmin = if self.extended() {
            argmin(&self.dd_values(a))
        } else {
            argmin(self.value(a).data())
        };
        let out = self.relayout(&[a], |x| vec![x[0][argmin]]);
        let ng = self.ng(&[a]);
        self.push(vec![1], out, Op::MinAll { x: a, argmin }, ng)
    }

    /// Elementwise op with a caller-supplied forward and backward rule.
    ///
    /// The forward rule sees only `f64` values, so in extended precision the
    /// output's low words are zero.
    pub fn custom_unary(
        &mut self,
        a: NodeId,
        forward: impl Fn(f64) -> f64,
        backward: CustomBackward,
    ) -> NodeId {
        let hi: Vec<f64> = self.value(a).data().iter().map(|&x| forward(x)).collect();
        let lo = self.extended().then(|| vec![0.0; hi.len()]);
        self.unary(a, (hi, lo), Op::Custom { x: a, backward })
    }

    /// Reverse sweep from a scalar root. Returns one gradient per node that
    /// needs one (indexed by node position).
    fn backward(&self, root: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let y = node.value.data();
            let acc = |id: NodeId, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(&g) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf | Op::Detach => {}
                Op::Param => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.rc(*a);
                    let n = self.rc(*b).1;
                    if self.nodes[a.0].needs_grad {
                        acc(*a, mm_nt(&dy, self.value(*b).data(), m, n, k), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, mm_tn(self.value(*a).data(), &dy, m, k, n), &mut grads);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = self.rc(*a);
                    let n = self.rc(*b).0;
                    if self.nodes[a.0].needs_grad {
                        acc(*a, mm(&dy, self.value(*b).data(), m, n, k), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, mm_tn(&dy, self.value(*a).data(), m, n, k), &mut grads);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.rc(*a);
                    acc(*a, transpose(&dy, n, m), &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, dy.clone(), &mut grads);
                    acc(*b, dy, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*b, dy.iter().map(|g| -g).collect(), &mut grads);
                    acc(*a, dy, &mut grads);
                }
                Op::Mul(a, b) => {
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    acc(*a, dy.iter().zip(vb).map(|(g, x)| g * x).collect(), &mut grads);
                    acc(*b, dy.iter().zip(va).map(|(g, x)| g * x).collect(), &mut grads);
                }
                Op::AddRow(a, row) => {
                    let c = self.value(*a).cols();
                    let mut gr = vec![0.0; c];
                    for chunk in dy.chunks(c) {
                        for (o, g) in gr.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                    acc(*row, gr, &mut grads);
                    acc(*a, dy, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let c = self.value(*a).cols();
                    let va = self.value(*a).data();
                    let vr = self.value(*row).data();
                    let mut gr = vec![0.0; c];
                    let mut ga = Vec::with_capacity(dy.len());
                    for (chunk, xs) in dy.chunks(c).zip(va.chunks(c)) {
                        for j in 0..c {
                            gr[j] += chunk[j] * xs[j];
                            ga.push(chunk[j] * vr[j]);
                        }
                    }
                    acc(*row, gr, &mut grads);
                    acc(*a, ga, &mut grads);
                }
                Op::SubScalar(a, s) => {
                    let total: f64 = dy.iter().sum();
                    acc(*s, vec![-total], &mut grads);
                    acc(*a, dy, &mut grads);
                }
                Op::DivScalar(a, s) => {
                    let sv = self.value(*s).data()[0];
                    let va = self.value(*a).data();
                    let gs: f64 = -dy.iter().zip(va).map(|(g, x)| g * x).sum::<f64>() / (sv * sv);
                    acc(*s, vec![gs], &mut grads);
                    acc(*a, dy.iter().map(|g| g / sv).collect(), &mut grads);
                }
                Op::Scale(a, c) => acc(*a, dy.iter().map(|g| g * c).collect(), &mut grads),
                Op::AddConst(a) => acc(*a, dy, &mut grads),
                Op::Gelu(a) => {
                    let va = self.value(*a).data();
                    let g = dy
                        .iter()
                        .zip(va)
                        .map(|(g, &x)| {
                            let inner = GELU_C * (x + GELU_K * x * x * x);
                            let t = inner.tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            g * d
                        })
                        .collect();
                    acc(*a, g, &mut grads);
                }
                Op::Softmax(a) => {
                    let c = node.value.cols();
                    let mut g = Vec::with_capacity(dy.len());
                    for (gy, yy) in dy.chunks(c).zip(y.chunks(c)) {
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        g.extend(gy.iter().zip(yy).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    acc(*a, g, &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let c = node.value.cols();
                    let mut g = Vec::with_capacity(dy.len());
                    for (gy, yy) in dy.chunks(c).zip(y.chunks(c)) {
                        let total: f64 = gy.iter().sum();
                        g.extend(gy.iter().zip(yy).map(|(gi, yi)| gi - yi.exp() * total));
                    }
                    acc(*a, g, &mut grads);
                }
                Op::LayerNorm { x, inv_std } => {
                    let c = node.value.cols();
                    let nf = c as f64;
                    let mut g = Vec::with_capacity(dy.len());
                    for ((gy, xh), inv) in dy.chunks(c).zip(y.chunks(c)).zip(inv_std) {
                        let sg: f64 = gy.iter().sum();
                        let sgx: f64 = gy.iter().zip(xh).map(|(a, b)| a * b).sum();
                        g.extend(
                            gy.iter()
                                .zip(xh)
                                .map(|(gi, xi)| inv / nf * (nf * gi - sg - xi * sgx)),
                        );
                    }
                    acc(*x, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.rc(*a);
                    let mut g = Vec::with_capacity(m * n);
                    for _ in 0..m {
                        g.extend(dy.iter().map(|v| v / m as f64));
                    }
                    acc(*a, g, &mut grads);
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).numel();
                    acc(*a, vec![dy[0]; n], &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        acc(*p, dy[off..off + n].to_vec(), &mut grads);
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.rc(*p);
                        let mut g = Vec::with_capacity(r * c);
                        for i in 0..r {
                            g.extend_from_slice(&dy[i * total + off..i * total + off + c]);
                        }
                        acc(*p, g, &mut grads);
                        off += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.rc(*x);
                    let w = node.value.cols();
                    let mut g = vec![0.0; m * n];
                    for i in 0..m {
                        g[i * n + start..i * n + start + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                    }
                    acc(*x, g, &mut grads);
                }
                Op::GatherRows { x, idx } => {
                    let (m, n) = self.rc(*x);
                    let mut g = vec![0.0; m * n];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..n {
                            g[r * n + j] += dy[k * n + j];
                        }
                    }
                    acc(*x, g, &mut grads);
                }
                Op::ScatterRows { x, idx } => {
                    let n = node.value.cols();
                    let mut g = Vec::with_capacity(idx.len() * n);
                    for &r in idx {
                        g.extend_from_slice(&dy[r * n..(r + 1) * n]);
                    }
                    acc(*x, g, &mut grads);
                }
                Op::PickFlat { x, idx } => {
                    let mut g = vec![0.0; self.value(*x).numel()];
                    for (k, &i) in idx.iter().enumerate() {
                        g[i] += dy[k];
                    }
                    acc(*x, g, &mut grads);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let c = node.value.cols();
                    let mut g = Vec::with_capacity(dy.len());
                    for ((gy, yy), nrm) in dy.chunks(c).zip(y.chunks(c)).zip(norms) {
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        g.extend(gy.iter().zip(yy).map(|(gi, yi)| (gi - yi * dot) / nrm));
                    }
                    acc(*x, g, &mut grads);
                }
                Op::Ln(a) => {
                    let va = self.value(*a).data();
                    acc(*a, dy.iter().zip(va).map(|(g, x)| g / x).collect(), &mut grads);
                }
                Op::Exp(a) => {
                    acc(*a, dy.iter().zip(y).map(|(g, e)| g * e).collect(), &mut grads);
                }
                Op::Square(a) => {
                    let va = self.value(*a).data();
                    acc(*a, dy.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect(), &mut grads);
                }
                Op::ClampMin { x, floor } => {
                    let va = self.value(*x).data();
                    let g = dy
                        .iter()
                        .zip(va)
                        .map(|(&g, &v)| if v > *floor { g } else { 0.0 })
                        .collect();
                    acc(*x, g, &mut grads);
                }
                Op::MinAll { x, argmin } => {
                    let mut g = vec![0.0; self.value(*x).numel()];
                    g[*argmin] = dy[0];
                    acc(*x, g, &mut grads);
                }
                Op::Custom { x, backward } => {
                    let g = backward(self.value(*x).data(), y, &dy);
                    acc(*x, g, &mut grads);
                }
            }
        }
        Ok(grads)
    }

    /// Reverse-mode gradients of a scalar `root` with respect to every
    /// parameter leaf. Gradients are added into `params` (caller zeroes) and
    /// also returned by name.
    pub fn forward_backward(
        &self,
        root: NodeId,
        params: &mut ParamTree,
    ) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = match grads.get(id.0).and_then(|g| g.as_ref()) {
                Some(g) => g.clone(),
                None => vec![0.0; self.value(id).numel()],
            };
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("parameter {name} missing from tree")))?;
            for (acc, v) in p.grad.data_mut().iter_mut().zip(&g) {
                *acc += v;
            }
            out.insert(
                name.clone(),
                Tensor::from_parts(self.value(id).shape().to_vec(), g),
            );
        }
        Ok(out)
    }
}

// Generic forward kernels.

fn zip<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn broadcast_row<R: Real>(a: &[R], row: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.chunks(row.len())
        .flat_map(|chunk| chunk.iter().zip(row).map(|(&x, &y)| f(x, y)))
        .collect()
}

fn scale<R: Real>(a: &[R], c: f64) -> Vec<R> {
    let c = R::c(c);
    a.iter().map(|&x| x * c).collect()
}

fn add_const<R: Real>(a: &[R], c: f64) -> Vec<R> {
    let c = R::c(c);
    a.iter().map(|&x| x + c).collect()
}

fn clamp_min<R: Real>(a: &[R], floor: f64) -> Vec<R> {
    let floor = R::c(floor);
    a.iter().map(|&x| x.max(floor)).collect()
}

fn gelu<R: Real>(x: R) -> R {
    let inner = R::c(GELU_C) * (x + R::c(GELU_K) * x * x * x);
    R::c(0.5) * x * (R::c(1.0) + inner.tanh())
}

fn row_max<R: Real>(row: &[R]) -> R {
    row.iter().copied().fold(row[0], R::max)
}

fn softmax<R: Real>(a: &[R], c: usize) -> Vec<R> {
    let mut data = Vec::with_capacity(a.len());
    for row in a.chunks(c) {
        let mx = row_max(row);
        let e: Vec<R> = row.iter().map(|&x| (x - mx).exp()).collect();
        let inv = R::c(1.0) / sum(e.iter().copied());
        data.extend(e.into_iter().map(|v| v * inv));
    }
    data
}

fn log_softmax<R: Real>(a: &[R], c: usize) -> Vec<R> {
    let mut data = Vec::with_capacity(a.len());
    for row in a.chunks(c) {
        let mx = row_max(row);
        let lse = mx + sum(row.iter().map(|&x| (x - mx).exp())).ln();
        data.extend(row.iter().map(|&x| x - lse));
    }
    data
}

/// Per-row `1/sqrt(var + eps)` and the standardized rows.
fn standardize<R: Real>(a: &[R], c: usize, eps: f64) -> (Vec<f64>, Vec<R>) {
    let nf = R::c(c as f64);
    let mut inv_std = Vec::with_capacity(a.len() / c);
    let mut data = Vec::with_capacity(a.len());
    for row in a.chunks(c) {
        let mean = sum(row.iter().copied()) / nf;
        let var = sum(row.iter().map(|&x| (x - mean) * (x - mean))) / nf;
        let inv = R::c(1.0) / (var + R::c(eps)).sqrt();
        inv_std.push(inv.hi());
        data.extend(row.iter().map(|&x| (x - mean) * inv));
    }
    (inv_std, data)
}

fn mean_rows<R: Real>(a: &[R], m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); n];
    for row in a.chunks(n) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o = *o + x;
        }
    }
    let mf = R::c(m as f64);
    out.into_iter().map(|v| v / mf).collect()
}

fn row_norms(a: &[f64], c: usize) -> Vec<f64> {
    a.chunks(c)
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn l2_normalize<R: Real>(a: &[R], c: usize) -> Vec<R> {
    let mut data = Vec::with_capacity(a.len());
    for row in a.chunks(c) {
        let nrm = sum(row.iter().map(|&x| x * x)).sqrt();
        data.extend(row.iter().map(|&x| x / nrm));
    }
    data
}

fn argmin<R: Real>(a: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in a.iter().enumerate() {
        if x < a[best] {
            best = i;
        }
    }
    best
}
