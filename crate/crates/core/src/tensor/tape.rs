use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowVec,
    Gelu,
    SoftmaxRows,
    LayerNorm,
    DepthwiseConv,
    Gather,
    SegmentMean,
    SliceCols,
    ConcatCols,
    Reshape,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRowVec => "add_row_vec",
            OpKind::Gelu => "gelu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::DepthwiseConv => "depthwise_conv2d",
            OpKind::Gather => "gather",
            OpKind::SegmentMean => "segment_mean",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub const ALL: [OpKind; 20] = ALL_OPS;

    pub fn parse(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

const ALL_OPS: [OpKind; 20] = [
    OpKind::Leaf,
    OpKind::Param,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddRowVec,
    OpKind::Gelu,
    OpKind::SoftmaxRows,
    OpKind::LayerNorm,
    OpKind::DepthwiseConv,
    OpKind::Gather,
    OpKind::SegmentMean,
    OpKind::SliceCols,
    OpKind::ConcatCols,
    OpKind::Reshape,
    OpKind::Sum,
    OpKind::CrossEntropy,
];

/// Accounting bucket for floating-point operation counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Other,
    Embedding,
    /// Sparse node/hyperedge aggregation (the `D⁻¹Hᵀ` and `D⁻¹H` products).
    Aggregation,
    /// Per-token linear maps: HGConv weights and attention projections.
    Projection,
    /// Query-key scores, softmax, and value mixing.
    AttentionCore,
    FeedForward,
    Head,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FlopCounter {
    pub by_scope: BTreeMap<Scope, u64>,
}

impl FlopCounter {
    pub fn get(&self, scope: Scope) -> u64 {
        self.by_scope.get(&scope).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.by_scope.values().sum()
    }

    /// Operations that mix information between tokens.
    pub fn messaging_core(&self) -> u64 {
        self.get(Scope::Aggregation) + self.get(Scope::AttentionCore)
    }
}

/// Running record of softmax row sums, enabled with [`Tape::enable_softmax_audit`].
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SoftmaxAudit {
    pub rows: usize,
    pub max_deviation: f64,
    pub min_entry: f64,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVec(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
        layout: ConvLayout,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        groups: Arc<Vec<Vec<usize>>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowVec(..) => OpKind::AddRowVec,
            Op::Gelu(_) => OpKind::Gelu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::DepthwiseConv { .. } => OpKind::DepthwiseConv,
            Op::Gather { .. } => OpKind::Gather,
            Op::SegmentMean { .. } => OpKind::SegmentMean,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

/// Strides describing where channel `c` of pixel `(y, x)` lives in a flat buffer.
#[derive(Clone, Copy, Debug)]
struct ConvLayout {
    channels: usize,
    height: usize,
    width: usize,
    channel_stride: usize,
    pixel_stride: usize,
}

impl ConvLayout {
    #[inline]
    fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        c * self.channel_stride + (y * self.width + x) * self.pixel_stride
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Sentinel gather index producing a zero.
pub(crate) const GATHER_ZERO: usize = usize::MAX;

/// Single-threaded record of a forward computation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, Var>,
    scope: Scope,
    flops: FlopCounter,
    audit: Option<SoftmaxAudit>,
    fault: Option<(OpKind, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::F64)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
            scope: Scope::Other,
            flops: FlopCounter::default(),
            audit: None,
            fault: None,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Sets the accounting scope for subsequent ops and returns the previous one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn enable_softmax_audit(&mut self) {
        self.audit = Some(SoftmaxAudit {
            rows: 0,
            max_deviation: 0.0,
            min_entry: f64::INFINITY,
        });
    }

    pub fn softmax_audit(&self) -> Option<SoftmaxAudit> {
        self.audit
    }

    /// Scales every input gradient produced by ops of `kind` by `factor`.
    ///
    /// Exists so gradient-check tooling can prove it catches a broken backward rule.
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    fn count(&mut self, flops: usize) {
        *self.flops.by_scope.entry(self.scope).or_insert(0) += flops as u64;
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        let kind = op.kind();
        self.precision.round(value.data_mut());
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Loads a parameter from `store`; repeated loads return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param, true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.count(2 * m * k * n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), needs)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.kind().name();
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.count(t.numel());
        let needs = self.needs(a) || self.needs(b);
        self.push(t, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.count(t.numel());
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, s), needs)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_vec(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row_vec")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_row_vec", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.count(m * n);
        let needs = self.needs(x) || self.needs(bias);
        self.push(Tensor::new(vec![m, n], out)?, Op::AddRowVec(x, bias), needs)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * std_normal_cdf(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.count(8 * t.numel());
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        if let Some(audit) = self.audit.as_mut() {
            for row in out.chunks(n) {
                let s: f64 = row.iter().sum();
                audit.rows += 1;
                audit.max_deviation = audit.max_deviation.max((s - 1.0).abs());
                audit.min_entry = row.iter().copied().fold(audit.min_entry, f64::min);
            }
        }
        self.count(3 * m * n);
        let needs = self.needs(x);
        self.push(Tensor::new(vec![m, n], out)?, Op::SoftmaxRows(x), needs)
    }

    /// Per-row normalization followed by the affine `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if n == 0 {
            return Err(Error::config("layer_norm over zero features"));
        }
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        self.count(8 * m * n);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// Depthwise 3×3 correlation of a `C×H×W` tensor with zero padding 1.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("depthwise_conv2d", &s, &[0, 0, 0]));
        }
        let layout = ConvLayout {
            channels: s[0],
            height: s[1],
            width: s[2],
            channel_stride: s[1] * s[2],
            pixel_stride: 1,
        };
        self.depthwise(x, kernel, layout, s)
    }

    /// Depthwise 3×3 correlation over token rows `N×C` laid out on an `h×w` grid.
    pub fn depthwise_conv2d_tokens(&mut self, x: Var, grid: (usize, usize), kernel: Var) -> Result<Var> {
        let (n, c) = self.matrix_dims(x, "depthwise_conv2d")?;
        if grid.0 * grid.1 != n {
            return Err(Error::shape("depthwise_conv2d", &[n, c], &[grid.0, grid.1]));
        }
        let layout = ConvLayout {
            channels: c,
            height: grid.0,
            width: grid.1,
            channel_stride: 1,
            pixel_stride: c,
        };
        self.depthwise(x, kernel, layout, vec![n, c])
    }

    fn depthwise(&mut self, x: Var, kernel: Var, layout: ConvLayout, out_shape: Vec<usize>) -> Result<Var> {
        let ks = self.shape(kernel);
        if ks != [layout.channels, 3, 3] {
            return Err(Error::config(format!(
                "depthwise kernel must be [{}, 3, 3], got {ks:?}",
                layout.channels
            )));
        }
        let src = self.value(x).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; src.len()];
        let (h, w) = (layout.height as isize, layout.width as isize);
        for c in 0..layout.channels {
            let kc = &k[c * 9..c * 9 + 9];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in -1..=1isize {
                        let yy = y + dy;
                        if yy < 0 || yy >= h {
                            continue;
                        }
                        for dx in -1..=1isize {
                            let xs = xx + dx;
                            if xs < 0 || xs >= w {
                                continue;
                            }
                            let kv = kc[((dy + 1) * 3 + dx + 1) as usize];
                            acc += kv * src[layout.offset(c, yy as usize, xs as usize)];
                        }
                    }
                    out[layout.offset(c, y as usize, xx as usize)] = acc;
                }
            }
        }
        self.count(18 * src.len());
        let needs = self.needs(x) || self.needs(kernel);
        self.push(Tensor::new(out_shape, out)?, Op::DepthwiseConv { x, kernel, layout }, needs)
    }

    /// `out[i] = x[index[i]]` over flat storage; an index of [`GATHER_ZERO`] yields 0.
    pub(crate) fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(Error::Contract(format!("gather index {i} out of range {}", src.len())));
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::Gather { x, index }, needs)
    }

    /// Mean of the rows of `x` listed in each group; empty groups give a zero row.
    pub fn segment_mean(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (rows, c) = self.matrix_dims(x, "segment_mean")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; groups.len() * c];
        let mut work = 0;
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let dst = &mut out[g * c..(g + 1) * c];
            for &m in members {
                if m >= rows {
                    return Err(Error::Contract(format!("segment member {m} out of range {rows}")));
                }
                for (d, s) in dst.iter_mut().zip(&src[m * c..(m + 1) * c]) {
                    *d += s;
                }
            }
            let inv = 1.0 / members.len() as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
            work += (members.len() + 1) * c;
        }
        self.count(work);
        let needs = self.needs(x);
        let g = groups.len();
        self.push(Tensor::new(vec![g, c], out)?, Op::SegmentMean { x, groups }, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.count(self.value(x).numel());
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if target >= z.len() {
            return Err(Error::Contract(format!("target {target} out of range {}", z.len())));
        }
        let mut probs = z.to_vec();
        softmax_in_place(&mut probs);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        self.count(4 * z.len());
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                let kind = node.op.kind();
                let mut sink = Sink {
                    tape: self,
                    grads: &mut grads,
                    factor: match self.fault {
                        Some((k, f)) if k == kind => f,
                        _ => 1.0,
                    },
                };
                sink.propagate(node, &g);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Collects the gradients of every parameter loaded on this tape.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros(store);
        self.param_grads_into(grads, &mut out);
        out
    }

    /// Adds the gradients of every parameter loaded on this tape into `out`.
    pub fn param_grads_into(&self, grads: &Gradients, out: &mut ParamGrads) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                out.add_slice(id, g);
            }
        }
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }
}

/// Gradients produced by one [`Tape::backward`] sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

struct Sink<'a> {
    tape: &'a Tape,
    grads: &'a mut Vec<Option<Vec<f64>>>,
    factor: f64,
}

impl Sink<'_> {
    fn add(&mut self, v: Var, contribution: impl IntoIterator<Item = f64>) {
        if !self.tape.nodes[v.0].needs_grad {
            return;
        }
        let factor = self.factor;
        match &mut self.grads[v.0] {
            Some(slot) => {
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s += factor * c;
                }
            }
            empty => {
                let fresh: Vec<f64> = contribution.into_iter().map(|c| factor * c).collect();
                debug_assert_eq!(fresh.len(), self.tape.nodes[v.0].value.numel());
                *empty = Some(fresh);
            }
        }
    }

    fn propagate(&mut self, node: &Node, g: &[f64]) {
        let tape = self.tape;
        let val = |v: Var| tape.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (tape.shape(*a)[0], tape.shape(*a)[1]);
                let n = tape.shape(*b)[1];
                if tape.needs(*a) {
                    let bv = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.add(*a, da);
                }
                if tape.needs(*b) {
                    let av = val(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                    self.add(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (tape.shape(*a)[0], tape.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.add(*a, da);
            }
            Op::Add(a, b) => {
                self.add(*a, g.iter().copied());
                self.add(*b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add(*a, g.iter().copied());
                self.add(*b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.add(*a, g.iter().zip(bv).map(|(x, y)| x * y));
                self.add(*b, g.iter().zip(av).map(|(x, y)| x * y));
            }
            Op::Scale(a, s) => self.add(*a, g.iter().map(|v| v * s)),
            Op::AddRowVec(x, b) => {
                self.add(*x, g.iter().copied());
                let n = tape.value(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.add(*b, db);
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                self.add(*x, g.iter().zip(xv).map(|(gv, &v)| gv * gelu_derivative(v)));
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = tape.value(*gamma).numel();
                let gv = val(*gamma);
                if tape.needs(*gamma) || tape.needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.add(*gamma, dg);
                    self.add(*beta, db);
                }
                if tape.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (i, ((dr, gr), hr)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        let scale = inv_std[i] / nf;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dr[j] = scale * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.add(*x, dx);
                }
            }
            Op::DepthwiseConv { x, kernel, layout } => {
                let xv = val(*x);
                let kv = val(*kernel);
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                let (h, w) = (layout.height as isize, layout.width as isize);
                for c in 0..layout.channels {
                    for y in 0..h {
                        for xx in 0..w {
                            let go = g[layout.offset(c, y as usize, xx as usize)];
                            if go == 0.0 {
                                continue;
                            }
                            for dy in -1..=1isize {
                                let yy = y + dy;
                                if yy < 0 || yy >= h {
                                    continue;
                                }
                                for dxo in -1..=1isize {
                                    let xs = xx + dxo;
                                    if xs < 0 || xs >= w {
                                        continue;
                                    }
                                    let ki = c * 9 + ((dy + 1) * 3 + dxo + 1) as usize;
                                    let off = layout.offset(c, yy as usize, xs as usize);
                                    dx[off] += kv[ki] * go;
                                    dk[ki] += xv[off] * go;
                                }
                            }
                        }
                    }
                }
                self.add(*x, dx);
                self.add(*kernel, dk);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; tape.value(*x).numel()];
                for (&i, gv) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        dx[i] += gv;
                    }
                }
                self.add(*x, dx);
            }
            Op::SegmentMean { x, groups } => {
                let c = node.value.cols();
                let mut dx = vec![0.0; tape.value(*x).numel()];
                for (gi, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / members.len() as f64;
                    let gr = &g[gi * c..(gi + 1) * c];
                    for &m in members {
                        for (d, gv) in dx[m * c..(m + 1) * c].iter_mut().zip(gr) {
                            *d += gv * inv;
                        }
                    }
                }
                self.add(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (tape.shape(*x)[0], tape.shape(*x)[1]);
                let len = node.value.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.add(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = tape.value(p).cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.add(p, dp);
                    offset += w;
                }
            }
            Op::Reshape(x) => self.add(*x, g.iter().copied()),
            Op::Sum(x) => {
                let n = tape.value(*x).numel();
                self.add(*x, std::iter::repeat_n(g[0], n));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*target] -= g[0];
                self.add(*logits, d);
            }
        }
    }
}

/// `out += a·b` for row-major `m×k` and `k×n` inputs.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let oi = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, bv) in oi.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::default();
        let i = t.leaf(Tensor::identity(2), false).unwrap();
        let a = t.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]), false).unwrap();
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c), t.value(a));

        let p = t.leaf(mat(&[&[1.0, 0.0], &[0.0, 0.0]]), false).unwrap();
        let b = t.leaf(mat(&[&[5.0, 6.0], &[7.0, 8.0]]), false).unwrap();
        let c = t.matmul(p, b).unwrap();
        assert_eq!(t.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::default();
        let a = t.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let b = t.leaf(Tensor::zeros(&[2, 3]), false).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::default();
        let x = t
            .leaf(mat(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0], &[1.0, 2.0, 3.0]]), false)
            .unwrap();
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y);
        for j in 0..3 {
            assert!((v.at(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(v.at(1, 0), 1.0);
        assert!(v.at(1, 1) < 1e-300);
        let expect = [0.0900, 0.2447, 0.6652];
        for j in 0..3 {
            assert!((v.at(2, j) - expect[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::default();
        let g = t.leaf(Tensor::full(&[2], 1.0), false).unwrap();
        let b = t.leaf(Tensor::zeros(&[2]), false).unwrap();
        let x = t.leaf(mat(&[&[1.0, 3.0]]), false).unwrap();
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);

        let c = t.leaf(mat(&[&[2.5, 2.5]]), false).unwrap();
        let y = t.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);

        // zero variance with eps = 0 divides by zero
        assert!(matches!(t.layer_norm(c, g, b, 0.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn gelu_examples() {
        let mut t = Tape::default();
        let x = t.leaf(Tensor::new(vec![4], vec![0.0, 1.0, 30.0, -30.0]).unwrap(), false).unwrap();
        let y = t.gelu(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.84134).abs() < 1e-4);
        assert!((v[2] - 30.0).abs() < 1e-9);
        assert!(v[3].abs() < 1e-9);
    }

    #[test]
    fn depthwise_examples() {
        let mut t = Tape::default();
        let x = t.leaf(Tensor::full(&[1, 5, 5], 1.0), false).unwrap();
        let ones = t.leaf(Tensor::full(&[1, 3, 3], 1.0), false).unwrap();
        let y = t.depthwise_conv2d(x, ones).unwrap();
        let v = t.value(y);
        assert_eq!(v.data()[0], 4.0);
        assert_eq!(v.data()[4], 4.0);
        assert_eq!(v.data()[6], 9.0);
        assert_eq!(v.data()[12], 9.0);
        assert_eq!(v.data()[24], 4.0);

        let mut delta = Tensor::zeros(&[2, 3, 3]);
        delta.data_mut()[4] = 1.0;
        delta.data_mut()[13] = 1.0;
        let input = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
        let x = t.leaf(input.clone(), false).unwrap();
        let k = t.leaf(delta, false).unwrap();
        let y = t.depthwise_conv2d(x, k).unwrap();
        assert_eq!(t.value(y), &input);

        let bad = t.leaf(Tensor::zeros(&[2, 5, 5]), false).unwrap();
        assert!(matches!(t.depthwise_conv2d(x, bad), Err(Error::Config(_))));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::default();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::default();
        let x = t.leaf(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn f32_precision_rounds_outputs() {
        let mut t = Tape::new(Precision::F32);
        let x = t.leaf(Tensor::scalar(0.1), false).unwrap();
        assert_eq!(t.value(x).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn segment_mean_empty_group_is_zero() {
        let mut t = Tape::default();
        let x = t.leaf(mat(&[&[1.0, 1.0], &[3.0, 3.0]]), true).unwrap();
        let y = t.segment_mean(x, Arc::new(vec![vec![0, 1], vec![]])).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in ALL_OPS {
            assert_eq!(OpKind::parse(k.name()), Some(k));
        }
    }
}
