//! Node → hyperedge → node message passing.
//!
//! Each direction first predicts tokens with a hypergraph convolution (a sparse
//! mean over the incidence followed by a linear map and GELU), then refines the
//! prediction with multi-head attention in which the predicted tokens are the
//! queries and the opposite token set supplies keys and values.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::Incidence;
use crate::tensor::{ParamId, ParamStore, Scope, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Feedforward flavour attached after an attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    /// Two linear layers with GELU between them.
    Linear,
    /// As `Linear`, with a depthwise 3×3 convolution over the token grid after
    /// the expansion layer.
    Conv,
}

/// Stochastic depth over residual branches.
pub struct DropPath<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> DropPath<'r> {
    /// Keeps every branch unscaled.
    pub fn eval() -> Self {
        DropPath { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        DropPath { rate, rng: Some(rng) }
    }

    /// `None` drops the branch; otherwise the factor the kept branch is scaled by.
    pub fn sample(&mut self) -> Option<f64> {
        match self.rng.as_deref_mut() {
            None => Some(1.0),
            Some(_) if self.rate <= 0.0 => Some(1.0),
            Some(_) if self.rate >= 1.0 => None,
            Some(rng) => {
                let keep = 1.0 - self.rate;
                (rng.random::<f64>() < keep).then_some(1.0 / keep)
            }
        }
    }

    pub fn reborrow(&mut self) -> DropPath<'_> {
        DropPath {
            rate: self.rate,
            rng: self.rng.as_deref_mut(),
        }
    }
}

/// `base + scale·branch(…)`, skipping the branch entirely when dropped.
pub fn residual(
    tape: &mut Tape,
    base: Var,
    drop: &mut DropPath<'_>,
    branch: impl FnOnce(&mut Tape) -> Result<Var>,
) -> Result<Var> {
    let Some(scale) = drop.sample() else {
        return Ok(base);
    };
    let mut out = branch(tape)?;
    if scale != 1.0 {
        out = tape.scale(out, scale)?;
    }
    tape.add(base, out)
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma)?;
        let b = tape.param(store, self.beta)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_normal(format!("{prefix}.weight"), &[fan_in, fan_out], std, rng)?;
        let bias = if bias {
            Some(store.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(LinearParams { weight, bias })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row_vec(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Pre-norm multi-head attention weights.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub norm_query: NormParams,
    pub norm_kv: NormParams,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub out: LinearParams,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_heads == 0 || !channels.is_multiple_of(n_heads) {
            return Err(Error::config(format!("{channels} channels do not split into {n_heads} heads")));
        }
        let std = 0.02;
        Ok(AttentionParams {
            norm_query: NormParams::register(store, &format!("{prefix}.norm_q"), channels)?,
            norm_kv: NormParams::register(store, &format!("{prefix}.norm_kv"), channels)?,
            w_q: store.add_normal(format!("{prefix}.q.weight"), &[channels, channels], std, rng)?,
            w_k: store.add_normal(format!("{prefix}.k.weight"), &[channels, channels], std, rng)?,
            w_v: store.add_normal(format!("{prefix}.v.weight"), &[channels, channels], std, rng)?,
            out: LinearParams::register(store, &format!("{prefix}.proj"), channels, channels, true, std, rng)?,
            n_heads,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub norm: NormParams,
    pub fc1: LinearParams,
    pub dw_kernel: Option<ParamId>,
    pub dw_bias: Option<ParamId>,
    pub fc2: LinearParams,
}

impl FfnParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        mlp_ratio: usize,
        kind: FfnKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = channels * mlp_ratio;
        let norm = NormParams::register(store, &format!("{prefix}.norm"), channels)?;
        let fc1 = LinearParams::register(store, &format!("{prefix}.fc1"), channels, hidden, true, 0.02, rng)?;
        let (dw_kernel, dw_bias) = match kind {
            FfnKind::Conv => (
                Some(store.add_normal(format!("{prefix}.dwconv.weight"), &[hidden, 3, 3], (2.0f64 / 9.0).sqrt(), rng)?),
                Some(store.add(format!("{prefix}.dwconv.bias"), Tensor::zeros(&[hidden]))?),
            ),
            FfnKind::Linear => (None, None),
        };
        let fc2 = LinearParams::register(store, &format!("{prefix}.fc2"), hidden, channels, true, 0.02, rng)?;
        Ok(FfnParams {
            norm,
            fc1,
            dw_kernel,
            dw_bias,
            fc2,
        })
    }

    /// `fc2(gelu([dwconv](fc1(norm(x)))))`; the conv variant needs the token grid.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: Option<(usize, usize)>) -> Result<Var> {
        let prev = tape.set_scope(Scope::FeedForward);
        let h = self.norm.apply(tape, store, x)?;
        let mut h = self.fc1.apply(tape, store, h)?;
        if let Some(kernel) = self.dw_kernel {
            let grid = grid.ok_or_else(|| Error::config("convolutional feedforward needs a token grid"))?;
            let k = tape.param(store, kernel)?;
            h = tape.depthwise_conv2d_tokens(h, grid, k)?;
            if let Some(b) = self.dw_bias {
                let b = tape.param(store, b)?;
                h = tape.add_row_vec(h, b)?;
            }
        }
        let h = tape.gelu(h)?;
        let out = self.fc2.apply(tape, store, h);
        tape.set_scope(prev);
        out
    }
}

/// Weights of one HGA direction: the HGConv map, the attention, and an optional FFN.
#[derive(Clone, Debug)]
pub struct HgaParams {
    pub w_conv: ParamId,
    pub attention: AttentionParams,
    pub ffn: Option<FfnParams>,
}

impl HgaParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        n_heads: usize,
        ffn: Option<(FfnKind, usize)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_conv = store.add_normal(
            format!("{prefix}.conv.weight"),
            &[channels, channels],
            (1.0 / channels as f64).sqrt(),
            rng,
        )?;
        let attention = AttentionParams::register(store, &format!("{prefix}.attn"), channels, n_heads, rng)?;
        let ffn = match ffn {
            Some((kind, ratio)) => Some(FfnParams::register(store, &format!("{prefix}.ffn"), channels, ratio, kind, rng)?),
            None => None,
        };
        Ok(HgaParams { w_conv, attention, ffn })
    }
}

fn incidence_groups(h: &Incidence) -> Arc<Vec<Vec<usize>>> {
    Arc::new(h.edges().to_vec())
}

/// Hyperedge prediction `σ((D_e⁻¹ Hᵀ V) W)`: per-edge member mean, then `W`, then `σ`.
pub fn hgconv_n2e(tape: &mut Tape, v: Var, h: &Incidence, w: Var, act: Activation) -> Result<Var> {
    if tape.shape(v)[0] != h.n_nodes() {
        return Err(Error::shape("hgconv_n2e", tape.shape(v), &[h.n_nodes(), h.n_edges()]));
    }
    let prev = tape.set_scope(Scope::Aggregation);
    let pooled = tape.segment_mean(v, incidence_groups(h))?;
    tape.set_scope(Scope::Projection);
    let mapped = tape.matmul(pooled, w)?;
    tape.set_scope(prev);
    act.apply(tape, mapped)
}

/// Node prediction `σ((D_v⁻¹ H E) W)`; nodes in no hyperedge aggregate to zero.
pub fn hgconv_e2n(tape: &mut Tape, e: Var, h: &Incidence, w: Var, act: Activation) -> Result<Var> {
    if tape.shape(e)[0] != h.n_edges() {
        return Err(Error::shape("hgconv_e2n", tape.shape(e), &[h.n_nodes(), h.n_edges()]));
    }
    let prev = tape.set_scope(Scope::Aggregation);
    let pooled = tape.segment_mean(e, Arc::new(h.node_edges()))?;
    tape.set_scope(Scope::Projection);
    let mapped = tape.matmul(pooled, w)?;
    tape.set_scope(prev);
    act.apply(tape, mapped)
}

/// Output of [`multi_head_attention`].
pub struct AttentionOutput {
    /// Projected result, `M×C`.
    pub output: Var,
    /// Concatenated per-head `softmax(QKᵀ/√d_k)·V`, before the output projection.
    pub mixed: Var,
    /// Attention weights per head, each `M×P`.
    pub weights: Vec<Var>,
}

/// Multi-head attention of `query_in` (`M×C`) over `kv_in` (`P×C`). No normalization or residual.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query_in: Var,
    kv_in: Var,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let c = tape.shape(query_in)[1];
    if tape.shape(kv_in)[1] != c {
        return Err(Error::shape("attention", tape.shape(query_in), tape.shape(kv_in)));
    }
    let heads = params.n_heads;
    let dk = c / heads;
    let prev = tape.set_scope(Scope::Projection);
    let wq = tape.param(store, params.w_q)?;
    let wk = tape.param(store, params.w_k)?;
    let wv = tape.param(store, params.w_v)?;
    let q = tape.matmul(query_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;

    tape.set_scope(Scope::AttentionCore);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, hd * dk, dk)?,
                tape.slice_cols(k, hd * dk, dk)?,
                tape.slice_cols(v, hd * dk, dk)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let attn = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let mixed = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.set_scope(Scope::Projection);
    let output = params.out.apply(tape, store, mixed)?;
    tape.set_scope(prev);
    Ok(AttentionOutput { output, mixed, weights })
}

/// Topology-aware refinement: `query_src` attends over `kv_src`, with pre-norm
/// and residual connections around the attention and (if present) the FFN.
#[allow(clippy::too_many_arguments)]
pub fn topo_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query_src: Var,
    kv_src: Var,
    attention: &AttentionParams,
    ffn: Option<&FfnParams>,
    grid: Option<(usize, usize)>,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    let x = residual(tape, query_src, drop, |tape| {
        let q_in = attention.norm_query.apply(tape, store, query_src)?;
        let kv = attention.norm_kv.apply(tape, store, kv_src)?;
        Ok(multi_head_attention(tape, store, q_in, kv, attention)?.output)
    })?;
    match ffn {
        Some(ffn) => residual(tape, x, drop, |tape| ffn.apply(tape, store, x, grid)),
        None => Ok(x),
    }
}

/// Node → hyperedge: HGConv predicts edge tokens, which then query the node tokens.
pub fn hga_n2e(
    tape: &mut Tape,
    store: &ParamStore,
    v: Var,
    h: &Incidence,
    params: &HgaParams,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    let w = tape.param(store, params.w_conv)?;
    let e = hgconv_n2e(tape, v, h, w, Activation::Gelu)?;
    topo_attention(tape, store, e, v, &params.attention, params.ffn.as_ref(), None, drop)
}

/// Hyperedge → node: HGConv predicts node tokens, which then query the edge tokens.
#[allow(clippy::too_many_arguments)]
pub fn hga_e2n(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    h: &Incidence,
    grid: (usize, usize),
    params: &HgaParams,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    if grid.0 * grid.1 != h.n_nodes() {
        return Err(Error::config(format!(
            "grid {}x{} does not match {} nodes",
            grid.0,
            grid.1,
            h.n_nodes()
        )));
    }
    let w = tape.param(store, params.w_conv)?;
    let v_next = hgconv_e2n(tape, e, h, w, Activation::Gelu)?;
    topo_attention(tape, store, v_next, e, &params.attention, params.ffn.as_ref(), Some(grid), drop)
}
