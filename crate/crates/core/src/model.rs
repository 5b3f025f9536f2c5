//! HGFormer blocks, stages and the four-stage pyramid classifier.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{ConstructionConfig, Incidence, TokenSet};
use crate::messaging::{
    hga_e2n, hga_n2e, residual, topo_attention, DropPath, FfnKind, FfnParams, HgaParams, LinearParams, NormParams,
};
use crate::tensor::{read_checkpoint_file, write_checkpoint_file, ParamStore, Scope, Tape, Tensor, Var, GATHER_ZERO};

/// How a block passes messages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Node → hyperedge → node with topology-aware queries.
    #[default]
    Hga,
    /// Queries are a token-wise map of the key/value source; no hypergraph.
    VanillaAttention,
    /// Node → hyperedge only; edge tokens are averaged back onto their members.
    SingleStage,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Hga, BlockKind::VanillaAttention, BlockKind::SingleStage];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Hga => "full",
            BlockKind::VanillaAttention => "vanilla-attention",
            BlockKind::SingleStage => "single-stage",
        }
    }

    pub fn uses_hypergraph(self) -> bool {
        self != BlockKind::VanillaAttention
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub ne_ratio: f64,
    pub k_neighbors: usize,
    pub downsample: usize,
    pub n_heads: usize,
}

impl StageConfig {
    /// `ceil(ne_ratio·n)`, at least 1 and at most `n`.
    pub fn n_edges(&self, n: usize) -> usize {
        let ne = (self.ne_ratio * n as f64 - 1e-9).ceil() as usize;
        ne.clamp(1, n.max(1))
    }

    pub fn k_for(&self, n: usize) -> usize {
        self.k_neighbors.min(n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub variant: String,
    pub base_channels: usize,
    pub depths: [usize; 4],
    pub channel_multipliers: [usize; 4],
    pub ne_ratios: [f64; 4],
    pub k_neighbors: [usize; 4],
    pub strides: [usize; 4],
    pub in_channels: usize,
    pub n_classes: usize,
    pub drop_path_rate: f64,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub block: BlockKind,
    pub construction: ConstructionConfig,
    /// Feedforward after the hyperedge-side attention.
    pub edge_ffn: bool,
    /// Feedforward after the node-side attention.
    pub node_ffn: FfnKind,
    /// Seeds stochastic constructions (K-Means); offset by the block index.
    pub construction_seed: u64,
}

impl NetworkConfig {
    pub const VARIANTS: [&'static str; 4] = ["T", "S", "B", "Micro"];

    fn base(variant: &str, channels: usize, depths: [usize; 4], drop: f64, head_dim: usize) -> Self {
        NetworkConfig {
            variant: variant.to_string(),
            base_channels: channels,
            depths,
            channel_multipliers: [1, 2, 5, 8],
            ne_ratios: [1.0 / 8.0, 1.0 / 4.0, 1.0 / 2.0, 1.0],
            k_neighbors: [128, 64, 32, 8],
            strides: [4, 2, 2, 2],
            in_channels: 3,
            n_classes: 1000,
            drop_path_rate: drop,
            head_dim,
            mlp_ratio: 4,
            block: BlockKind::Hga,
            construction: ConstructionConfig::default(),
            edge_ffn: false,
            node_ffn: FfnKind::Conv,
            construction_seed: 0,
        }
    }

    pub fn tiny() -> Self {
        Self::base("T", 32, [1, 2, 4, 2], 0.05, 32)
    }

    pub fn small() -> Self {
        Self::base("S", 64, [1, 2, 4, 2], 0.1, 32)
    }

    pub fn base_variant() -> Self {
        Self::base("B", 96, [1, 2, 4, 2], 0.15, 32)
    }

    /// Desk-scale variant for toy runs and gradient checks.
    pub fn micro() -> Self {
        let mut c = Self::base("Micro", 16, [1, 1, 1, 1], 0.0, 16);
        c.n_classes = 4;
        c
    }

    pub fn variant(name: &str) -> Result<Self> {
        match name {
            "T" | "t" => Ok(Self::tiny()),
            "S" | "s" => Ok(Self::small()),
            "B" | "b" => Ok(Self::base_variant()),
            "Micro" | "micro" => Ok(Self::micro()),
            other => Err(Error::config(format!("unknown variant {other}, expected one of T, S, B, Micro"))),
        }
    }

    pub fn with_classes(mut self, n_classes: usize) -> Self {
        self.n_classes = n_classes;
        self
    }

    pub fn vanilla_attention_variant(&self) -> Self {
        NetworkConfig {
            block: BlockKind::VanillaAttention,
            ..self.clone()
        }
    }

    /// Drops the hyperedge → node arm. The remaining feedforward is widened by
    /// half so the parameter budget stays close to the full block.
    pub fn single_stage_variant(&self) -> Self {
        NetworkConfig {
            block: BlockKind::SingleStage,
            mlp_ratio: self.mlp_ratio + self.mlp_ratio / 2,
            ..self.clone()
        }
    }

    pub fn stages(&self) -> Vec<StageConfig> {
        (0..4)
            .map(|s| {
                let channels = self.base_channels * self.channel_multipliers[s];
                StageConfig {
                    depth: self.depths[s],
                    channels,
                    ne_ratio: self.ne_ratios[s],
                    k_neighbors: self.k_neighbors[s],
                    downsample: self.strides[s],
                    n_heads: (channels / self.head_dim.max(1)).max(1),
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.base_channels == 0 || self.in_channels == 0 || self.n_classes == 0 {
            return bad("channels and class count must be positive".into());
        }
        if self.head_dim == 0 || self.mlp_ratio == 0 {
            return bad("head_dim and mlp_ratio must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1]", self.drop_path_rate));
        }
        for (s, st) in self.stages().iter().enumerate() {
            if st.channels % self.head_dim != 0 {
                return bad(format!("stage {s}: {} channels not divisible by head_dim {}", st.channels, self.head_dim));
            }
            if !(st.ne_ratio > 0.0 && st.ne_ratio <= 1.0) {
                return bad(format!("stage {s}: ne_ratio {} outside (0, 1]", st.ne_ratio));
            }
            if st.k_neighbors == 0 || st.downsample == 0 {
                return bad(format!("stage {s}: k and stride must be positive"));
            }
        }
        Ok(())
    }
}

/// Output extent of a stride-`s` patch embedding along one axis.
///
/// A side shorter than the stride collapses to a single zero-padded patch so
/// that small inputs still pass through all four stages.
pub fn embed_extent(len: usize, stride: usize) -> Result<usize> {
    if len == 0 {
        Err(Error::config("empty spatial dimension"))
    } else if len.is_multiple_of(stride) {
        Ok(len / stride)
    } else if len < stride {
        Ok(1)
    } else {
        Err(Error::config(format!("dimension {len} not divisible by stride {stride}")))
    }
}

/// Layout of the tensor fed to a patch embedding.
#[derive(Clone, Copy, Debug)]
pub enum EmbedInput {
    /// `C×H×W` image.
    Image,
    /// `N×C` tokens on a `(h, w)` grid.
    Tokens { grid: (usize, usize) },
}

#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub proj: LinearParams,
    pub norm: NormParams,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub kind: BlockKind,
    pub cls: Option<LinearParams>,
    pub n2e: HgaParams,
    pub e2n: Option<HgaParams>,
    /// Node-side feedforward of the single-stage block.
    pub ffn: Option<FfnParams>,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub config: StageConfig,
    pub embed: EmbedParams,
    pub blocks: Vec<BlockParams>,
}

/// Wall time split between hypergraph construction and message passing.
#[derive(Clone, Copy, Debug, Default)]
pub struct PhaseTimes {
    pub construction: Duration,
    pub messaging: Duration,
}

/// Per-call forward state: stochastic-depth randomness and optional tracing.
pub struct Forward<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    pub times: PhaseTimes,
    /// Stage grids after each embedding.
    pub grids: Vec<(usize, usize)>,
    /// Topologies of every block, when recording is enabled.
    pub topologies: Option<Vec<Incidence>>,
}

impl<'r> Forward<'r> {
    pub fn eval() -> Self {
        Forward {
            rng: None,
            times: PhaseTimes::default(),
            grids: Vec::new(),
            topologies: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Forward {
            rng: Some(rng),
            ..Forward::eval()
        }
    }

    pub fn recording(mut self) -> Self {
        self.topologies = Some(Vec::new());
        self
    }

    fn drop_path(&mut self, rate: f64) -> DropPath<'_> {
        match self.rng.as_deref_mut() {
            Some(rng) => DropPath::train(rate, rng),
            None => DropPath::eval(),
        }
    }
}

/// The pyramid classifier: four stages of (embed → blocks), final norm,
/// global average pool, linear head.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    final_norm: NormParams,
    head: LinearParams,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut c_in = config.in_channels;
        for (s, st) in config.stages().into_iter().enumerate() {
            let c = st.channels;
            let fan_in = st.downsample * st.downsample * c_in;
            let embed = EmbedParams {
                proj: LinearParams::register(
                    &mut store,
                    &format!("stage{s}.embed.proj"),
                    fan_in,
                    c,
                    true,
                    (1.0 / fan_in as f64).sqrt(),
                    &mut rng,
                )?,
                norm: NormParams::register(&mut store, &format!("stage{s}.embed.norm"), c)?,
            };
            let mut blocks = Vec::new();
            for b in 0..st.depth {
                let prefix = format!("stage{s}.block{b}");
                blocks.push(register_block(&mut store, &prefix, &config, &st, &mut rng)?);
            }
            stages.push(Stage {
                config: st,
                embed,
                blocks,
            });
            c_in = c;
        }
        let final_norm = NormParams::register(&mut store, "norm", c_in)?;
        let head = LinearParams::register(&mut store, "head", c_in, config.n_classes, true, 0.02, &mut rng)?;
        Ok(Network {
            config,
            store,
            stages,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_checkpoint_file(path, &self.store.named_tensors())
    }

    pub fn load(&mut self, path: &std::path::Path) -> Result<()> {
        self.store.load_named(read_checkpoint_file(path)?)
    }

    /// Non-overlapping stride-`s` patches, linear projection, layer norm.
    pub fn patch_embed(&self, tape: &mut Tape, stage: usize, x: Var, input: EmbedInput) -> Result<(Var, (usize, usize))> {
        let st = &self.stages[stage];
        let s = st.config.downsample;
        let shape = tape.shape(x).to_vec();
        let (c_in, h, w, at): (usize, usize, usize, Box<dyn Fn(usize, usize, usize) -> usize>) = match input {
            EmbedInput::Image => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::shape("patch_embed", &shape, &[self.config.in_channels, 0, 0]));
                };
                (c, h, w, Box::new(move |ch, y, xx| ch * h * w + y * w + xx))
            }
            EmbedInput::Tokens { grid: (h, w) } => {
                if shape.len() != 2 || shape[0] != h * w {
                    return Err(Error::shape("patch_embed", &shape, &[h * w, 0]));
                }
                let c = shape[1];
                (c, h, w, Box::new(move |ch, y, xx| (y * w + xx) * c + ch))
            }
        };
        let expected = st.embed.proj_in(&self.store);
        if s * s * c_in != expected {
            return Err(Error::shape("patch_embed", &shape, &[expected / (s * s), h, w]));
        }
        let (oh, ow) = (embed_extent(h, s)?, embed_extent(w, s)?);
        let mut index = Vec::with_capacity(oh * ow * s * s * c_in);
        for py in 0..oh {
            for px in 0..ow {
                for dy in 0..s {
                    for dx in 0..s {
                        let (y, xx) = (py * s + dy, px * s + dx);
                        for ch in 0..c_in {
                            index.push(if y < h && xx < w { at(ch, y, xx) } else { GATHER_ZERO });
                        }
                    }
                }
            }
        }
        let prev = tape.set_scope(Scope::Embedding);
        let patches = tape.gather(x, index, vec![oh * ow, s * s * c_in])?;
        let tokens = st.embed.proj.apply(tape, &self.store, patches)?;
        let tokens = st.embed.norm.apply(tape, &self.store, tokens)?;
        tape.set_scope(prev);
        Ok((tokens, (oh, ow)))
    }

    /// Learned projection of the mean node token, `1×C`.
    pub fn compute_class_token(&self, tape: &mut Tape, stage: usize, block: usize, x: Var) -> Result<Var> {
        let proj = self.stages[stage].blocks[block]
            .cls
            .as_ref()
            .ok_or_else(|| Error::config("this block kind has no class token"))?;
        let n = tape.shape(x)[0];
        let prev = tape.set_scope(Scope::Projection);
        let mean = tape.segment_mean(x, Arc::new(vec![(0..n).collect()]))?;
        let out = proj.apply(tape, &self.store, mean);
        tape.set_scope(prev);
        out
    }

    fn block_seed(&self, stage: usize, block: usize) -> u64 {
        let offset: usize = self.config.depths[..stage].iter().sum::<usize>() + block;
        self.config.construction_seed.wrapping_add(offset as u64)
    }

    /// One block on `N×C` tokens; `topology` overrides construction when given.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        stage: usize,
        block: usize,
        x: Var,
        grid: (usize, usize),
        fwd: &mut Forward<'_>,
        topology: Option<&Incidence>,
    ) -> Result<Var> {
        let st = &self.stages[stage];
        let p = &st.blocks[block];
        let n = tape.shape(x)[0];
        if n != grid.0 * grid.1 || tape.shape(x)[1] != st.config.channels {
            return Err(Error::shape("block_forward", tape.shape(x), &[grid.0 * grid.1, st.config.channels]));
        }
        let store = &self.store;
        let rate = self.config.drop_path_rate;

        let h = if p.kind.uses_hypergraph() {
            let start = Instant::now();
            let h = match topology {
                Some(h) => h.clone(),
                None => {
                    let cls = self.compute_class_token(tape, stage, block, x)?;
                    let tokens = TokenSet::new(tape.value(x).clone(), tape.value(cls).clone(), grid)?;
                    let (ne, k) = (st.config.n_edges(n), st.config.k_for(n));
                    self.config
                        .construction
                        .build(&tokens, ne, k, self.block_seed(stage, block))?
                }
            };
            if h.n_nodes() != n {
                return Err(Error::config(format!("topology has {} nodes, tokens {n}", h.n_nodes())));
            }
            fwd.times.construction += start.elapsed();
            if let Some(rec) = fwd.topologies.as_mut() {
                rec.push(h.clone());
            }
            Some(h)
        } else {
            None
        };

        let start = Instant::now();
        let mut drop = fwd.drop_path(rate);
        let out = match (p.kind, &h) {
            (BlockKind::Hga, Some(h)) => {
                let e = hga_n2e(tape, store, x, h, &p.n2e, &mut drop)?;
                let e2n = p.e2n.as_ref().expect("full block has an e2n arm");
                hga_e2n(tape, store, e, h, grid, e2n, &mut drop)?
            }
            (BlockKind::SingleStage, Some(h)) => {
                let e = hga_n2e(tape, store, x, h, &p.n2e, &mut drop)?;
                let prev = tape.set_scope(Scope::Aggregation);
                let v = tape.segment_mean(e, Arc::new(h.node_edges()))?;
                tape.set_scope(prev);
                let ffn = p.ffn.as_ref().expect("single-stage block has a feedforward");
                residual(tape, v, &mut drop, |tape| ffn.apply(tape, store, v, Some(grid)))?
            }
            (BlockKind::VanillaAttention, _) => {
                let e = vanilla_arm(tape, store, x, &p.n2e, None, &mut drop)?;
                let e2n = p.e2n.as_ref().expect("vanilla block has an e2n arm");
                vanilla_arm(tape, store, e, e2n, Some(grid), &mut drop)?
            }
            _ => unreachable!("hypergraph blocks always build a topology"),
        };
        fwd.times.messaging += start.elapsed();
        Ok(out)
    }

    /// Logits `1×n_classes` for one `C×H×W` image.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor, fwd: &mut Forward<'_>) -> Result<Var> {
        if image.rank() != 3 || image.shape()[0] != self.config.in_channels {
            return Err(Error::shape("network_forward", image.shape(), &[self.config.in_channels, 0, 0]));
        }
        let mut x = tape.leaf(image.clone(), false)?;
        let mut input = EmbedInput::Image;
        let mut grid = (0, 0);
        for s in 0..self.stages.len() {
            (x, grid) = self.patch_embed(tape, s, x, input)?;
            fwd.grids.push(grid);
            for b in 0..self.stages[s].blocks.len() {
                x = self.block_forward(tape, s, b, x, grid, fwd, None)?;
            }
            input = EmbedInput::Tokens { grid };
        }
        let prev = tape.set_scope(Scope::Head);
        let x = self.final_norm.apply(tape, &self.store, x)?;
        let pooled = tape.segment_mean(x, Arc::new(vec![(0..grid.0 * grid.1).collect()]))?;
        let logits = self.head.apply(tape, &self.store, pooled);
        tape.set_scope(prev);
        logits
    }

    /// Cross-entropy of [`Network::forward`] against `label`.
    pub fn loss(&self, tape: &mut Tape, image: &Tensor, label: usize, fwd: &mut Forward<'_>) -> Result<(Var, Var)> {
        let logits = self.forward(tape, image, fwd)?;
        let prev = tape.set_scope(Scope::Head);
        let loss = tape.cross_entropy(logits, label);
        tape.set_scope(prev);
        Ok((loss?, logits))
    }
}

/// Token-wise query map followed by attention over the same source.
fn vanilla_arm(
    tape: &mut Tape,
    store: &ParamStore,
    src: Var,
    params: &HgaParams,
    grid: Option<(usize, usize)>,
    drop: &mut DropPath<'_>,
) -> Result<Var> {
    let prev = tape.set_scope(Scope::Projection);
    let w = tape.param(store, params.w_conv)?;
    let q = tape.matmul(src, w)?;
    tape.set_scope(prev);
    let q = tape.gelu(q)?;
    topo_attention(tape, store, q, src, &params.attention, params.ffn.as_ref(), grid, drop)
}

fn register_block(
    store: &mut ParamStore,
    prefix: &str,
    config: &NetworkConfig,
    st: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BlockParams> {
    let c = st.channels;
    let ratio = config.mlp_ratio;
    let cls = if config.block.uses_hypergraph() {
        Some(LinearParams::register(store, &format!("{prefix}.cls"), c, c, true, 0.02, rng)?)
    } else {
        None
    };
    let edge_ffn = config.edge_ffn.then_some((FfnKind::Linear, ratio));
    let n2e = HgaParams::register(store, &format!("{prefix}.n2e"), c, st.n_heads, edge_ffn, rng)?;
    let (e2n, ffn) = match config.block {
        BlockKind::Hga | BlockKind::VanillaAttention => (
            Some(HgaParams::register(
                store,
                &format!("{prefix}.e2n"),
                c,
                st.n_heads,
                Some((config.node_ffn, ratio)),
                rng,
            )?),
            None,
        ),
        BlockKind::SingleStage => (
            None,
            Some(FfnParams::register(store, &format!("{prefix}.ffn"), c, ratio, config.node_ffn, rng)?),
        ),
    };
    Ok(BlockParams {
        kind: config.block,
        cls,
        n2e,
        e2n,
        ffn,
    })
}

impl EmbedParams {
    fn proj_in(&self, store: &ParamStore) -> usize {
        store.value(self.proj.weight).shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(embed_extent(32, 4).unwrap(), 8);
        assert_eq!(embed_extent(1, 2).unwrap(), 1);
        assert!(matches!(embed_extent(6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn edge_counts_round_up() {
        let st = NetworkConfig::micro().stages();
        assert_eq!(st[0].n_edges(64), 8);
        assert_eq!(st[0].n_edges(1), 1);
        assert_eq!(st[1].n_edges(16), 4);
        assert_eq!(st[3].n_edges(1), 1);
        assert_eq!(st[0].k_for(64), 64);
        assert_eq!(st[3].k_for(1), 1);
    }

    #[test]
    fn micro_grids_and_logits() {
        let net = Network::new(NetworkConfig::micro(), 0).unwrap();
        let mut tape = Tape::default();
        let mut fwd = Forward::eval();
        let image = Tensor::full(&[3, 32, 32], 0.25);
        let logits = net.forward(&mut tape, &image, &mut fwd).unwrap();
        assert_eq!(fwd.grids, vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
        assert_eq!(tape.shape(logits), &[1, 4]);
    }

    #[test]
    fn unknown_variant_rejected() {
        assert!(NetworkConfig::variant("XL").is_err());
        for v in NetworkConfig::VARIANTS {
            NetworkConfig::variant(v).unwrap().validate().unwrap();
        }
    }
}
