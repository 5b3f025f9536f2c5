//! Hypergraph construction over token sets.
//!
//! CS-KNN scores every node token against the class token, keeps the `Ne`
//! highest-scoring nodes as hyperedge centers, and lets each center gather its
//! `K` nearest tokens. KNN, K-Means and DPC-KNN are provided as baselines.
//!
//! All rankings break ties toward the lower node index, and every routine is a
//! pure function of its inputs (plus a seed for the randomized baselines).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Node tokens, the class token, and the grid the nodes were flattened from.
#[derive(Clone, Debug)]
pub struct TokenSet {
    nodes: Tensor,
    class_token: Tensor,
    grid: (usize, usize),
}

impl TokenSet {
    pub fn new(nodes: Tensor, class_token: Tensor, grid: (usize, usize)) -> Result<Self> {
        if nodes.rank() != 2 || nodes.rows() == 0 || nodes.cols() == 0 {
            return Err(Error::config(format!("node tokens must be a non-empty N×C matrix, got {:?}", nodes.shape())));
        }
        if class_token.numel() != nodes.cols() {
            return Err(Error::shape("TokenSet", nodes.shape(), class_token.shape()));
        }
        if grid.0 * grid.1 != nodes.rows() {
            return Err(Error::config(format!(
                "grid {}x{} does not cover {} tokens",
                grid.0,
                grid.1,
                nodes.rows()
            )));
        }
        Ok(TokenSet {
            nodes,
            class_token,
            grid,
        })
    }

    pub fn nodes(&self) -> &Tensor {
        &self.nodes
    }

    pub fn class_token(&self) -> &Tensor {
        &self.class_token
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.rows()
    }

    pub fn channels(&self) -> usize {
        self.nodes.cols()
    }
}

/// Similarity used to rank candidate members of a hyperedge. Larger is nearer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// `(a·b)/√C`.
    #[default]
    Dot,
    Cosine,
    /// Negated squared Euclidean distance.
    Euclidean,
    /// Scaled dot product normalized by a softmax across centers, per node.
    Softmax,
}

impl Distance {
    pub const ALL: [Distance; 4] = [Distance::Dot, Distance::Cosine, Distance::Euclidean, Distance::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Distance::Dot => "dot",
            Distance::Cosine => "cosine",
            Distance::Euclidean => "euclidean",
            Distance::Softmax => "softmax",
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distance::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config(format!("unknown distance {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    #[default]
    CsKnn,
    Knn,
    KMeans,
    DpcKnn,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::CsKnn, Algorithm::Knn, Algorithm::KMeans, Algorithm::DpcKnn];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::CsKnn => "cs-knn",
            Algorithm::Knn => "knn",
            Algorithm::KMeans => "kmeans",
            Algorithm::DpcKnn => "dpc-knn",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown construction algorithm {s:?}")))
    }
}

/// Sparse `N × Ne` incidence: one sorted member list per hyperedge.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Incidence {
    n_nodes: usize,
    k: usize,
    centers: Vec<usize>,
    edges: Vec<Vec<usize>>,
}

impl Incidence {
    /// Validates and builds an incidence from explicit member lists.
    pub fn new(n_nodes: usize, centers: Vec<usize>, mut edges: Vec<Vec<usize>>) -> Result<Self> {
        if edges.is_empty() || centers.len() != edges.len() {
            return Err(Error::config("incidence needs one center per hyperedge and at least one hyperedge"));
        }
        let k = edges[0].len();
        for (j, members) in edges.iter_mut().enumerate() {
            members.sort_unstable();
            if members.len() != k || k == 0 {
                return Err(Error::config(format!("hyperedge {j} has {} members, expected {k}", members.len())));
            }
            if members.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::config(format!("hyperedge {j} repeats a member")));
            }
            if members.last().is_some_and(|&m| m >= n_nodes) {
                return Err(Error::config(format!("hyperedge {j} references a node ≥ {n_nodes}")));
            }
            if members.binary_search(&centers[j]).is_err() {
                return Err(Error::config(format!("hyperedge {j} does not contain its center {}", centers[j])));
            }
        }
        Ok(Incidence {
            n_nodes,
            k,
            centers,
            edges,
        })
    }

    /// Every node alone in its own hyperedge.
    pub fn identity(n: usize) -> Self {
        Incidence {
            n_nodes: n,
            k: 1,
            centers: (0..n).collect(),
            edges: (0..n).map(|i| vec![i]).collect(),
        }
    }

    /// One hyperedge holding every node, centered on node 0.
    pub fn complete(n: usize) -> Self {
        Incidence {
            n_nodes: n,
            k: n,
            centers: vec![0],
            edges: vec![(0..n).collect()],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn contains(&self, node: usize, edge: usize) -> bool {
        self.edges[edge].binary_search(&node).is_ok()
    }

    /// For each node, the ascending list of hyperedges it belongs to.
    pub fn node_edges(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_nodes];
        for (j, members) in self.edges.iter().enumerate() {
            for &i in members {
                out[i].push(j);
            }
        }
        out
    }

    /// Dense 0/1 matrix, `N` rows by `Ne` columns.
    pub fn to_dense(&self) -> Tensor {
        let ne = self.n_edges();
        let mut t = Tensor::zeros(&[self.n_nodes, ne]);
        for (j, members) in self.edges.iter().enumerate() {
            for &i in members {
                t.data_mut()[i * ne + j] = 1.0;
            }
        }
        t
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let centers = self.centers.iter().map(|&c| perm[c]).collect();
        let edges = self.edges.iter().map(|m| m.iter().map(|&i| perm[i]).collect()).collect();
        Incidence::new(self.n_nodes, centers, edges)
    }
}

/// Node and hyperedge degrees (row and column sums of the incidence).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreePair {
    pub d_v: Vec<usize>,
    pub d_e: Vec<usize>,
}

pub fn degrees(h: &Incidence) -> DegreePair {
    let mut d_v = vec![0; h.n_nodes];
    for members in &h.edges {
        for &i in members {
            d_v[i] += 1;
        }
    }
    DegreePair {
        d_v,
        d_e: h.edges.iter().map(Vec::len).collect(),
    }
}

/// Class-token attentiveness `(x_cls · x_i)/√C` for every node.
pub fn score_tokens(tokens: &TokenSet) -> Vec<f64> {
    let cls = tokens.class_token.data();
    let scale = 1.0 / (tokens.channels() as f64).sqrt();
    (0..tokens.n_nodes()).map(|i| dot(cls, tokens.nodes.row(i)) * scale).collect()
}

/// Indices of the `n_edges` highest scores, returned ascending.
pub fn sample_centers(scores: &[f64], n_edges: usize) -> Result<Vec<usize>> {
    if n_edges == 0 || n_edges > scores.len() {
        return Err(Error::config(format!(
            "hyperedge count {n_edges} must be in 1..={}",
            scores.len()
        )));
    }
    let mut centers = top_k(scores, n_edges);
    centers.sort_unstable();
    Ok(centers)
}

/// Builds one hyperedge per center from its `k` nearest tokens.
///
/// A center that does not rank among its own top `k` replaces the `k`-th member.
pub fn knn_assign(nodes: &Tensor, centers: &[usize], k: usize, distance: Distance) -> Result<Incidence> {
    let n = nodes.rows();
    if k == 0 || k > n {
        return Err(Error::config(format!("neighbor count {k} must be in 1..={n}")));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::config(format!("center {bad} out of range for {n} nodes")));
    }
    let sims = similarity_rows(nodes, centers, distance);
    let edges = centers
        .iter()
        .zip(sims.chunks(n))
        .map(|(&c, row)| {
            let mut members = top_k(row, k);
            if !members.contains(&c) {
                members[k - 1] = c;
            }
            members.sort_unstable();
            members
        })
        .collect();
    Incidence::new(n, centers.to_vec(), edges)
}

/// Center-sampling KNN with the scaled dot-product distance.
pub fn cs_knn(tokens: &TokenSet, n_edges: usize, k: usize) -> Result<Incidence> {
    cs_knn_with(tokens, n_edges, k, Distance::Dot)
}

pub fn cs_knn_with(tokens: &TokenSet, n_edges: usize, k: usize, distance: Distance) -> Result<Incidence> {
    let scores = score_tokens(tokens);
    let centers = sample_centers(&scores, n_edges)?;
    knn_assign(&tokens.nodes, &centers, k, distance)
}

/// Which construction to run and how to measure token proximity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionConfig {
    pub algorithm: Algorithm,
    pub distance: Distance,
}

impl ConstructionConfig {
    /// Runs the configured construction. `n_edges` is ignored by plain KNN,
    /// which makes every node a center.
    pub fn build(&self, tokens: &TokenSet, n_edges: usize, k: usize, seed: u64) -> Result<Incidence> {
        match self.algorithm {
            Algorithm::CsKnn => cs_knn_with(tokens, n_edges, k, self.distance),
            Algorithm::Knn => {
                let centers: Vec<usize> = (0..tokens.n_nodes()).collect();
                knn_assign(&tokens.nodes, &centers, k, self.distance)
            }
            Algorithm::KMeans => kmeans_construct(&tokens.nodes, n_edges, k, seed),
            Algorithm::DpcKnn => {
                let scores = density_peak_scores(&tokens.nodes, k);
                let centers = sample_centers(&scores, n_edges)?;
                knn_assign(&tokens.nodes, &centers, k, self.distance)
            }
        }
    }
}

/// Baseline constructors with the default dot-product assignment.
pub fn baseline_construct(tokens: &TokenSet, algo: Algorithm, n_edges: usize, k: usize, seed: u64) -> Result<Incidence> {
    ConstructionConfig {
        algorithm: algo,
        distance: Distance::Dot,
    }
    .build(tokens, n_edges, k, seed)
}

/// Number of Lloyd iterations used by the K-Means baseline.
pub const KMEANS_ITERS: usize = 20;

/// Lloyd's algorithm with k-means++ seeding; each centroid then collects its
/// `k` nearest nodes and is represented by the nearest one.
pub fn kmeans_construct(nodes: &Tensor, n_edges: usize, k: usize, seed: u64) -> Result<Incidence> {
    let n = nodes.rows();
    let c = nodes.cols();
    if n_edges == 0 || n_edges > n {
        return Err(Error::config(format!("hyperedge count {n_edges} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_edges);
    centroids.push(nodes.row(rng.random_range(0..n)).to_vec());
    while centroids.len() < n_edges {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                centroids
                    .iter()
                    .map(|ct| sq_dist(nodes.row(i), ct))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(nodes.row(pick).to_vec());
    }

    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(nodes.row(i), &centroids);
        }
        let mut sums = vec![vec![0.0; c]; n_edges];
        let mut counts = vec![0usize; n_edges];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(nodes.row(i)) {
                *s += v;
            }
        }
        for ((ct, s), &cnt) in centroids.iter_mut().zip(sums).zip(&counts) {
            if cnt > 0 {
                *ct = s.into_iter().map(|v| v / cnt as f64).collect();
            }
        }
    }

    if k == 0 || k > n {
        return Err(Error::config(format!("neighbor count {k} must be in 1..={n}")));
    }
    let mut centers = Vec::with_capacity(n_edges);
    let mut edges = Vec::with_capacity(n_edges);
    for ct in &centroids {
        let sims: Vec<f64> = (0..n).map(|i| -sq_dist(nodes.row(i), ct)).collect();
        let mut members = top_k(&sims, k);
        centers.push(members[0]);
        members.sort_unstable();
        edges.push(members);
    }
    Incidence::new(n, centers, edges)
}

/// Density-peak score `ρ·δ`: `ρ` from the mean squared distance to the `k`
/// nearest neighbors, `δ` the distance to the nearest denser node.
pub fn density_peak_scores(nodes: &Tensor, k: usize) -> Vec<f64> {
    let n = nodes.rows();
    if n == 1 {
        return vec![1.0];
    }
    let c = nodes.cols() as f64;
    let d2: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sq_dist(nodes.row(i), nodes.row(j)) / c).collect())
        .collect();
    let kd = k.clamp(1, n - 1);
    let density: Vec<f64> = (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d2[i][j]).collect();
            others.sort_by(f64::total_cmp);
            let mean = others[..kd].iter().sum::<f64>() / kd as f64;
            (-mean).exp()
        })
        .collect();
    let denser = |i: usize, j: usize| density[j] > density[i] || (density[j] == density[i] && j < i);
    (0..n)
        .map(|i| {
            let delta = (0..n)
                .filter(|&j| denser(i, j))
                .map(|j| d2[i][j])
                .fold(f64::INFINITY, f64::min);
            let delta = if delta.is_finite() {
                delta
            } else {
                d2[i].iter().copied().fold(0.0, f64::max)
            };
            density[i] * delta.sqrt()
        })
        .collect()
}

/// Serializable record of a constructed hypergraph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyDump {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub k: usize,
    pub grid: [usize; 2],
    pub centers: Vec<usize>,
    pub scores: Vec<f64>,
    pub edges: Vec<Vec<usize>>,
    pub node_degrees: Vec<usize>,
}

impl TopologyDump {
    pub fn new(tokens: &TokenSet, h: &Incidence) -> Self {
        TopologyDump {
            n_nodes: h.n_nodes,
            n_edges: h.n_edges(),
            k: h.k,
            grid: [tokens.grid.0, tokens.grid.1],
            centers: h.centers.clone(),
            scores: score_tokens(tokens),
            edges: h.edges.clone(),
            node_degrees: degrees(h).d_v,
        }
    }
}

/// `sims[j*N + i]`: similarity of node `i` to center `centers[j]`.
fn similarity_rows(nodes: &Tensor, centers: &[usize], distance: Distance) -> Vec<f64> {
    let n = nodes.rows();
    let scale = 1.0 / (nodes.cols() as f64).sqrt();
    let mut sims = Vec::with_capacity(centers.len() * n);
    for &c in centers {
        let x = nodes.row(c);
        match distance {
            Distance::Dot | Distance::Softmax => sims.extend((0..n).map(|i| dot(x, nodes.row(i)) * scale)),
            Distance::Cosine => {
                let nx = norm(x);
                sims.extend((0..n).map(|i| {
                    let y = nodes.row(i);
                    let denom = nx * norm(y);
                    if denom > 0.0 {
                        dot(x, y) / denom
                    } else {
                        0.0
                    }
                }))
            }
            Distance::Euclidean => sims.extend((0..n).map(|i| -sq_dist(x, nodes.row(i)))),
        }
    }
    if distance == Distance::Softmax {
        let ne = centers.len();
        for i in 0..n {
            let max = (0..ne).map(|j| sims[j * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..ne).map(|j| (sims[j * n + i] - max).exp()).sum();
            for j in 0..ne {
                sims[j * n + i] = (sims[j * n + i] - max).exp() / total;
            }
        }
    }
    sims
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    // Adding +0.0 folds -0.0 into +0.0 so signed zeros tie.
    let rank = |a: &usize, b: &usize| (values[*b] + 0.0).total_cmp(&(values[*a] + 0.0)).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(rank);
    idx
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, ct) in centroids.iter().enumerate() {
        let d = sq_dist(x, ct);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
