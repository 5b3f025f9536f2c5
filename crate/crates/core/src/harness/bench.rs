//! Inference throughput and scaling measurements.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergraph::{cs_knn, TokenSet};
use crate::messaging::{hga_e2n, hga_n2e, DropPath, FfnKind, HgaParams};
use crate::model::{Forward, Network, NetworkConfig, PhaseTimes};
use crate::tensor::{FlopCounter, ParamStore, Precision, Scope, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: NetworkConfig,
    pub input_size: usize,
    pub batch: usize,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: NetworkConfig::micro(),
            input_size: 32,
            batch: 1,
            warmup_iters: 2,
            timed_iters: 10,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

/// Median per-image seconds split by phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpBreakdown {
    pub construction_s: f64,
    pub messaging_s: f64,
    pub other_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub variant: String,
    pub input_size: usize,
    pub batch: usize,
    pub timed_iters: usize,
    pub param_count: usize,
    /// Tape operation counts of one forward pass, by scope.
    pub flops_per_image: BTreeMap<Scope, u64>,
    /// Wall-clock results; not serialized so seeded reports stay byte-identical.
    #[serde(skip)]
    pub timing: BenchTiming,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub images_per_s: f64,
    pub median_batch_s: f64,
    pub per_image_s: f64,
    pub breakdown: OpBreakdown,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median timing of eval-mode batches after warmup.
pub fn bench_throughput(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.batch == 0 || cfg.timed_iters == 0 {
        return Err(Error::config("batch and timed_iters must be at least 1"));
    }
    let net = Network::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.input_size;
    let images: Vec<Tensor> = (0..cfg.batch)
        .map(|_| {
            let data = (0..cfg.model.in_channels * s * s).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(vec![cfg.model.in_channels, s, s], data)
        })
        .collect::<Result<_>>()?;

    let run = || -> Result<(f64, PhaseTimes, FlopCounter)> {
        let start = Instant::now();
        let parts: Vec<(PhaseTimes, FlopCounter)> = images
            .par_iter()
            .map(|img| {
                let mut tape = Tape::new(cfg.precision);
                let mut fwd = Forward::eval();
                net.forward(&mut tape, img, &mut fwd)?;
                Ok((fwd.times, tape.flops().clone()))
            })
            .collect::<Result<_>>()?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut times = PhaseTimes::default();
        for (t, _) in &parts {
            times.construction += t.construction;
            times.messaging += t.messaging;
        }
        Ok((elapsed, times, parts.into_iter().next().map(|p| p.1).unwrap_or_default()))
    };

    for _ in 0..cfg.warmup_iters {
        run()?;
    }
    let (mut totals, mut cons, mut msg) = (Vec::new(), Vec::new(), Vec::new());
    let mut flops = FlopCounter::default();
    for _ in 0..cfg.timed_iters {
        let (t, phases, f) = run()?;
        let b = cfg.batch as f64;
        totals.push(t);
        cons.push(phases.construction.as_secs_f64() / b);
        msg.push(phases.messaging.as_secs_f64() / b);
        flops = f;
    }
    let median_batch_s = median(&mut totals);
    let per_image_s = median_batch_s / cfg.batch as f64;
    let (construction_s, messaging_s) = (median(&mut cons), median(&mut msg));
    Ok(BenchReport {
        variant: cfg.model.variant.clone(),
        input_size: s,
        batch: cfg.batch,
        timed_iters: cfg.timed_iters,
        param_count: net.param_count(),
        flops_per_image: flops.by_scope,
        timing: BenchTiming {
            images_per_s: 1.0 / per_image_s,
            median_batch_s,
            per_image_s,
            breakdown: OpBreakdown {
                construction_s,
                messaging_s,
                other_s: (per_image_s - construction_s - messaging_s).max(0.0),
            },
        },
    })
}

/// Least-squares line through `(xs, ys)` and the worst residual relative to `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub max_rel_residual: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let max_rel_residual = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (slope * x + intercept - y).abs() / y.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    LinearFit {
        slope,
        intercept,
        max_rel_residual,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingSeries {
    /// What varies: `"N"`, `"C"`, `"Ne"` or `"N*Ne"`.
    pub axis: String,
    pub sizes: Vec<usize>,
    pub values: Vec<f64>,
    pub fit: LinearFit,
}

/// Operation counts of one node → hyperedge → node pass on random tokens.
pub fn messaging_ops(n: usize, c: usize, ne: usize, k: usize, seed: u64) -> Result<FlopCounter> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let nodes = Tensor::new(vec![n, c], normal(n * c))?;
    let cls = Tensor::new(vec![1, c], normal(c))?;
    let tokens = TokenSet::new(nodes.clone(), cls, (1, n))?;
    let h = cs_knn(&tokens, ne, k)?;

    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut store = ParamStore::new();
    let n2e = HgaParams::register(&mut store, "n2e", c, 1, None, &mut prng)?;
    let e2n = HgaParams::register(&mut store, "e2n", c, 1, Some((FfnKind::Linear, 4)), &mut prng)?;
    let mut tape = Tape::new(Precision::F64);
    let v = tape.leaf(nodes, false)?;
    let mut drop = DropPath::eval();
    let e = hga_n2e(&mut tape, &store, v, &h, &n2e, &mut drop)?;
    hga_e2n(&mut tape, &store, e, &h, (1, n), &e2n, &mut drop)?;
    Ok(tape.flops().clone())
}

pub const SWEEP_N: [usize; 4] = [64, 128, 256, 512];
pub const SWEEP_C: [usize; 4] = [8, 16, 32, 64];
pub const SWEEP_NE: [usize; 4] = [4, 8, 16, 32];

/// Token-mixing operation counts (aggregation plus attention core) while
/// varying one of N, C, Ne with the others fixed at N=128, C=16, Ne=8, K=16.
pub fn complexity_sweep(seed: u64) -> Result<Vec<ScalingSeries>> {
    let (n0, c0, ne0, k) = (128, 16, 8, 16);
    let series = |axis: &str, sizes: &[usize], f: &dyn Fn(usize) -> (usize, usize, usize)| -> Result<ScalingSeries> {
        let values = sizes
            .iter()
            .map(|&s| {
                let (n, c, ne) = f(s);
                Ok(messaging_ops(n, c, ne, k, seed)?.messaging_core() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
        Ok(ScalingSeries {
            axis: axis.into(),
            sizes: sizes.to_vec(),
            fit: linear_fit(&xs, &values),
            values,
        })
    };
    Ok(vec![
        series("N", &SWEEP_N, &|n| (n, c0, ne0))?,
        series("C", &SWEEP_C, &|c| (n0, c, ne0))?,
        series("Ne", &SWEEP_NE, &|ne| (n0, c0, ne))?,
    ])
}

/// Median CS-KNN wall time against `N·Ne` over `(N, Ne)` pairs, with C and K fixed.
pub fn construction_timing(pairs: &[(usize, usize)], c: usize, k: usize, reps: usize, seed: u64) -> Result<ScalingSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::new();
    for &(n, ne) in pairs {
        let data = (0..n * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cls = (0..c).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tokens = TokenSet::new(Tensor::new(vec![n, c], data)?, Tensor::new(vec![1, c], cls)?, (1, n))?;
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps.max(1) {
            let start = Instant::now();
            std::hint::black_box(cs_knn(&tokens, ne, k.min(n))?);
            times.push(start.elapsed().as_secs_f64());
        }
        values.push(median(&mut times));
    }
    let sizes: Vec<usize> = pairs.iter().map(|&(n, ne)| n * ne).collect();
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    Ok(ScalingSeries {
        axis: "N*Ne".into(),
        fit: linear_fit(&xs, &values),
        sizes,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_exact_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!(f.max_rel_residual < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
