//! Central finite-difference verification of tape gradients.
//!
//! Each named parameter is checked along one random unit direction over all of its
//! entries plus up to `coords_per_param` individual entries.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Forward, Network, NetworkConfig};
use crate::tensor::{OpKind, ParamGrads, ParamId, ParamStore, Precision, Tape, Tensor};

/// Denominator floor for relative errors, so exact zeros compare by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub step: f64,
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-5,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub coords_checked: usize,
    pub directional_rel_err: f64,
    pub max_rel_err: f64,
}

/// Compares `analytic` with central differences of `loss` for every parameter
/// reachable through `store_of`.
pub fn finite_difference_check<T, S, L>(
    model: &T,
    store_of: S,
    loss: L,
    analytic: &ParamGrads,
    opts: &FdOptions,
) -> Result<Vec<ParamCheck>>
where
    T: Clone + Sync,
    S: Fn(&mut T) -> &mut ParamStore + Sync,
    L: Fn(&T) -> Result<f64> + Sync,
{
    let mut probe = model.clone();
    let ids: Vec<ParamId> = store_of(&mut probe).ids().collect();
    ids.par_iter()
        .map(|&id| {
            let mut work = model.clone();
            let (name, base) = {
                let store = store_of(&mut work);
                (store.name(id).to_string(), store.value(id).clone())
            };
            let grad = analytic.get(id);
            let n = base.numel();
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(id.index() as u64));
            let h = opts.step;

            let mut eval_at = |delta: &dyn Fn(usize) -> f64, sign: f64| -> Result<f64> {
                let v = store_of(&mut work).value_mut(id);
                for (i, (x, b)) in v.data_mut().iter_mut().zip(base.data()).enumerate() {
                    *x = b + sign * h * delta(i);
                }
                let out = loss(&work);
                store_of(&mut work).value_mut(id).data_mut().copy_from_slice(base.data());
                out
            };

            let mut dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|d| *d /= norm);
            let analytic_dir: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let plus = eval_at(&|i| dir[i], 1.0)?;
            let minus = eval_at(&|i| dir[i], -1.0)?;
            let directional = relative_error(analytic_dir, (plus - minus) / (2.0 * h));

            let k = opts.coords_per_param.min(n);
            let mut coords = sample(&mut rng, n, k).into_vec();
            coords.sort_unstable();
            let mut max_err = directional;
            for &j in &coords {
                let plus = eval_at(&|i| f64::from(u8::from(i == j)), 1.0)?;
                let minus = eval_at(&|i| f64::from(u8::from(i == j)), -1.0)?;
                max_err = max_err.max(relative_error(grad[j], (plus - minus) / (2.0 * h)));
            }
            Ok(ParamCheck {
                name,
                numel: n,
                coords_checked: k,
                directional_rel_err: directional,
                max_rel_err: max_err,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: NetworkConfig,
    pub image_size: usize,
    pub batch: usize,
    pub tolerance: f64,
    pub fd: FdOptions,
    /// Scales one op's backward contributions, to prove the check can fail.
    #[serde(skip)]
    pub fault: Option<(OpKind, f64)>,
}

impl GradCheckConfig {
    /// Two-class Micro network on 8×8 inputs.
    pub fn micro() -> Self {
        GradCheckConfig {
            model: NetworkConfig::micro().with_classes(2),
            image_size: 8,
            batch: 2,
            tolerance: 1e-4,
            fd: FdOptions::default(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub precision: Precision,
    pub step: f64,
    pub tolerance: f64,
    pub n_params: usize,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub passed: bool,
    pub failures: Vec<String>,
    pub params: Vec<ParamCheck>,
}

fn batch_loss(net: &Network, batch: &[(Tensor, usize)], fault: Option<(OpKind, f64)>) -> Result<(f64, ParamGrads)> {
    let mut total = 0.0;
    let mut grads = ParamGrads::zeros(net.store());
    for (image, label) in batch {
        let mut tape = Tape::new(Precision::F64);
        if let Some((kind, factor)) = fault {
            tape.inject_backward_fault(kind, factor);
        }
        let (loss, _) = net.loss(&mut tape, image, *label, &mut Forward::eval())?;
        total += tape.value(loss).data()[0];
        let g = tape.backward(loss)?;
        tape.param_grads_into(&g, &mut grads);
    }
    Ok((total, grads))
}

fn loss_only(net: &Network, batch: &[(Tensor, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (image, label) in batch {
        let mut tape = Tape::new(Precision::F64);
        let (loss, _) = net.loss(&mut tape, image, *label, &mut Forward::eval())?;
        total += tape.value(loss).data()[0];
    }
    Ok(total)
}

/// Checks every named parameter of a freshly initialised network in fp64.
pub fn grad_check_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let net = Network::new(cfg.model.clone(), cfg.fd.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.fd.seed ^ 0x6772_6164);
    let s = cfg.image_size;
    let batch: Vec<(Tensor, usize)> = (0..cfg.batch)
        .map(|i| {
            let data = (0..3 * s * s).map(|_| StandardNormal.sample(&mut rng)).collect();
            (Tensor::new(vec![3, s, s], data).expect("sized"), i % cfg.model.n_classes)
        })
        .collect();
    let (_, analytic) = batch_loss(&net, &batch, cfg.fault)?;
    let params = finite_difference_check(&net, |n| n.store_mut(), |n| loss_only(n, &batch), &analytic, &cfg.fd)?;

    let worst = params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("network has parameters");
    let failures: Vec<String> = params
        .iter()
        .filter(|p| p.max_rel_err.is_nan() || p.max_rel_err >= cfg.tolerance)
        .map(|p| p.name.clone())
        .collect();
    Ok(GradCheckReport {
        variant: cfg.model.variant.clone(),
        precision: Precision::F64,
        step: cfg.fd.step,
        tolerance: cfg.tolerance,
        n_params: net.store().len(),
        n_checked: params.len(),
        max_rel_err: worst.max_rel_err,
        worst_param: worst.name.clone(),
        passed: failures.is_empty(),
        failures,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let loss = |s: &ParamStore| Ok(s.value(w).data().iter().map(|x| x * x * x).sum::<f64>());
        let mut good = ParamGrads::zeros(&store);
        let g: Vec<f64> = store.value(w).data().iter().map(|x| 3.0 * x * x).collect();
        good.add_slice(w, &g);
        let opts = FdOptions::default();
        let ok = finite_difference_check(&store, |s| s, loss, &good, &opts).unwrap();
        assert!(ok[0].max_rel_err < 1e-8, "{ok:?}");
        let mut bad = ParamGrads::zeros(&store);
        bad.add_slice(w, &[g[0], g[1] * 1.01, g[2]]);
        let caught = finite_difference_check(&store, |s| s, loss, &bad, &opts).unwrap();
        assert!(caught[0].max_rel_err > 1e-3);
    }
}
