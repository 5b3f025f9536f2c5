use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::dataset::Dataset;
use super::train::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::hypergraph::{Algorithm, Distance};
use crate::model::{BlockKind, NetworkConfig};

/// Families of arms, each varying a single factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmSet {
    Construction,
    Distance,
    Architecture,
}

impl ArmSet {
    pub const ALL: [ArmSet; 3] = [ArmSet::Construction, ArmSet::Distance, ArmSet::Architecture];

    pub fn name(self) -> &'static str {
        match self {
            ArmSet::Construction => "construction",
            ArmSet::Distance => "distance",
            ArmSet::Architecture => "architecture",
        }
    }

    /// Config fields the arms of this set may differ in.
    pub fn factor_fields(self) -> &'static [&'static str] {
        match self {
            ArmSet::Construction => &["construction.algorithm"],
            ArmSet::Distance => &["construction.distance"],
            // The single-stage arm widens its feedforward to keep the parameter budget.
            ArmSet::Architecture => &["block", "mlp_ratio"],
        }
    }

    pub fn arms(self, base: &NetworkConfig) -> Vec<Arm> {
        match self {
            ArmSet::Construction => Algorithm::ALL
                .iter()
                .map(|&a| {
                    let mut model = base.clone();
                    model.construction.algorithm = a;
                    Arm::new(a.name(), model)
                })
                .collect(),
            ArmSet::Distance => Distance::ALL
                .iter()
                .map(|&d| {
                    let mut model = base.clone();
                    model.construction.distance = d;
                    Arm::new(d.name(), model)
                })
                .collect(),
            ArmSet::Architecture => BlockKind::ALL
                .iter()
                .map(|&k| {
                    let model = match k {
                        BlockKind::Hga => base.clone(),
                        BlockKind::VanillaAttention => base.vanilla_attention_variant(),
                        BlockKind::SingleStage => base.single_stage_variant(),
                    };
                    Arm::new(k.name(), model)
                })
                .collect(),
        }
    }
}

impl FromStr for ArmSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArmSet::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown arm set {s}, expected construction, distance or architecture")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub model: NetworkConfig,
}

impl Arm {
    pub fn new(name: impl Into<String>, model: NetworkConfig) -> Self {
        Arm {
            name: name.into(),
            model,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Dotted field paths whose values differ between two configs.
pub fn config_diff(a: &NetworkConfig, b: &NetworkConfig) -> Vec<String> {
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    flatten("", &serde_json::to_value(a).expect("config serializes"), &mut fa);
    flatten("", &serde_json::to_value(b).expect("config serializes"), &mut fb);
    fa.into_iter()
        .zip(fb)
        .filter(|((_, x), (_, y))| x != y)
        .map(|((k, _), _)| k)
        .collect()
}

/// Fails unless every arm differs from the first only in `allowed` fields.
pub fn check_single_factor(arms: &[Arm], allowed: &[&str]) -> Result<()> {
    let Some(first) = arms.first() else { return Ok(()) };
    for arm in &arms[1..] {
        let extra: Vec<String> = config_diff(&first.model, &arm.model)
            .into_iter()
            .filter(|k| !allowed.contains(&k.as_str()))
            .collect();
        if !extra.is_empty() {
            return Err(Error::config(format!(
                "arm {} differs from {} in {}",
                arm.name,
                first.name,
                extra.join(", ")
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub final_acc: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n_seeds: usize,
    pub mean_acc: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<ArmSummary>,
}

impl AblationTable {
    /// `arm,seed,final_acc,wall_s`, one line per run.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,seed,final_acc,wall_s\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{:.3}", r.arm, r.seed, r.final_acc, r.wall_s);
        }
        out
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Trains every arm with seeds `cfg.seed .. cfg.seed + n_seeds` on the same data.
pub fn run_ablation(arms: &[Arm], data: &Dataset, cfg: &TrainConfig, n_seeds: usize) -> Result<AblationTable> {
    run_ablation_with(arms, data, cfg, n_seeds, |_| {})
}

pub fn run_ablation_with(
    arms: &[Arm],
    data: &Dataset,
    cfg: &TrainConfig,
    n_seeds: usize,
    mut on_run: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if arms.len() < 2 {
        return Err(Error::config("an ablation needs at least two arms"));
    }
    if n_seeds == 0 {
        return Err(Error::config("n_seeds must be at least 1"));
    }
    let names: BTreeSet<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    if names.len() != arms.len() {
        return Err(Error::config("arm names must be unique"));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for arm in arms {
        let mut accs = Vec::with_capacity(n_seeds);
        for i in 0..n_seeds {
            let run_cfg = TrainConfig {
                seed: cfg.seed + i as u64,
                checkpoint: None,
                ..cfg.clone()
            };
            let outcome = train(&arm.model, data, &run_cfg)?;
            let row = AblationRow {
                arm: arm.name.clone(),
                seed: run_cfg.seed,
                final_acc: outcome.report.final_val_acc,
                wall_s: outcome.report.timing.wall_s,
            };
            on_run(&row);
            accs.push(row.final_acc);
            rows.push(row);
        }
        let (mean_acc, std_acc) = mean_std(&accs);
        summary.push(ArmSummary {
            arm: arm.name.clone(),
            n_seeds,
            mean_acc,
            std_acc,
        });
    }
    Ok(AblationTable { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_sets_vary_one_factor() {
        let base = NetworkConfig::micro();
        for set in ArmSet::ALL {
            let arms = set.arms(&base);
            check_single_factor(&arms, set.factor_fields()).unwrap();
            assert!(arms.len() >= 3);
        }
        let arms = ArmSet::Construction.arms(&base);
        assert_eq!(config_diff(&arms[0].model, &arms[1].model), vec!["construction.algorithm"]);
    }

    #[test]
    fn extra_difference_rejected() {
        let base = NetworkConfig::micro();
        let mut other = base.clone();
        other.construction.algorithm = Algorithm::Knn;
        other.drop_path_rate = 0.2;
        let arms = [Arm::new("a", base), Arm::new("b", other)];
        let err = check_single_factor(&arms, ArmSet::Construction.factor_fields()).unwrap_err();
        assert!(err.to_string().contains("drop_path_rate"));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]).1, 0.0);
    }
}
