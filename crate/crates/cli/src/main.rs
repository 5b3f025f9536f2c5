//! `hgformer` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure
//! (non-finite values, failed gradient check).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hgformer::harness::ablation::{check_single_factor, run_ablation_with, ArmSet};
use hgformer::harness::bench::{bench_throughput, complexity_sweep, BenchConfig};
use hgformer::harness::gradcheck::{grad_check_suite, FdOptions, GradCheckConfig};
use hgformer::harness::{make_toy_dataset, train_with, ToyDatasetSpec, TrainConfig};
use hgformer::hypergraph::{Algorithm, ConstructionConfig, Distance, TokenSet, TopologyDump};
use hgformer::model::{Forward, Network, NetworkConfig};
use hgformer::tensor::{read_checkpoint_file, OpKind, Precision, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

/// Bumped whenever the synthetic generators change their output.
const SYNTHETIC_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "hgformer", version, about = "Hypergraph vision backbone: topology dumps, training, ablations, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a hypergraph over tokens and write it as JSON.
    Topology(TopologyArgs),
    /// Run one image through a network and write the logits.
    Forward(ForwardArgs),
    /// Compare tape gradients with central finite differences (fp64).
    Gradcheck(GradcheckArgs),
    /// Train on the toy dataset.
    Train(TrainArgs),
    /// Train several arms over several seeds and tabulate accuracy.
    Ablate(AblateArgs),
    /// Measure inference throughput and operation scaling.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Network variant: T, S, B or Micro.
    #[arg(long, default_value = "Micro")]
    variant: String,
    /// Hypergraph construction: cs-knn, knn, kmeans or dpc-knn.
    #[arg(long, default_value = "cs-knn")]
    algo: Algorithm,
    /// Member proximity: dot, cosine, euclidean or softmax.
    #[arg(long, default_value = "dot")]
    distance: Distance,
}

impl ModelArgs {
    fn config(&self, n_classes: Option<usize>) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::variant(&self.variant)?;
        cfg.construction = ConstructionConfig {
            algorithm: self.algo,
            distance: self.distance,
        };
        if let Some(n) = n_classes {
            cfg.n_classes = n;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Number of toy classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Seed of the dataset generator.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn spec(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            n_classes: self.classes,
            samples_per_class: self.samples_per_class,
            image_size: self.image_size,
            noise_std: self.noise_std,
            seed: self.data_seed,
        }
    }
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Peak learning rate after warmup.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Final learning rate of the cosine decay.
    #[arg(long, default_value_t = 1e-5)]
    min_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    warmup_epochs: usize,
    /// Seed for initialization, shuffling, flips and stochastic depth.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Disable random horizontal flips.
    #[arg(long)]
    no_flip: bool,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            seed: self.seed,
            precision: self.precision.into(),
            hflip: !self.no_flip,
            checkpoint: None,
        }
    }
}

#[derive(Args)]
struct TopologyArgs {
    /// HGFW tensor file with an `input` entry (N×C), or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    input: String,
    /// Token grid as HxW; defaults to 8x8 for synthetic input.
    #[arg(long)]
    grid: Option<String>,
    /// Channels of synthetic tokens.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Number of hyperedges.
    #[arg(long)]
    ne: usize,
    /// Members per hyperedge.
    #[arg(long)]
    k: usize,
    /// cs-knn, knn, kmeans or dpc-knn.
    #[arg(long, default_value = "cs-knn")]
    algo: Algorithm,
    /// dot, cosine, euclidean or softmax.
    #[arg(long, default_value = "dot")]
    distance: Distance,
    /// Seed for synthetic tokens and the randomized baselines.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForwardArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// HGFW tensor file with an `input` entry (3×H×W), or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    input: String,
    /// Side of the synthetic image.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Classifier outputs; defaults to the variant's.
    #[arg(long)]
    classes: Option<usize>,
    /// HGFW checkpoint to load instead of random initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "Micro")]
    variant: String,
    /// Run in fp64; gradient checks always do, the flag is accepted for clarity.
    #[arg(long)]
    fp64: bool,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Individually checked entries per parameter, besides one random direction.
    #[arg(long, default_value_t = 16)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Scale the backward rule of this op by 1.5 (mutation canary).
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON path; the report is printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Output directory for run_report.json, timing.json and checkpoint.hgfw.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Factor under test.
    #[arg(long, value_enum)]
    arms: ArmsArg,
    /// Seeds per arm, starting at --seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Output directory for ablation.csv, summary.json and arms.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmsArg {
    Construction,
    Distance,
    Architecture,
}

impl From<ArmsArg> for ArmSet {
    fn from(a: ArmsArg) -> Self {
        match a {
            ArmsArg::Construction => ArmSet::Construction,
            ArmsArg::Distance => ArmSet::Distance,
            ArmsArg::Architecture => ArmSet::Architecture,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 32)]
    input_size: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Also write complexity.json with operation-count scaling in N, C and Ne.
    #[arg(long)]
    sweep: bool,
    /// Output directory for bench.json, timing.json (and complexity.json).
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).context("grid must look like HxW")?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn normal_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::new(shape, data)?)
}

fn read_input(path: &str) -> Result<Vec<(String, Tensor)>> {
    let entries = read_checkpoint_file(Path::new(path)).with_context(|| format!("reading {path}"))?;
    if !entries.iter().any(|(n, _)| n == "input") {
        bail!("{path} has no `input` entry");
    }
    Ok(entries)
}

fn load_tokens(args: &TopologyArgs) -> Result<TokenSet> {
    if args.input == "synthetic" {
        let grid = args.grid.as_deref().map(parse_grid).transpose()?.unwrap_or((8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let nodes = normal_tensor(vec![grid.0 * grid.1, args.channels], &mut rng)?;
        let cls = normal_tensor(vec![args.channels], &mut rng)?;
        return Ok(TokenSet::new(nodes, cls, grid)?);
    }
    let entries = read_input(&args.input)?;
    let get = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
    let nodes = get("input").expect("checked");
    if nodes.rank() != 2 {
        bail!("topology input must be N×C, got shape {:?}", nodes.shape());
    }
    let (n, c) = (nodes.shape()[0], nodes.shape()[1]);
    // Without an explicit class token, the mean token stands in.
    let cls = match get("class_token") {
        Some(t) => t,
        None => {
            let mut mean = vec![0.0; c];
            for i in 0..n {
                for (m, v) in mean.iter_mut().zip(nodes.row(i)) {
                    *m += v / n as f64;
                }
            }
            Tensor::new(vec![c], mean)?
        }
    };
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side == n {
                (side, side)
            } else {
                (1, n)
            }
        }
    };
    Ok(TokenSet::new(nodes, cls, grid)?)
}

fn cmd_topology(args: TopologyArgs) -> Result<ExitCode> {
    let tokens = load_tokens(&args)?;
    let construction = ConstructionConfig {
        algorithm: args.algo,
        distance: args.distance,
    };
    let h = construction.build(&tokens, args.ne, args.k, args.seed)?;
    write_json(&args.out, &TopologyDump::new(&tokens, &h))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_forward(args: ForwardArgs) -> Result<ExitCode> {
    let cfg = args.model.config(args.classes)?;
    let mut net = Network::new(cfg, args.seed)?;
    if let Some(path) = &args.checkpoint {
        net.load(path).with_context(|| format!("loading {}", path.display()))?;
    }
    let (image, source) = if args.input == "synthetic" {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x696d_6167);
        let s = args.image_size;
        (normal_tensor(vec![net.config().in_channels, s, s], &mut rng)?, format!("synthetic-v{SYNTHETIC_VERSION}"))
    } else {
        let entries = read_input(&args.input)?;
        let t = entries.into_iter().find(|(n, _)| n == "input").expect("checked").1;
        (t, args.input.clone())
    };
    let mut tape = Tape::new(args.precision.into());
    let mut fwd = Forward::eval().recording();
    let logits = net.forward(&mut tape, &image, &mut fwd)?;
    let topologies: Vec<_> = fwd
        .topologies
        .unwrap_or_default()
        .iter()
        .map(|h| json!({"n_nodes": h.n_nodes(), "n_edges": h.n_edges(), "k": h.k()}))
        .collect();
    let report = json!({
        "variant": net.config().variant,
        "input": source,
        "param_count": net.param_count(),
        "stage_grids": fwd.grids.iter().map(|g| [g.0, g.1]).collect::<Vec<_>>(),
        "block_topologies": topologies,
        "logits": tape.value(logits).data(),
    });
    write_json(&args.out, &report)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let fault = match &args.corrupt {
        Some(name) => Some((
            OpKind::parse(name).ok_or_else(|| {
                let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                anyhow::anyhow!("unknown op {name}, expected one of {}", known.join(", "))
            })?,
            1.5,
        )),
        None => None,
    };
    let cfg = GradCheckConfig {
        model: NetworkConfig::variant(&args.variant)?.with_classes(args.classes),
        image_size: args.image_size,
        batch: 2,
        tolerance: args.tolerance,
        fd: FdOptions {
            step: args.step,
            coords_per_param: args.coords,
            seed: args.seed,
        },
        fault,
    };
    let report = grad_check_suite(&cfg)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if report.passed {
        eprintln!("gradcheck passed: {} parameters, max rel. err {:.3e}", report.n_checked, report.max_rel_err);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck FAILED for: {}", report.failures.join(", "));
        Ok(ExitCode::from(2))
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let data = make_toy_dataset(&args.data.spec())?;
    let model = args.model.config(Some(args.data.classes))?;
    ensure_dir(&args.out)?;
    let mut cfg = args.optim.config();
    cfg.checkpoint = Some(args.out.join("checkpoint.hgfw"));
    let outcome = train_with(&model, &data, &cfg, |s| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  lr {:.2e}",
            s.epoch, s.train_loss, s.train_acc, s.val_acc, s.lr
        );
    })?;
    write_json(&args.out.join("run_report.json"), &outcome.report)?;
    write_json(&args.out.join("timing.json"), &outcome.report.timing)?;
    eprintln!("final val accuracy {:.4}", outcome.report.final_val_acc);
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let data = make_toy_dataset(&args.data.spec())?;
    let base = args.model.config(Some(args.data.classes))?;
    let set: ArmSet = args.arms.into();
    let arms = set.arms(&base);
    check_single_factor(&arms, set.factor_fields())?;
    ensure_dir(&args.out)?;
    let table = run_ablation_with(&arms, &data, &args.optim.config(), args.seeds, |r| {
        eprintln!("{} seed {}: {:.4}", r.arm, r.seed, r.final_acc);
    })?;
    fs::write(args.out.join("ablation.csv"), table.to_csv())?;
    write_json(&args.out.join("summary.json"), &table.summary)?;
    write_json(&args.out.join("arms.json"), &arms)?;
    for s in &table.summary {
        eprintln!("{:<20} {:.4} ± {:.4}", s.arm, s.mean_acc, s.std_acc);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        model: args.model.config(None)?,
        input_size: args.input_size,
        batch: args.batch,
        warmup_iters: args.warmup,
        timed_iters: args.iters,
        seed: args.seed,
        precision: args.precision.into(),
    };
    ensure_dir(&args.out)?;
    let report = bench_throughput(&cfg)?;
    write_json(&args.out.join("bench.json"), &report)?;
    write_json(&args.out.join("timing.json"), &report.timing)?;
    eprintln!("{:.1} images/s", report.timing.images_per_s);
    if args.sweep {
        write_json(&args.out.join("complexity.json"), &complexity_sweep(args.seed)?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HGF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("HGF_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hgformer::Error>() {
        Some(hgformer::Error::Numerical(_) | hgformer::Error::NonFinite { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Topology(a) => cmd_topology(a),
        Command::Forward(a) => cmd_forward(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
