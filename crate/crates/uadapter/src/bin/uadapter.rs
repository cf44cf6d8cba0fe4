//! Command-line entry point: dataset generation, backbone pretraining,
//! adapter fine-tuning, evaluation, experiment sweeps, and a gradient audit.
//! Every command is deterministic under --seed and writes a manifest next to
//! its primary output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use uadapter::adapter::{AdapterKind, ScaleMode};
use uadapter::backbone::{
    edgepred_auc, freeze, pretrain_edgepred, unfreeze, Backbone, PretrainConfig,
};
use uadapter::checkpoint::{load, save, snapshot, write_atomic, ModelBundle};
use uadapter::graph::io::{load_jsonl, save_jsonl};
use uadapter::graph::synthetic::{generate, PlantedRule, SyntheticConfig};
use uadapter::graph::{split_dataset, DatasetSplit, Graph};
use uadapter::numerics::params::ParamSet;
use uadapter::training::protocols::{
    bottleneck_sweep, robustness_sweep, scaling_ablation, size_sweep, PerturbKind,
    ROBUSTNESS_LEVELS, SCALING_GRID,
};
use uadapter::training::{evaluate_model, finetune, model_gradcheck, FineTuneConfig};
use uadapter::{Error, Result, RngTree};

#[derive(Parser)]
#[command(name = "uadapter", version, about = "Gaussian adapters on frozen GIN backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled graph dataset as JSONL.
    GenData(GenDataArgs),
    /// Pretrain a GIN backbone with edge prediction, freeze it, save it.
    Pretrain(PretrainArgs),
    /// Fine-tune adapters (or everything with --adapter none) on a dataset.
    Finetune(FinetuneArgs),
    /// Evaluate a model checkpoint: loss and ROC-AUC on a dataset split.
    Eval(EvalArgs),
    /// Run an experiment sweep and write its CSV.
    #[command(subcommand)]
    Sweep(SweepCommand),
    /// Audit tape gradients against finite differences on a small model.
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::GenData(args) => cmd_gen_data(args, started),
        Command::Pretrain(args) => cmd_pretrain(args, started),
        Command::Finetune(args) => cmd_finetune(args, started),
        Command::Eval(args) => cmd_eval(args, started),
        Command::Sweep(cmd) => cmd_sweep(cmd, started),
        Command::Gradcheck(args) => cmd_gradcheck(args, started),
    }
}

/// Provenance record written next to every command output. The duration is
/// informational; artifact bytes themselves depend only on flags and seed.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    version: String,
    duration_secs: f64,
}

fn write_manifest(
    command: &str,
    config: &impl Serialize,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(config)
            .map_err(|e| Error::invalid("manifest", e.to_string()))?,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::invalid("manifest", e.to_string()))?;
    bytes.push(b'\n');
    let primary = outputs
        .first()
        .expect("every manifest-writing command has an output");
    let path = manifest_path(primary);
    write_atomic(&path, &bytes)
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".manifest.json");
    output.with_file_name(name)
}

/// JSON config escape hatch: missing file option means all defaults; flags
/// override whatever the file sets.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::invalid(p.display().to_string(), e.to_string()))
        }
    }
}

fn override_opt<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    None,
    Deterministic,
    Gaussian,
}

impl From<AdapterArg> for AdapterKind {
    fn from(a: AdapterArg) -> Self {
        match a {
            AdapterArg::None => AdapterKind::None,
            AdapterArg::Deterministic => AdapterKind::Deterministic,
            AdapterArg::Gaussian => AdapterKind::Gaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbArg {
    Delete,
    Add,
}

impl From<PerturbArg> for PerturbKind {
    fn from(p: PerturbArg) -> Self {
        match p {
            PerturbArg::Delete => PerturbKind::Delete,
            PerturbArg::Add => PerturbKind::Add,
        }
    }
}

impl std::fmt::Display for PerturbArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PerturbArg::Delete => "delete",
            PerturbArg::Add => "add",
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    DegreeWeightedFeature,
    FeatureMeanOnly,
}

impl From<RuleArg> for PlantedRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::DegreeWeightedFeature => PlantedRule::DegreeWeightedFeature,
            RuleArg::FeatureMeanOnly => PlantedRule::FeatureMeanOnly,
        }
    }
}

/// "learnable" or a finite constant.
fn parse_scale(s: &str) -> std::result::Result<ScaleMode, String> {
    if s == "learnable" {
        return Ok(ScaleMode::Learnable);
    }
    s.parse::<f64>()
        .map(ScaleMode::Fixed)
        .map_err(|_| format!("expected 'learnable' or a number, got '{s}'"))
}

// ---------------------------------------------------------------- gen-data

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataSpec {
    seed: u64,
    synthetic: SyntheticConfig,
}

impl Default for GenDataSpec {
    fn default() -> Self {
        GenDataSpec {
            seed: 0,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_graphs: Option<usize>,
    #[arg(long)]
    nodes_min: Option<usize>,
    #[arg(long)]
    nodes_max: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    d_edge: Option<usize>,
    /// Per-pair edge probability; omitted targets mean degree ~4.
    #[arg(long)]
    edge_prob: Option<f64>,
    #[arg(long)]
    missing_prob: Option<f64>,
    #[arg(long)]
    rule: Option<RuleArg>,
}

fn cmd_gen_data(args: GenDataArgs, started: Instant) -> Result<()> {
    let mut spec: GenDataSpec = load_config(args.config.as_deref())?;
    override_opt(&mut spec.seed, args.seed);
    override_opt(&mut spec.synthetic.n_graphs, args.n_graphs);
    override_opt(&mut spec.synthetic.n_nodes_min, args.nodes_min);
    override_opt(&mut spec.synthetic.n_nodes_max, args.nodes_max);
    override_opt(&mut spec.synthetic.d_in, args.d_in);
    override_opt(&mut spec.synthetic.n_tasks, args.n_tasks);
    override_opt(&mut spec.synthetic.d_edge, args.d_edge);
    override_opt(&mut spec.synthetic.edge_prob, args.edge_prob.map(Some));
    override_opt(&mut spec.synthetic.missing_prob, args.missing_prob);
    override_opt(&mut spec.synthetic.rule, args.rule.map(Into::into));

    let graphs = generate(&RngTree::new(spec.seed), &spec.synthetic)?;
    save_jsonl(&args.out, &graphs)?;
    let reloaded = load_jsonl(&args.out)?;
    if reloaded.len() != graphs.len() {
        return Err(Error::invalid("gen-data", "written file failed to round-trip"));
    }
    write_manifest("gen-data", &spec, spec.seed, &[], &[&args.out], started)?;
    println!("wrote {} graphs to {}", graphs.len(), args.out.display());
    Ok(())
}

// ---------------------------------------------------------------- pretrain

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainSpec {
    n_layers: usize,
    d_hidden: usize,
    pretrain: PretrainConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            n_layers: 2,
            d_hidden: 16,
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// Training dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
}

fn cmd_pretrain(args: PretrainArgs, started: Instant) -> Result<()> {
    let mut spec: PretrainSpec = load_config(args.config.as_deref())?;
    override_opt(&mut spec.pretrain.seed, args.seed);
    override_opt(&mut spec.pretrain.lr, args.lr);
    override_opt(&mut spec.pretrain.epochs, args.epochs);
    override_opt(&mut spec.pretrain.batch_size, args.batch_size);
    override_opt(&mut spec.n_layers, args.n_layers);
    override_opt(&mut spec.d_hidden, args.d_hidden);

    let dataset = load_jsonl(&args.data)?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::invalid("pretrain", "empty dataset"))?;
    let mut params = ParamSet::new();
    let mut init_rng = RngTree::new(spec.pretrain.seed).stream("backbone-init");
    let mut backbone = Backbone::init(
        &mut params,
        &mut init_rng,
        spec.n_layers,
        first.d_in,
        spec.d_hidden,
        first.d_edge,
    );
    pretrain_edgepred(&mut params, &backbone, &dataset, &spec.pretrain)?;
    let auc = edgepred_auc(&mut params, &backbone, &dataset, spec.pretrain.seed)?;
    freeze(&mut params, &mut backbone);
    save(&args.out, &snapshot(&params, &backbone, None, None))?;
    write_manifest(
        "pretrain",
        &spec,
        spec.pretrain.seed,
        &[&args.data],
        &[&args.out],
        started,
    )?;
    println!(
        "pretrained {} layers of width {}; edge prediction AUC {auc:.4}; frozen checkpoint at {}",
        spec.n_layers,
        spec.d_hidden,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- finetune

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneSpec {
    tune: FineTuneConfig,
    split_seed: u64,
    train_frac: f64,
    val_frac: f64,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            tune: FineTuneConfig::default(),
            split_seed: 0,
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

#[derive(Args, Clone)]
struct TuneFlags {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_mid: Option<usize>,
    /// Gaussian noise draws per batch; their losses are averaged.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    adapter: Option<AdapterArg>,
    /// 'learnable' or a fixed constant.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<ScaleMode>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
}

fn resolve_spec(flags: &TuneFlags) -> Result<FinetuneSpec> {
    let mut spec: FinetuneSpec = load_config(flags.config.as_deref())?;
    override_opt(&mut spec.tune.seed, flags.seed);
    override_opt(&mut spec.tune.lr, flags.lr);
    override_opt(&mut spec.tune.epochs, flags.epochs);
    override_opt(&mut spec.tune.batch_size, flags.batch_size);
    override_opt(&mut spec.tune.d_mid, flags.d_mid);
    override_opt(&mut spec.tune.k, flags.k);
    override_opt(&mut spec.tune.adapter_kind, flags.adapter.map(Into::into));
    override_opt(&mut spec.tune.scale_mode, flags.scale);
    override_opt(&mut spec.split_seed, flags.split_seed);
    override_opt(&mut spec.train_frac, flags.train_frac);
    override_opt(&mut spec.val_frac, flags.val_frac);
    Ok(spec)
}

fn split_of(spec: &FinetuneSpec, n: usize) -> Result<DatasetSplit> {
    split_dataset(
        n,
        spec.train_frac,
        spec.val_frac,
        &mut ChaCha8Rng::seed_from_u64(spec.split_seed),
    )
}

/// Loads a pretraining checkpoint, rejecting anything that already carries
/// adapters or a head; fine-tuning re-registers those parameters itself.
fn load_backbone_only(path: &Path) -> Result<ModelBundle> {
    let bundle = load(path)?.instantiate()?;
    if bundle.adapters.is_some() || bundle.head.is_some() {
        return Err(Error::Contract(format!(
            "{} is not a backbone-only checkpoint",
            path.display()
        )));
    }
    Ok(bundle)
}

#[derive(Args)]
struct FinetuneArgs {
    /// Labeled dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Frozen backbone checkpoint from `pretrain`.
    #[arg(long)]
    backbone: PathBuf,
    /// Output checkpoint (backbone + adapters + head).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch metrics CSV; defaults to the output path with .record.csv.
    #[arg(long)]
    record: Option<PathBuf>,
    #[command(flatten)]
    tune: TuneFlags,
}

fn cmd_finetune(args: FinetuneArgs, started: Instant) -> Result<()> {
    let spec = resolve_spec(&args.tune)?;
    let dataset = load_jsonl(&args.data)?;
    let split = split_of(&spec, dataset.len())?;
    let mut bundle = load_backbone_only(&args.backbone)?;
    if spec.tune.adapter_kind == AdapterKind::None {
        unfreeze(&mut bundle.params, &mut bundle.backbone);
    }
    let (adapters, head, record) = finetune(
        &mut bundle.params,
        &bundle.backbone,
        &spec.tune,
        &dataset,
        &split,
    )?;
    let record_path = args
        .record
        .clone()
        .unwrap_or_else(|| args.out.with_extension("record.csv"));
    save(
        &args.out,
        &snapshot(&bundle.params, &bundle.backbone, adapters.as_ref(), Some(&head)),
    )?;
    write_atomic(&record_path, record.to_csv().as_bytes())?;
    write_manifest(
        "finetune",
        &spec,
        spec.tune.seed,
        &[&args.data, &args.backbone],
        &[&args.out, &record_path],
        started,
    )?;
    match (record.best_epoch, record.final_test_auc) {
        (Some(best), Some(auc)) => {
            println!("best epoch {best}: test AUC {auc:.4}; checkpoint at {}", args.out.display())
        }
        _ => println!("no training epochs ran; checkpoint at {}", args.out.display()),
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

impl std::fmt::Display for SplitArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitArg::Train => "train",
            SplitArg::Validation => "validation",
            SplitArg::Test => "test",
            SplitArg::All => "all",
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Which part of the dataset to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Metrics JSON output; omit to print only.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Serialize)]
struct EvalSpec {
    split: SplitArg,
    split_seed: u64,
    train_frac: f64,
    val_frac: f64,
}

fn cmd_eval(args: EvalArgs, started: Instant) -> Result<()> {
    let dataset = load_jsonl(&args.data)?;
    let mut bundle = load(&args.model)?.instantiate()?;
    let head = bundle
        .head
        .clone()
        .ok_or_else(|| Error::Contract("eval needs a checkpoint with a classifier head".to_string()))?;
    let adapters = bundle.adapters.clone();
    let indices: Vec<usize> = match args.split {
        SplitArg::All => (0..dataset.len()).collect(),
        part => {
            let split = split_dataset(
                dataset.len(),
                args.train_frac,
                args.val_frac,
                &mut ChaCha8Rng::seed_from_u64(args.split_seed),
            )?;
            match part {
                SplitArg::Train => split.train,
                SplitArg::Validation => split.validation,
                SplitArg::Test => split.test,
                SplitArg::All => unreachable!(),
            }
        }
    };
    let graphs: Vec<&Graph> = indices.iter().map(|&i| &dataset[i]).collect();
    let eval = evaluate_model(&mut bundle.params, &bundle.backbone, adapters.as_ref(), &head, &graphs)?;
    println!(
        "{} graphs: loss {:.6}, macro AUC {:.4}",
        eval.n_graphs, eval.loss, eval.macro_auc
    );
    for (t, auc) in eval.per_task_auc.iter().enumerate() {
        match auc {
            Some(a) => println!("  task {t}: AUC {a:.4}"),
            None => println!("  task {t}: single-class, skipped"),
        }
    }
    if let Some(out) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&eval)
            .map_err(|e| Error::invalid("eval", e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(out, &bytes)?;
        let spec = EvalSpec {
            split: args.split,
            split_seed: args.split_seed,
            train_frac: args.train_frac,
            val_frac: args.val_frac,
        };
        write_manifest(
            "eval",
            &spec,
            args.split_seed,
            &[&args.data, &args.model],
            &[out],
            started,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Subcommand)]
enum SweepCommand {
    /// Evaluate one trained model under edge deletion/addition noise.
    Robustness(RobustnessArgs),
    /// Fixed scale grid plus a learnable-scale run.
    Scaling(ScalingArgs),
    /// Bottleneck width grid.
    Bottleneck(BottleneckArgs),
    /// Training-set size fractions.
    Size(SizeArgs),
}

fn cmd_sweep(cmd: SweepCommand, started: Instant) -> Result<()> {
    match cmd {
        SweepCommand::Robustness(args) => cmd_sweep_robustness(args, started),
        SweepCommand::Scaling(args) => cmd_sweep_scaling(args, started),
        SweepCommand::Bottleneck(args) => cmd_sweep_bottleneck(args, started),
        SweepCommand::Size(args) => cmd_sweep_size(args, started),
    }
}

#[derive(Args)]
struct RobustnessArgs {
    /// Labeled dataset (JSONL); the test split is perturbed.
    #[arg(long)]
    data: PathBuf,
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = ROBUSTNESS_LEVELS)]
    levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_enum, default_values_t = [PerturbArg::Delete, PerturbArg::Add])]
    perturb: Vec<PerturbArg>,
    /// Perturbation seeds; outcomes are aggregated across them.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Serialize)]
struct RobustnessSpec {
    levels: Vec<f64>,
    perturb: Vec<PerturbKind>,
    seeds: Vec<u64>,
    split_seed: u64,
    train_frac: f64,
    val_frac: f64,
}

fn cmd_sweep_robustness(args: RobustnessArgs, started: Instant) -> Result<()> {
    let dataset = load_jsonl(&args.data)?;
    let mut bundle = load(&args.model)?.instantiate()?;
    let split = split_dataset(
        dataset.len(),
        args.train_frac,
        args.val_frac,
        &mut ChaCha8Rng::seed_from_u64(args.split_seed),
    )?;
    let test_graphs: Vec<Graph> = split.test.iter().map(|&i| dataset[i].clone()).collect();
    let kinds: Vec<PerturbKind> = args.perturb.iter().map(|&p| p.into()).collect();
    let result = robustness_sweep(&mut bundle, &test_graphs, &args.levels, &kinds, &args.seeds)?;
    write_atomic(&args.out, result.to_csv().as_bytes())?;
    let spec = RobustnessSpec {
        levels: args.levels,
        perturb: kinds,
        seeds: args.seeds.clone(),
        split_seed: args.split_seed,
        train_frac: args.train_frac,
        val_frac: args.val_frac,
    };
    write_manifest(
        "sweep robustness",
        &spec,
        args.seeds[0],
        &[&args.data, &args.model],
        &[&args.out],
        started,
    )?;
    print_sweep(&result.to_csv());
    Ok(())
}

#[derive(Args)]
struct ScalingArgs {
    /// Labeled dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Frozen backbone checkpoint from `pretrain`.
    #[arg(long)]
    backbone: PathBuf,
    /// Output CSV; per-run scale values go next to it as .runs.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = SCALING_GRID)]
    fixed: Vec<f64>,
    /// Fine-tuning seeds, one full run per seed per grid point.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[command(flatten)]
    tune: TuneFlags,
}

#[derive(Serialize)]
struct GridSpec<T: Serialize> {
    template: FinetuneSpec,
    grid: Vec<T>,
    seeds: Vec<u64>,
}

fn cmd_sweep_scaling(args: ScalingArgs, started: Instant) -> Result<()> {
    let spec = resolve_spec(&args.tune)?;
    let dataset = load_jsonl(&args.data)?;
    let split = split_of(&spec, dataset.len())?;
    let bundle = load_backbone_only(&args.backbone)?;
    let result = scaling_ablation(
        &bundle.params,
        &bundle.backbone,
        &spec.tune,
        &dataset,
        &split,
        &args.fixed,
        &args.seeds,
    )?;
    write_atomic(&args.out, result.sweep.to_csv().as_bytes())?;
    let runs_path = args.out.with_extension("runs.json");
    let mut bytes = serde_json::to_vec_pretty(&result.runs)
        .map_err(|e| Error::invalid("sweep scaling", e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(&runs_path, &bytes)?;
    let grid_spec = GridSpec {
        template: spec,
        grid: args.fixed,
        seeds: args.seeds.clone(),
    };
    write_manifest(
        "sweep scaling",
        &grid_spec,
        args.seeds[0],
        &[&args.data, &args.backbone],
        &[&args.out, &runs_path],
        started,
    )?;
    print_sweep(&result.sweep.to_csv());
    Ok(())
}

#[derive(Args)]
struct BottleneckArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frozen backbone checkpoint from `pretrain`.
    #[arg(long)]
    backbone: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5, 15])]
    grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[command(flatten)]
    tune: TuneFlags,
}

fn cmd_sweep_bottleneck(args: BottleneckArgs, started: Instant) -> Result<()> {
    let spec = resolve_spec(&args.tune)?;
    let dataset = load_jsonl(&args.data)?;
    let split = split_of(&spec, dataset.len())?;
    let bundle = load_backbone_only(&args.backbone)?;
    let result = bottleneck_sweep(
        &bundle.params,
        &bundle.backbone,
        &spec.tune,
        &dataset,
        &split,
        &args.grid,
        &args.seeds,
    )?;
    write_atomic(&args.out, result.to_csv().as_bytes())?;
    let grid_spec = GridSpec {
        template: spec,
        grid: args.grid,
        seeds: args.seeds.clone(),
    };
    write_manifest(
        "sweep bottleneck",
        &grid_spec,
        args.seeds[0],
        &[&args.data, &args.backbone],
        &[&args.out],
        started,
    )?;
    print_sweep(&result.to_csv());
    Ok(())
}

#[derive(Args)]
struct SizeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frozen backbone checkpoint from `pretrain`.
    #[arg(long)]
    backbone: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.25, 0.5, 1.0])]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    #[command(flatten)]
    tune: TuneFlags,
}

fn cmd_sweep_size(args: SizeArgs, started: Instant) -> Result<()> {
    let spec = resolve_spec(&args.tune)?;
    let dataset = load_jsonl(&args.data)?;
    let split = split_of(&spec, dataset.len())?;
    let bundle = load_backbone_only(&args.backbone)?;
    let result = size_sweep(
        &bundle.params,
        &bundle.backbone,
        &spec.tune,
        &dataset,
        &split,
        &args.fractions,
        &args.seeds,
    )?;
    write_atomic(&args.out, result.to_csv().as_bytes())?;
    let grid_spec = GridSpec {
        template: spec,
        grid: args.fractions,
        seeds: args.seeds.clone(),
    };
    write_manifest(
        "sweep size",
        &grid_spec,
        args.seeds[0],
        &[&args.data, &args.backbone],
        &[&args.out],
        started,
    )?;
    print_sweep(&result.to_csv());
    Ok(())
}

fn print_sweep(csv: &str) {
    print!("{csv}");
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Report JSON output; omit to print only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Self-test fixture: corrupt this group's gradient so the check fails.
    #[arg(long, hide = true)]
    corrupt_group: Option<String>,
}

#[derive(Serialize)]
struct GradcheckSpec {
    seed: u64,
    tol: f64,
    corrupt_group: Option<String>,
}

fn cmd_gradcheck(args: GradcheckArgs, started: Instant) -> Result<()> {
    let report = model_gradcheck(args.seed, args.tol, args.corrupt_group.as_deref())?;
    print!("{}", report.render());
    if let Some(out) = &args.out {
        let mut bytes = serde_json::to_vec_pretty(&report)
            .map_err(|e| Error::invalid("gradcheck", e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(out, &bytes)?;
        let spec = GradcheckSpec {
            seed: args.seed,
            tol: args.tol,
            corrupt_group: args.corrupt_group.clone(),
        };
        write_manifest("gradcheck", &spec, args.seed, &[], &[out], started)?;
    }
    if !report.passed {
        return Err(Error::invalid("gradcheck", "gradient check failed"));
    }
    Ok(())
}
