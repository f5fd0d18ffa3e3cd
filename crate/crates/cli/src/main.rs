//! `hypercol`: generate synthetic data, train, predict, evaluate, run
//! ablations and benchmarks.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error,
//! 3 non-finite values. `HYPERCOL_THREADS` sets the worker thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hypercol::experiment::{
    default_variants, export_heatmaps, predict_all, run_ablation, train, write_evaluation, write_predictions, evaluate,
    ExperimentConfig, Model, Splits, Task,
};
use hypercol::hypercolumn::{bench_paths, AuxFeatures, BenchConfig, HypercolumnSpec, TapEntry};
use hypercol::io::{atomic_write, write_json};
use hypercol::synthdata::{load_dataset, save_dataset, Dataset};
use hypercol::Error;

const THREADS_VAR: &str = "HYPERCOL_THREADS";

#[derive(Parser)]
#[command(name = "hypercol", version, about = "Hypercolumn pixel classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default experiment config for a task.
    Init {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Destination TOML file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic dataset into <output>/data.
    Generate(RunArgs),
    /// Train a model into <output>/model.
    Train(RunArgs),
    /// Write test-split predictions and heatmaps into <output>/predict.
    Predict(RunArgs),
    /// Predict and evaluate; metrics, PR curves and heatmaps go to <output>/eval.
    Eval(RunArgs),
    /// Train and evaluate ablation variants into <output>/ablation.
    Ablate(RunArgs),
    /// Time naive descriptor scoring against the fast path.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sds,
    Keypoint,
    Part,
    System2,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Sds => Task::Sds,
            TaskArg::Keypoint => Task::Keypoint,
            TaskArg::Part => Task::Part,
            TaskArg::System2 => Task::System2,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the classifier grid size.
    #[arg(long)]
    k: Option<usize>,
    /// Dataset directory (default <output>/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model directory (default <output>/model).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Accept config-hash mismatches between config, dataset and model.
    #[arg(long)]
    force: bool,
    /// Test scenes to export heatmaps for.
    #[arg(long, default_value_t = 2)]
    heatmap_scenes: usize,
    /// Detections per scene to export heatmaps for.
    #[arg(long, default_value_t = 3)]
    heatmap_detections: usize,
    /// Ablation variants to run (comma separated; default all).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    channels: usize,
    /// Side of the square tap.
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 50)]
    resolution: usize,
    #[arg(long, default_value_t = 1)]
    neighborhood: usize,
    #[arg(long, default_value_t = 25)]
    classifiers: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bench.csv and bench.json.
    #[arg(long, default_value = "bench")]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

struct Paths {
    output: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, Paths), Failure> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut config = ExperimentConfig::from_toml(&text).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(o) = &args.output {
        config.output = o.clone();
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(k) = args.k {
        config.grid.k = k;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let output = config.output.clone();
    let paths = Paths {
        data: args.data.clone().unwrap_or_else(|| output.join("data")),
        model: args.model.clone().unwrap_or_else(|| output.join("model")),
        output,
    };
    Ok((config, paths))
}

fn load_splits(config: &ExperimentConfig, paths: &Paths, force: bool) -> Result<Splits, Failure> {
    let dataset = load_dataset(&paths.data)?;
    Ok(Splits::from_dataset(config, dataset, force)?)
}

fn load_model(config: &ExperimentConfig, paths: &Paths, splits: &Splits, force: bool) -> Result<Model, Failure> {
    let model = Model::load(&paths.model)?;
    if !force {
        let h = config.hash()?;
        if model.config_hash != h {
            return Err(Error::HashMismatch {
                expected: h,
                found: model.config_hash,
            }
            .into());
        }
        if model.dataset_hash != splits.dataset_hash {
            return Err(Error::HashMismatch {
                expected: splits.dataset_hash.clone(),
                found: model.dataset_hash,
            }
            .into());
        }
    }
    model.check_layout(config)?;
    Ok(model)
}

fn cmd_init(task: TaskArg, out: &Path) -> CmdResult {
    let config = ExperimentConfig::new(task.into());
    atomic_write(out, config.to_toml()?.as_bytes())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_generate(args: &RunArgs) -> CmdResult {
    let (config, paths) = load_config(args)?;
    let d = &config.data;
    let dataset = Dataset::build(&d.scene, &d.noise, d.train_scenes + d.test_scenes)?;
    save_dataset(&dataset, &paths.data)?;
    let s = &dataset.manifest.stats;
    println!(
        "wrote {} scenes ({} instances) to {}; candidate IoU >= 0.7: {}, < 0.5: {}",
        s.scenes,
        s.instances,
        paths.data.display(),
        s.candidate_iou.at_least_07,
        s.candidate_iou.below_05
    );
    Ok(())
}

fn cmd_train(args: &RunArgs) -> CmdResult {
    let (config, paths) = load_config(args)?;
    let splits = load_splits(&config, &paths, args.force)?;
    let model = train(&config, &splits)?;
    model.save(&paths.model)?;
    println!(
        "trained {} head(s) [{}] into {}",
        model.heads.len(),
        model.heads.keys().cloned().collect::<Vec<_>>().join(", "),
        paths.model.display()
    );
    Ok(())
}

fn predict_into(args: &RunArgs, dir: &Path, evaluate_too: bool) -> CmdResult {
    let (config, paths) = load_config(args)?;
    let splits = load_splits(&config, &paths, args.force)?;
    let model = load_model(&config, &paths, &splits, args.force)?;
    let predictions = predict_all(&config, &model, &splits.test, &splits.test_candidates)?;
    write_predictions(&dir.join("predictions.jsonl"), &predictions)?;
    let n = export_heatmaps(
        &config,
        &model,
        &splits.test,
        &splits.test_candidates,
        &dir.join("heatmaps"),
        args.heatmap_scenes,
        args.heatmap_detections,
    )?;
    if evaluate_too {
        let evaluation = evaluate(&config, &splits.test, &predictions, &splits.dataset_hash)?;
        write_evaluation(dir, &evaluation)?;
        print!("{}", evaluation.report.to_csv());
    }
    println!("wrote predictions and {n} heatmap images to {}", dir.display());
    Ok(())
}

fn cmd_ablate(args: &RunArgs) -> CmdResult {
    let (config, paths) = load_config(args)?;
    let splits = load_splits(&config, &paths, args.force)?;
    let mut variants = default_variants(&config)?;
    if !args.variants.is_empty() {
        let by_name: BTreeMap<_, _> = variants.into_iter().map(|v| (v.name.clone(), v)).collect();
        variants = args
            .variants
            .iter()
            .map(|n| {
                by_name.get(n).cloned().ok_or_else(|| {
                    Failure::Usage(format!(
                        "unknown variant {n:?}; available: {}",
                        by_name.keys().cloned().collect::<Vec<_>>().join(", ")
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
    }
    let report = run_ablation(&variants, &splits, config.seed)?;
    let dir = paths.output.join("ablation");
    atomic_write(&dir.join("ablation.json"), report.to_json()?.as_bytes())?;
    atomic_write(&dir.join("ablation.csv"), report.to_csv().as_bytes())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    let spec = HypercolumnSpec::new(
        vec![TapEntry::new("tap", args.neighborhood)],
        AuxFeatures::default(),
        args.resolution,
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    let shapes = BTreeMap::from([("tap".to_string(), (args.size, args.size, args.channels))]);
    let config = BenchConfig {
        classifiers: args.classifiers,
        trials: args.trials,
        seed: args.seed,
    };
    let report = bench_paths(&spec, &shapes, &config).map_err(|e| Failure::Usage(e.to_string()))?;
    atomic_write(&args.out.join("bench.csv"), report.to_csv().as_bytes())?;
    write_json(&args.out.join("bench.json"), &report)?;
    println!("{}", report.summary());
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match &cli.command {
        Command::Init { task, out } => cmd_init(*task, out),
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => {
            let dir = load_config(a)?.1.output.join("predict");
            predict_into(a, &dir, false)
        }
        Command::Eval(a) => {
            let dir = load_config(a)?.1.output.join("eval");
            predict_into(a, &dir, true)
        }
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::NonFinite(_)) { 3 } else { 2 })
        }
    }
}
