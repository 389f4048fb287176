use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvtop::audit::{
    add_difference_histogram, load_models_dir, load_split_annotations, render_histogram_png,
    scan_duplicates, AddHistogram, DuplicateReport, DEFAULT_BIN_FRACTION, DEFAULT_THRESHOLD_MM,
};
use mvtop::geometry::LosMode;
use mvtop::harness::{
    ablate, evaluate, format_table, load_model_points, load_split, measure_runtime, train,
    write_report, RunConfig, SweepSpec,
};
use mvtop::model::Model;
use mvtop::par::Execution;
use mvtop::scene::dataset::{generate_dataset, DatasetConfig, Split};
use mvtop::{Error, Result};

#[derive(Parser)]
#[command(name = "mvtop", version, about = "Multi-view object pose transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the MV-ball dataset.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus the training log.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate sweep variants against the base configuration.
    Ablate(AblateArgs),
    /// Scan two splits for duplicate poses.
    Audit(AuditArgs),
    /// Measure inference latency for several view counts.
    Runtime(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML dataset configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    easy: Option<usize>,
    #[arg(long)]
    hard: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequential: bool,
}

/// Run configuration file plus per-field overrides.
#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    los_mode: Option<LosMode>,
    #[arg(long)]
    encoder: Option<bool>,
    #[arg(long)]
    lambda_rot: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    hardware: Option<String>,
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset {
            c.dataset = v.clone();
        }
        if let Some(v) = &self.output {
            c.output = v.clone();
        }
        if let Some(v) = self.views {
            c.views = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.optimizer.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.optimizer.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.optimizer.learning_rate = v;
        }
        if let Some(v) = self.d_model {
            c.model.d_model = v;
        }
        if let Some(v) = self.num_queries {
            c.model.num_queries = v;
        }
        if let Some(v) = self.los_mode {
            c.model.los_mode = v;
        }
        if let Some(v) = self.encoder {
            c.model.encoder = v;
        }
        if let Some(v) = self.lambda_rot {
            c.loss.lambda_rot = v;
        }
        if let Some(v) = self.lambda_t {
            c.loss.lambda_t = v;
        }
        if let Some(v) = &self.hardware {
            c.hardware = v.clone();
        }
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint; defaults to `<output>/best.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test_easy")]
    split: Split,
    /// Report path; defaults to a file in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// TOML sweep specification; every declared sweep when absent.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long, default_value = "test_easy")]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// TOML file with any of the flag names below as keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split_a: Option<PathBuf>,
    #[arg(long)]
    split_b: Option<PathBuf>,
    #[arg(long)]
    threshold_mm: Option<f64>,
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    bin_fraction: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional PNG rendering of the ADD-difference histogram.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AuditFile {
    split_a: Option<PathBuf>,
    split_b: Option<PathBuf>,
    threshold_mm: Option<f64>,
    models: Option<PathBuf>,
    bin_fraction: Option<f64>,
    out: Option<PathBuf>,
    plot: Option<PathBuf>,
}

#[derive(serde::Serialize)]
struct AuditReport {
    duplicates: DuplicateReport,
    add_histogram: Option<AddHistogram>,
}

fn read_toml<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn exec_of(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run_generate(a: GenerateArgs) -> Result<()> {
    let mut c: DatasetConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(v) = a.train {
        c.train = v;
    }
    if let Some(v) = a.easy {
        c.easy = v;
    }
    if let Some(v) = a.hard {
        c.hard = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    let manifests = generate_dataset(&a.out, &c, exec_of(a.sequential))?;
    for m in manifests {
        println!("{}: {} samples", m.split.name(), m.records.len());
    }
    Ok(())
}

fn load_checkpoint(args: &EvalArgs, config: &RunConfig) -> Result<Model> {
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| config.output.join("best.json"));
    Model::load(&path, None)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let model = load_checkpoint(&a, &config)?;
    let split = load_split(&config.dataset, a.split, config.execution)?;
    let points = load_model_points(&config.dataset)?;
    let report = evaluate(&model, &split, config.views, &points, config.auc_threshold_m, config.execution)?;
    let out = a
        .out
        .unwrap_or_else(|| config.output.join(format!("eval_{}.json", a.split.name())));
    write_report(&out, &report)?;
    print_json(&report);
    Ok(())
}

fn run_runtime(a: EvalArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let model = load_checkpoint(&a, &config)?;
    let split = load_split(&config.dataset, a.split, config.execution)?;
    let report = measure_runtime(&model, &split, &config.runtime_views, config.runtime_runs, &config.hardware)?;
    let out = a.out.unwrap_or_else(|| config.output.join("runtime.json"));
    write_report(&out, &report)?;
    print_json(&report);
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let config = a.run.resolve()?;
    let sweep = match &a.sweep {
        Some(p) => read_toml(p)?,
        None => SweepSpec::full(),
    };
    let rows = ablate(&config, &sweep, a.split)?;
    let out = a.out.unwrap_or_else(|| config.output.join("ablation.json"));
    write_report(&out, &rows)?;
    print!("{}", format_table(&rows));
    Ok(())
}

fn run_audit(a: AuditArgs) -> Result<()> {
    let file: AuditFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => AuditFile::default(),
    };
    let need = |v: Option<PathBuf>, name: &str| {
        v.ok_or_else(|| Error::Config(format!("audit needs --{name}")))
    };
    let split_a = need(a.split_a.or(file.split_a), "split-a")?;
    let split_b = need(a.split_b.or(file.split_b), "split-b")?;
    let threshold = a.threshold_mm.or(file.threshold_mm).unwrap_or(DEFAULT_THRESHOLD_MM);
    let bin = a.bin_fraction.or(file.bin_fraction).unwrap_or(DEFAULT_BIN_FRACTION);
    let name = |p: &Path| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let ra = load_split_annotations(&split_a, &name(&split_a))?;
    let rb = load_split_annotations(&split_b, &name(&split_b))?;
    let duplicates = scan_duplicates(&ra, &rb, threshold)?;
    let add_histogram = match a.models.or(file.models) {
        Some(dir) => Some(add_difference_histogram(&duplicates.nearest, &load_models_dir(&dir)?, bin)?),
        None => None,
    };
    if let (Some(plot), Some(h)) = (a.plot.or(file.plot), &add_histogram) {
        render_histogram_png(h, &plot)?;
    }
    let report = AuditReport {
        duplicates,
        add_histogram,
    };
    match a.out.or(file.out) {
        Some(out) => write_report(&out, &report)?,
        None => print_json(&report),
    }
    let d = &report.duplicates;
    eprintln!(
        "{} of {} A poses have a duplicate in B ({:.4}); {} of {} B poses ({:.4})",
        d.a_with_duplicate,
        d.records_a,
        d.fraction_of_a_with_duplicate_in_b,
        d.b_with_duplicate,
        d.records_b,
        d.fraction_of_b_drawn_from_a
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Train(a) => {
            let config = a.resolve()?;
            let out = train(&config)?;
            let log = &out.log;
            println!(
                "trained {} steps; best epoch {}; checkpoints in {}",
                log.steps.len(),
                log.best_epoch,
                config.output.display()
            );
            Ok(())
        }
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Audit(a) => run_audit(a),
        Command::Runtime(a) => run_runtime(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
