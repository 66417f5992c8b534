//! `dynmat` command-line runner.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 unreadable or malformed
//! data, 3 LTLM training diverged.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynmat::ltlm::{self, EpochMode, TrainingSchedule, DEFAULT_HIDDEN};
use dynmat::matching::{load_memory, save_memory};
use dynmat::protocol::{
    run_exposure, run_sequential, write_curve_csv, write_sweep_csv, ContinualRunConfig, DatasetSource, DatasetSpec,
    Datasets, LtlmConfig, RunOutcome, SweepRow,
};
use dynmat::stlm::stlm_error_rate;
use dynmat::{rng, ClassId};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] dynmat::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use dynmat::Error as E;
        match self {
            Self::Usage(_) => 1,
            Self::Io { .. } => 2,
            Self::Core(e) => match e {
                E::NonFiniteLoss { .. } => 3,
                E::Io { .. }
                | E::MagicMismatch { .. }
                | E::UnsupportedVersion { .. }
                | E::CountMismatch { .. }
                | E::Truncated { .. }
                | E::InvalidHeader { .. }
                | E::DimensionMismatch { .. }
                | E::NotNormalized { .. }
                | E::MissingClass(_)
                | E::NoExamples
                | E::EmptyTrainingSet => 2,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser)]
#[command(
    name = "dynmat",
    version,
    about = "Incremental class learning with a growing matching layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol once: initial pair, exposures, optional LTLM training.
    Run(RunArgs),
    /// Run the protocol for several thresholds and write a summary CSV.
    Sweep(SweepArgs),
    /// Evaluate a saved matching layer, optionally continuing with a new class.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Mnist,
    Fashion,
    /// IDX files with the standard names directly in --data-dir.
    Idx,
    /// DYNF feature files `train.dynf` and `test.dynf` in --data-dir.
    Features,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist")]
    dataset: Kind,
    /// Root data directory; mnist and fashion live in subdirectories of the same name.
    #[arg(long, env = "DYNMAT_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Overrides the training file (DYNF) for --dataset features.
    #[arg(long)]
    train_features: Option<PathBuf>,
    /// Overrides the test file (DYNF) for --dataset features.
    #[arg(long)]
    test_features: Option<PathBuf>,
}

impl DataArgs {
    fn spec(&self) -> DatasetSpec {
        let idx = |dir: &Path, prefix: &str| DatasetSource::Idx {
            images: dir.join(format!("{prefix}-images-idx3-ubyte")),
            labels: dir.join(format!("{prefix}-labels-idx1-ubyte")),
        };
        let (kind, dir) = match self.dataset {
            Kind::Mnist => ("mnist", self.data_dir.join("mnist")),
            Kind::Fashion => ("fashion", self.data_dir.join("fashion")),
            Kind::Idx => ("idx", self.data_dir.clone()),
            Kind::Features => {
                let file = |o: &Option<PathBuf>, name: &str| o.clone().unwrap_or_else(|| self.data_dir.join(name));
                return DatasetSpec {
                    kind: "features".into(),
                    train: DatasetSource::Features {
                        path: file(&self.train_features, "train.dynf"),
                    },
                    test: DatasetSource::Features {
                        path: file(&self.test_features, "test.dynf"),
                    },
                };
            }
        };
        DatasetSpec {
            kind: kind.into(),
            train: idx(&dir, "train"),
            test: idx(&dir, "t10k"),
        }
    }
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    /// Classes in presentation order; the first two form the initial pair.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    classes: Vec<ClassId>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shuffle the order of examples within each class.
    #[arg(long)]
    shuffle_within: bool,
    /// Shuffle the class presentation order with the seed.
    #[arg(long)]
    shuffle_classes: bool,
    /// Skip the LTLM entirely.
    #[arg(long)]
    no_ltlm: bool,
    /// Also train an LTLM on the examples stored in the matching layer.
    #[arg(long)]
    self_contained: bool,
    /// Check after each exposure that only the new class's scores changed.
    #[arg(long)]
    audit: bool,
    /// Retrain the LTLM every N insertions during exposures.
    #[arg(long)]
    retrain_every: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    /// Full-length schedule (4000 + 2000 epochs) instead of 200 + 100.
    #[arg(long)]
    paper_schedule: bool,
    #[arg(long)]
    phase1_epochs: Option<usize>,
    #[arg(long)]
    phase2_epochs: Option<usize>,
    #[arg(long)]
    phase1_lr: Option<f64>,
    #[arg(long)]
    phase2_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Count one mini-batch step as an epoch.
    #[arg(long)]
    single_batch_epochs: bool,
    #[arg(long, env = "DYNMAT_OUT_DIR")]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

impl ProtocolArgs {
    fn schedule(&self) -> TrainingSchedule {
        let base = if self.paper_schedule {
            TrainingSchedule::full(self.seed)
        } else {
            TrainingSchedule::scaled(self.seed)
        };
        TrainingSchedule {
            phase1_epochs: self.phase1_epochs.unwrap_or(base.phase1_epochs),
            phase2_epochs: self.phase2_epochs.unwrap_or(base.phase2_epochs),
            phase1_lr: self.phase1_lr.unwrap_or(base.phase1_lr),
            phase2_lr: self.phase2_lr.unwrap_or(base.phase2_lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epoch_mode: if self.single_batch_epochs {
                EpochMode::SingleBatch
            } else {
                EpochMode::FullPass
            },
            ..base
        }
    }

    fn config(&self, spec: &DatasetSpec, theta: f64) -> ContinualRunConfig {
        let classes = if self.shuffle_classes {
            rng::shuffle_classes(&self.classes, self.seed)
        } else {
            self.classes.clone()
        };
        let ltlm = (!self.no_ltlm).then(|| LtlmConfig {
            self_contained: self.self_contained,
            retrain_every: self.retrain_every,
            ..LtlmConfig::new(self.hidden, self.schedule())
        });
        ContinualRunConfig {
            dataset: Some(spec.clone()),
            classes,
            seed: self.seed,
            shuffle_within: self.shuffle_within,
            theta,
            ltlm,
            audit: self.audit,
        }
    }

    fn out_dir(&self, spec: &DatasetSpec, theta: f64) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-theta{theta}-seed{}", spec.kind, self.seed)))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, default_value_t = 0.8)]
    theta: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8")]
    thetas: Vec<f64>,
    /// Runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// DYNM snapshot to evaluate.
    #[arg(long)]
    memory: PathBuf,
    /// Classes to report; defaults to the classes stored in the layer.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<ClassId>>,
    /// Expose the layer to this class before evaluating.
    #[arg(long)]
    continue_class: Option<ClassId>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    shuffle_within: bool,
    /// Where to write the layer after --continue-class.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Where to write the exposure curve after --continue-class.
    #[arg(long)]
    curve: Option<PathBuf>,
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (use --force)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_outputs(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    let path = dir.join("curves.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    write_curve_csv(&outcome.report.curves, BufWriter::new(file)).map_err(io_err(&path))?;

    let path = dir.join("report.json");
    let file = File::create(&path).map_err(io_err(&path))?;
    outcome.report.write_json(BufWriter::new(file))?;

    save_memory(&outcome.layer, dir.join("memory.dynm"))?;
    if let Some(mlp) = &outcome.final_ltlm {
        ltlm::save_weights(mlp, dir.join("ltlm.dynw"))?;
    }
    if let Some(mlp) = &outcome.self_contained_ltlm {
        ltlm::save_weights(mlp, dir.join("ltlm-self.dynw"))?;
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn print_summary(outcome: &RunOutcome) {
    let r = &outcome.report;
    println!(
        "theta {} ml_size {} {:?}",
        r.config.theta, r.ml_size, r.ml_size_by_class
    );
    println!(
        "STLM  old {}  new {}  all {}",
        pct(r.final_stlm_old()),
        pct(r.final_stlm_new()),
        pct(r.final_stlm.overall())
    );
    for (c, e) in &r.final_stlm.per_class {
        println!("  class {c}: {}", pct(Some(*e)));
    }
    for (name, s) in [("LTLM", &r.final_ltlm), ("LTLM(stored)", &r.self_contained_ltlm)] {
        if let Some(s) = s {
            println!(
                "{name}  old {}  new {}  all {}",
                pct(s.test_errors.group(r.old_classes())),
                pct(s.test_errors.group(&[r.last_class()])),
                pct(s.test_errors.overall())
            );
        }
    }
    let failed = r.audits.iter().filter(|a| !a.passed).count();
    if !r.audits.is_empty() {
        println!("audits: {} run, {failed} failed", r.audits.len());
    }
}

fn run(args: RunArgs) -> Result<()> {
    let spec = args.data.spec();
    let config = args.protocol.config(&spec, args.theta);
    config.validate()?;
    let out = args.protocol.out_dir(&spec, args.theta);
    prepare_out_dir(&out, args.protocol.force)?;
    let data = Datasets::load(&spec)?;
    let outcome = run_sequential(&config, &data)?;
    write_outputs(&out, &outcome)?;
    print_summary(&outcome);
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    if args.thetas.is_empty() {
        return Err(CliError::Usage("--thetas needs at least one value".into()));
    }
    let spec = args.data.spec();
    let configs: Vec<ContinualRunConfig> = args.thetas.iter().map(|&t| args.protocol.config(&spec, t)).collect();
    for c in &configs {
        c.validate()?;
    }
    let root = args
        .protocol
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-sweep-seed{}", spec.kind, args.protocol.seed)));
    prepare_out_dir(&root, args.protocol.force)?;
    let data = Datasets::load(&spec)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..args.jobs.clamp(1, configs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = configs.get(i) else { break };
                let result = (|| {
                    let dir = root.join(format!("theta-{}", config.theta));
                    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                    let outcome = run_sequential(config, &data)?;
                    write_outputs(&dir, &outcome)?;
                    print_summary(&outcome);
                    Ok(SweepRow::from_report(&outcome.report))
                })();
                results.lock().expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });

    let mut rows = Vec::new();
    for r in results.into_inner().expect("workers joined") {
        rows.push(r.expect("every sweep slot is filled")?);
    }
    let path = root.join("summary.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    write_sweep_csv(&rows, BufWriter::new(file)).map_err(io_err(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut layer = load_memory(&args.memory)?;
    let spec = args.data.spec();
    let mut known: Vec<ClassId> = layer.classes().collect();
    if let Some(c) = args.continue_class {
        if known.len() < 2 {
            return Err(CliError::Usage(
                "--continue-class needs a layer with at least two classes".into(),
            ));
        }
        known.push(c);
        let data = Datasets::load(&spec)?.restrict(&known)?;
        let config = ContinualRunConfig {
            dataset: Some(spec.clone()),
            shuffle_within: args.shuffle_within,
            ..ContinualRunConfig::new(known.clone(), layer.theta(), args.seed)
        };
        let schedule = config.schedule(&data)?;
        let exposure = run_exposure(&mut layer, &config, &data, &schedule, c)?;
        let s = &exposure.summary;
        println!(
            "class {c}: {} presented, {} stored, err_old {} -> {}, err_new {}",
            s.presented,
            s.inserted,
            pct(Some(s.start_err_old)),
            pct(Some(s.end_err_old)),
            pct(Some(s.end_err_new))
        );
        if let Some(path) = &args.curve {
            let file = File::create(path).map_err(io_err(path))?;
            write_curve_csv(&exposure.curve, BufWriter::new(file)).map_err(io_err(path))?;
        }
        if let Some(path) = &args.save {
            save_memory(&layer, path)?;
        }
    }

    let classes = args.classes.unwrap_or(known);
    let test = dynmat::dataset::normalize(&spec.test.load()?.with_role(dynmat::Role::Test));
    let wanted: BTreeSet<ClassId> = classes.iter().copied().collect();
    let test = dynmat::dataset::filter_classes(&test, &wanted)?;
    println!("ml_size {} theta {}", layer.len(), layer.theta());
    for &c in &wanted {
        println!(
            "  class {c}: {}",
            pct(Some(stlm_error_rate(&layer, &test, &BTreeSet::from([c]))?))
        );
    }
    println!("  all: {}", pct(Some(stlm_error_rate(&layer, &test, &wanted)?)));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
