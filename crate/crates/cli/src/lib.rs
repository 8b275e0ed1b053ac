//! The `alignflow` command-line tool.
//!
//! Every command is a function from parsed arguments to a [`CliError`] or
//! success, so the binary only has to print the error and exit with its code.
//! Failures print exactly one line, `ERROR <code>: <message>`, on stderr.
//!
//! Exit codes: `0` success, `1` failed verification or I/O trouble, `2`
//! invalid configuration or arguments, `3` training diverged to a
//! non-finite value.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use alignflow::autodiff::Tensor;
use alignflow::checkpoint::Checkpoint;
use alignflow::config::RunConfig;
use alignflow::eval::{density_heatmap, evaluate};
use alignflow::io::{column_names, parse_row, read_csv_file, write_csv_file, write_pgm, CsvMetricsWriter};
use alignflow::model::{AlignFlowModel, Domain};
use alignflow::objective::Critics;
use alignflow::train::train;
use alignflow::verify::{run_suite, Check, Suite, VerifyOptions};
use alignflow::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rayon::prelude::*;

/// File names written by `train` into its output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.aflow";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

/// Environment variable capping the number of verification threads.
pub const THREADS_ENV: &str = "ALIGNFLOW_THREADS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    /// The single diagnostic line printed on stderr.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("ERROR {}: {}", self.code, flat.join(" "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } => 3,
            Error::Io(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "alignflow", version, about = "Train and inspect dual-flow domain alignment models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a synthetic domain pair; writes a checkpoint, metrics.csv and
    /// resolved-config.json into --out.
    Train(TrainArgs),
    /// Translate the rows of a CSV file into the other domain.
    Translate(TranslateArgs),
    /// Draw paired samples (a, b) from the shared latent prior.
    Sample(SampleArgs),
    /// Interpolate between two A-domain points along a latent arc.
    Interpolate(InterpolateArgs),
    /// Run numeric invariant suites on a checkpoint or on fresh random flows.
    Verify(VerifyArgs),
    /// Render the density of one domain as a PGM image.
    Heatmap(HeatmapArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed` of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    A2b,
    B2a,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    A,
    B,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::A => Domain::A,
            DomainArg::B => Domain::B,
        }
    }
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Numeric CSV, one point per row; a non-numeric first line is a header.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub direction: Direction,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// First endpoint as comma-separated coordinates; reached at phi = pi/2.
    #[arg(long, allow_hyphen_values = true)]
    pub a1: String,
    /// Second endpoint; reached at phi = 0.
    #[arg(long, allow_hyphen_values = true)]
    pub a2: String,
    #[arg(long, default_value_t = 9)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub phi_start: f64,
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2, allow_hyphen_values = true)]
    pub phi_end: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, conflicts_with = "fresh", required_unless_present = "fresh")]
    pub checkpoint: Option<PathBuf>,
    /// Verify randomly perturbed, untrained flows built from --config.
    #[arg(long)]
    pub fresh: bool,
    /// all, roundtrip, logdet, critic, perm or marginal.
    #[arg(long, default_value = "all")]
    pub suite: String,
    /// Architecture for --fresh and true data for the marginal suite.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the checks as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "a")]
    pub domain: DomainArg,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 128)]
    pub grid: usize,
    /// Half-width of the square that is rendered.
    #[arg(long, default_value_t = 3.0)]
    pub extent: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command. Normal
/// output goes to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> CliResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            write!(stdout, "{e}")?;
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ")));
        }
    };
    match cli.command {
        Command::Train(a) => cmd_train(&a, stdout),
        Command::Translate(a) => cmd_translate(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Interpolate(a) => cmd_interpolate(&a),
        Command::Verify(a) => cmd_verify(&a, stdout),
        Command::Heatmap(a) => cmd_heatmap(&a),
    }
}

/// Runs the tool and returns the process exit code, printing any error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut stdout = std::io::stdout().lock();
    match run(args, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("{}", e.line());
            e.code
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            Ok(RunConfig::from_json(&text)?)
        }
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => CliError::usage(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other.into(),
    })
}

fn load_model(path: &Path) -> CliResult<AlignFlowModel> {
    Ok(load_checkpoint(path)?.model()?)
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> CliResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join(RESOLVED_CONFIG_FILE), cfg.to_json() + "\n")?;

    let data = cfg.data.generate()?;
    let seed = cfg.train.seed;
    let mut model = AlignFlowModel::new(&cfg.arch, cfg.sharing, seed)?;
    let mut critics = Critics::new(cfg.arch.dim, &cfg.critic, seed)?;
    let metrics_file = BufWriter::new(File::create(args.out.join(METRICS_FILE))?);
    let mut sink = CsvMetricsWriter::new(metrics_file)?;
    let summary = train(
        &mut model,
        &mut critics,
        &data.train,
        Some(&data.val),
        &cfg.train,
        &cfg.objective,
        &mut sink,
    )?;
    sink.into_inner()?.flush()?;

    let ck = Checkpoint::capture(
        &model,
        Some((&critics, &cfg.critic)),
        &cfg.objective,
        &cfg.train,
        summary.epochs,
    )?;
    ck.save(args.out.join(CHECKPOINT_FILE))?;

    let report = evaluate(&model, &data.test)?;
    writeln!(
        stdout,
        "trained {} epochs ({} generator steps); test mse a->b {:.6} b->a {:.6}, nll a {:.4} b {:.4}",
        summary.epochs,
        summary.generator_steps,
        report.mse_a_to_b,
        report.mse_b_to_a,
        report.nll_a,
        report.nll_b
    )?;
    writeln!(stdout, "wrote {}", args.out.join(CHECKPOINT_FILE).display())?;
    Ok(())
}

pub fn cmd_translate(args: &TranslateArgs) -> CliResult {
    let model = load_model(&args.checkpoint)?;
    let table = read_csv_file(&args.input).map_err(|e| match e {
        Error::Io(io) => CliError::usage(format!("cannot read {}: {io}", args.input.display())),
        other => other.into(),
    })?;
    let d = model.dim();
    let (from, prefix) = match args.direction {
        Direction::A2b => (Domain::A, "b"),
        Direction::B2a => (Domain::B, "a"),
    };
    let values = &table.values;
    let out = if values.rows() == 0 {
        if values.cols() != 0 && values.cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: values.cols(),
            }
            .into());
        }
        Tensor::matrix(0, d, Vec::new())?
    } else {
        if values.cols() != d {
            return Err(Error::Dimension {
                expected: d,
                got: values.cols(),
            }
            .into());
        }
        match from {
            Domain::A => model.translate_a_to_b(values)?,
            Domain::B => model.translate_b_to_a(values)?,
        }
    };
    write_csv_file(&args.out, &column_names(prefix, d), &[&out])?;
    Ok(())
}

pub fn cmd_sample(args: &SampleArgs) -> CliResult {
    if args.n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let model = load_model(&args.checkpoint)?;
    let (a, b) = model.sample_paired(args.n, args.seed)?;
    let mut header = column_names("a", model.dim());
    header.extend(column_names("b", model.dim()));
    write_csv_file(&args.out, &header, &[&a, &b])?;
    Ok(())
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> CliResult {
    let model = load_model(&args.checkpoint)?;
    let a1 = parse_row(&args.a1)?;
    let a2 = parse_row(&args.a2)?;
    for row in [&a1, &a2] {
        if row.len() != model.dim() {
            return Err(Error::Dimension {
                expected: model.dim(),
                got: row.len(),
            }
            .into());
        }
    }
    let steps = model.interpolate_range(&a1, &a2, args.steps, args.phi_start, args.phi_end)?;
    let d = model.dim();
    let phi = Tensor::matrix(steps.len(), 1, steps.iter().map(|s| s.phi).collect())?;
    let a = Tensor::matrix(steps.len(), d, steps.iter().flat_map(|s| s.a.iter().copied()).collect())?;
    let b = Tensor::matrix(steps.len(), d, steps.iter().flat_map(|s| s.b.iter().copied()).collect())?;
    let mut header = vec!["phi".to_string()];
    header.extend(column_names("a", d));
    header.extend(column_names("b", d));
    write_csv_file(&args.out, &header, &[&phi, &a, &b])?;
    Ok(())
}

/// Thread count from `ALIGNFLOW_THREADS`, or `None` to use rayon's default.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
    }
}

/// Model under verification for `--fresh`: the configured architecture with
/// every parameter perturbed, so the flows are far from the identity.
pub fn fresh_model(cfg: &RunConfig, seed: u64) -> CliResult<AlignFlowModel> {
    let mut model = AlignFlowModel::new(&cfg.arch, cfg.sharing, seed)?;
    model
        .params
        .perturb(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), 0.2);
    Ok(model)
}

pub fn cmd_verify(args: &VerifyArgs, stdout: &mut dyn Write) -> CliResult {
    let suites = Suite::parse_selection(&args.suite)?;
    let cfg = load_config(args.config.as_deref())?;
    let model = match &args.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.meta.objective.is_adversarial_only() {
                // without a likelihood term the latent prior never entered
                // training, so sampling and likelihood checks say little
                writeln!(
                    stdout,
                    "NOTE model was trained adversarial-only; its latent prior is untrained and samples \
                     are not expected to follow the data"
                )?;
            }
            ck.model()?
        }
        None => fresh_model(&cfg, args.seed)?,
    };
    let opts = VerifyOptions {
        seed: args.seed,
        data: cfg.data.clone(),
        ..Default::default()
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::usage(format!("cannot start worker threads: {e}")))?;
    let results: Vec<Result<Vec<Check>, Error>> =
        pool.install(|| suites.par_iter().map(|&s| run_suite(&model, s, &opts)).collect());

    let mut checks = Vec::new();
    for r in results {
        checks.extend(r?);
    }
    for c in &checks {
        writeln!(stdout, "{}", c.report_line())?;
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    writeln!(stdout, "{} checks, {} failed", checks.len(), failed)?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&checks).expect("checks serialize") + "\n")?;
    }
    if failed > 0 {
        return Err(CliError {
            code: 1,
            message: format!("{failed} of {} verification checks failed", checks.len()),
        });
    }
    Ok(())
}

pub fn cmd_heatmap(args: &HeatmapArgs) -> CliResult {
    let model = load_model(&args.checkpoint)?;
    let pixels = density_heatmap(&model, args.domain.into(), args.grid, args.extent)?;
    write_pgm(BufWriter::new(File::create(&args.out)?), args.grid, args.grid, &pixels)?;
    Ok(())
}
