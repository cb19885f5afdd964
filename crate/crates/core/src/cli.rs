//! Command-line surface: `run`, `train`, `gen-dataset` and `ddc`.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
//! Every command accepts `--config <json>` whose keys mirror the long flags;
//! flags given on the command line take precedence.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dclite::{self, Event, Program};
use crate::matcher::{self, Algorithm, MatchModel, TrainConfig, DEFAULT_THRESHOLD};
use crate::rpf::TrackerConfig;
use crate::simkit::{self, Scenario, DEFAULT_DATASET_SIZE};
use crate::worldloop::WorldConfig;

#[derive(Debug, Parser)]
#[command(name = "semtrack", version, about = "Anchoring with a relational particle tracker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the perception loop over a scenario and write metrics.
    Run(RunArgs),
    /// Train and evaluate a matcher on a dataset CSV.
    Train(TrainArgs),
    /// Generate a labelled matcher dataset from scenarios.
    GenDataset(GenDatasetArgs),
    /// Estimate the probability of an event under a dc-lite program.
    Ddc(DdcArgs),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// Builtin scenario name (or 1-4) or a scenario JSON path.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// `on` or `off`.
    #[arg(long)]
    pub tracker: Option<String>,
    /// Matcher model JSON; defaults to a logistic model trained on builtin scenarios.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Per-frame JSONL trace output.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Metrics JSON output; printed to stdout as well.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// knn, bayes or logistic.
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 5, or 4 to drop the time feature.
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDatasetArgs {
    /// Comma-separated builtin names or scenario paths; all builtins by default.
    #[arg(long)]
    pub scenarios: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdcArgs {
    /// Program JSON path, or `example-1` / `example-2` for the bundled programs.
    #[arg(long)]
    pub program: Option<String>,
    /// Event such as `left(1,2) = t` or `pos(1)@3 > 2`.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of time steps to unroll.
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(m: impl std::fmt::Display) -> CliError {
    CliError::Usage(m.to_string())
}

fn runtime(m: impl std::fmt::Display) -> CliError {
    CliError::Runtime(m.to_string())
}

type CliResult<T> = Result<T, CliError>;

/// Fills every `None` field in `flags` from the JSON config file, if given.
fn merge<T: DeserializeOwned + Serialize + Default>(flags: T, config: &Option<PathBuf>) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let file: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let mut merged = serde_json::to_value(&flags).map_err(runtime)?;
    if let (Some(m), serde_json::Value::Object(f)) = (merged.as_object_mut(), file) {
        for (k, v) in f {
            match m.get(&k) {
                None => return Err(usage(format!("config {}: unknown key {k:?}", path.display()))),
                Some(serde_json::Value::Null) => {
                    m.insert(k, v);
                }
                Some(_) => {}
            }
        }
    } else {
        return Err(usage(format!("config {}: expected a JSON object", path.display())));
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

// Serialize is needed by `merge`; the config path itself is never merged.
macro_rules! serialize_args {
    ($($t:ty { $($f:ident),* })*) => {$(
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                use serde::ser::SerializeMap;
                let mut m = s.serialize_map(None)?;
                $(m.serialize_entry(stringify!($f), &self.$f)?;)*
                m.end()
            }
        }
    )*};
}

serialize_args! {
    RunArgs { scenario, seed, particles, tracker, model, threshold, trace, metrics }
    TrainArgs { dataset, algo, seed, features, model_out }
    GenDatasetArgs { scenarios, n, seed, out }
    DdcArgs { program, query, samples, seed, horizon }
}

/// Resolves a builtin name or a scenario file.
pub fn load_scenario(spec: &str) -> CliResult<Scenario> {
    if let Ok(s) = simkit::builtin(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(usage(format!("scenario {spec:?} is neither a builtin nor an existing file")));
    }
    Scenario::load(path).map_err(|e| usage(format!("scenario {spec}: {e}")))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(runtime)
}

pub fn cmd_run(args: RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let args = merge(args.clone(), &args.config)?;
    let scenario = load_scenario(args.scenario.as_deref().ok_or_else(|| usage("--scenario is required"))?)?;
    let particles = args.particles.unwrap_or(TrackerConfig::default().particles);
    if particles == 0 {
        return Err(usage("--particles must be >= 1"));
    }
    let threshold = args.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    let tracker_enabled = match args.tracker.as_deref().unwrap_or("on") {
        "on" => true,
        "off" => false,
        other => return Err(usage(format!("--tracker must be on or off, got {other:?}"))),
    };
    let seed = args.seed.unwrap_or(0);
    let (model, training) = match &args.model {
        Some(path) => (MatchModel::load(path).map_err(|e| usage(format!("model {}: {e}", path.display())))?, None),
        None => {
            let (m, metrics) = simkit::default_model_with_metrics();
            (m.clone(), Some(*metrics))
        }
    };
    let config = WorldConfig {
        tracker: TrackerConfig::default().with_particles(particles),
        tracker_enabled,
        threshold,
        seed,
        ..WorldConfig::default()
    };
    let outcome = simkit::run_scenario(&scenario, &config, &model, seed).map_err(runtime)?;
    let mut report = outcome.report;
    if let Some(m) = training {
        report.matcher_accuracy = Some(m.accuracy);
        report.matcher_f1 = Some(m.f1);
    }

    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        for rec in &outcome.trace {
            let line = serde_json::to_string(rec).map_err(runtime)?;
            writeln!(w, "{line}").map_err(runtime)?;
        }
        w.flush().map_err(runtime)?;
    }
    let json = pretty(&report)?;
    if let Some(path) = &args.metrics {
        std::fs::write(path, &json).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    out.write_all(json.as_bytes()).map_err(runtime)
}

pub fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let args = merge(args.clone(), &args.config)?;
    let path = args.dataset.ok_or_else(|| usage("--dataset is required"))?;
    let algorithm: Algorithm = args.algo.as_deref().unwrap_or("logistic").parse().map_err(usage)?;
    let features = args.features.unwrap_or(5);
    if !(4..=5).contains(&features) {
        return Err(usage("--features must be 4 or 5"));
    }
    let samples = matcher::load_dataset(&path).map_err(|e| usage(format!("dataset {}: {e}", path.display())))?;
    let config = TrainConfig::new(algorithm).with_features(features).with_seed(args.seed.unwrap_or(0));
    let (model, metrics) = matcher::train(&samples, &config).map_err(runtime)?;
    if let Some(p) = &args.model_out {
        model.save(p).map_err(runtime)?;
    }
    out.write_all(pretty(&metrics)?.as_bytes()).map_err(runtime)
}

pub fn cmd_gen_dataset(args: GenDatasetArgs, out: &mut dyn Write) -> CliResult<()> {
    let args = merge(args.clone(), &args.config)?;
    let path = args.out.ok_or_else(|| usage("--out is required"))?;
    let scenarios = match &args.scenarios {
        None => simkit::builtin_scenarios(),
        Some(list) => list.split(',').map(|s| load_scenario(s.trim())).collect::<CliResult<_>>()?,
    };
    let n = args.n.unwrap_or(DEFAULT_DATASET_SIZE);
    if n < 10 {
        return Err(usage("--n must be >= 10"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.unwrap_or(0));
    let samples = simkit::generate_matcher_dataset(&scenarios, &mut rng, n).map_err(runtime)?;
    matcher::save_dataset(&path, &samples).map_err(runtime)?;
    let summary = serde_json::json!({
        "samples": samples.len(),
        "balance": simkit::label_balance(&samples),
        "out": path.display().to_string(),
    });
    out.write_all(pretty(&summary)?.as_bytes()).map_err(runtime)
}

pub fn cmd_ddc(args: DdcArgs, out: &mut dyn Write) -> CliResult<()> {
    let args = merge(args.clone(), &args.config)?;
    let program = match args.program.as_deref().ok_or_else(|| usage("--program is required"))? {
        "example-1" => dclite::example_objects_program(),
        "example-2" => dclite::example_dynamics_program(0.1),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("program {path}: {e}")))?;
            Program::from_json(&text).map_err(|e| usage(format!("program {path}: {e}")))?
        }
    };
    let event: Event = args.query.as_deref().unwrap_or("true").parse().map_err(usage)?;
    let samples = args.samples.unwrap_or(10_000);
    if samples == 0 {
        return Err(usage("--samples must be >= 1"));
    }
    let estimate = dclite::query(
        &program,
        args.horizon.unwrap_or(0),
        |w| event.holds(w),
        samples,
        args.seed.unwrap_or(0),
    )
    .map_err(runtime)?;
    out.write_all(pretty(&estimate)?.as_bytes()).map_err(runtime)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn execute<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::GenDataset(a) => cmd_gen_dataset(a, out),
        Command::Ddc(a) => cmd_ddc(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}
