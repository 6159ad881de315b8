//! `icf`: generate traces, replay policies, augment logs, evaluate and train
//! policies, and run continuous or A/B/C experiments.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 estimator and log
//! do not fit together.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use implicit_cf::estimators::{
    estimate, EstimateError, EstimateOptions, EstimatorKind, EvalLog, SurvivalConfig,
};
use implicit_cf::feedback::{augment_all, AugmentedRecord, FeedbackModel, LoggedDecision};
use implicit_cf::harness::{
    fit_linear, plan_v1_model, run_abtest, run_continuous, ExperimentPlan, HarnessError,
    LaneKind, RunReport,
};
use implicit_cf::health::{
    default_phases, generate_trace, replay_trace, GeneratorSpec, HealthConfig, HealthFeedback,
    MachineEvent,
};
use implicit_cf::jsonl::{self, JsonlError};
use implicit_cf::policy::{
    ExplorationConfig, ExplorationMode, FixedAction, LinearPolicyModel, MaxAction, Policy,
    TrainingConfig, TrainingLog, TrainingMode,
};
use implicit_cf::scale::{
    generate_requests, simulate_request, CompletionModel, CostVariant, RequestSpec, ScaleConfig,
    ScaleEnv, ScaleFeedback, ScaleRequest,
};
use implicit_cf::sim::stream_rng;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    fn compat(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Estimate(e) => e.into(),
            HarnessError::Feedback(_) | HarnessError::Csv(_) => CliError::data(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        match e {
            EstimateError::Incompatible { .. } => CliError::compat(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

// ── Arguments ───────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "icf", version, about = "Counterfactual evaluation of threshold policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace as JSON lines.
    GenTrace(GenTraceArgs),
    /// Replay a trace under a policy with exploration and write the raw log.
    Replay(ReplayArgs),
    /// Expand a raw log into every cost its outcomes reveal.
    Augment(AugmentArgs),
    /// Estimate a policy's cost from a log; prints a JSON report.
    Evaluate(EvaluateArgs),
    /// Train a policy from a log, or the initial model of a plan.
    Train(TrainArgs),
    /// Run a continuous-retraining experiment.
    Loop(RunArgs),
    /// Run an A/B/C experiment with random per-event assignment.
    Abtest(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Health,
    Scale,
}

#[derive(Clone, Copy, ValueEnum)]
enum CostArg {
    Cost1,
    Cost2,
}

impl From<CostArg> for CostVariant {
    fn from(c: CostArg) -> Self {
        match c {
            CostArg::Cost1 => CostVariant::Cost1,
            CostArg::Cost2 => CostVariant::Cost2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Ips,
    Implicit,
    Direct,
    Naive,
    Survival,
    ExplorationOnly,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Ips => EstimatorKind::Ips,
            EstimatorArg::Implicit => EstimatorKind::Implicit,
            EstimatorArg::Direct => EstimatorKind::Direct,
            EstimatorArg::Naive => EstimatorKind::Naive,
            EstimatorArg::Survival => EstimatorKind::Survival,
            EstimatorArg::ExplorationOnly => EstimatorKind::ExplorationOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExploreArg {
    Maximal,
    Uniform,
}

impl From<ExploreArg> for ExplorationMode {
    fn from(e: ExploreArg) -> Self {
        match e {
            ExploreArg::Maximal => ExplorationMode::Maximal,
            ExploreArg::Uniform => ExplorationMode::Uniform,
        }
    }
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, value_enum)]
    env: EnvArg,
    /// Generator spec (health) or request spec (scale); defaults to the
    /// first built-in phase.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long, value_enum)]
    env: EnvArg,
    #[arg(long = "in")]
    input: PathBuf,
    /// `v0`, `fixed:N`, or a policy file written by `train`.
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "maximal")]
    explore: ExploreArg,
    #[arg(long, value_enum, default_value = "cost1")]
    cost: CostArg,
    /// Completion-time model for scale requests.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long, value_enum)]
    env: EnvArg,
    #[arg(long, value_enum, default_value = "cost1")]
    cost: CostArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Raw or augmented log; the kind is detected from the first line.
    #[arg(long = "in", required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    policy: String,
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value = "health")]
    env: EnvArg,
    #[arg(long, value_enum, default_value = "cost1")]
    cost: CostArg,
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Train the plan's initial (v1) model on its warmup.
    #[arg(long, conflicts_with = "input")]
    plan: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    #[arg(long, value_enum, default_value = "health")]
    env: EnvArg,
    #[arg(long, value_enum, default_value = "cost1")]
    cost: CostArg,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Output directory for report.json, costs.csv and estimates.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    explore: Option<ExploreArg>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    retrain_every: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
}

// ── Files ───────────────────────────────────────────────────────────────

/// Policy file written by `train`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum PolicyFile {
    Linear(LinearPolicyModel),
    Fixed { fixed_action: u32 },
}

enum LoadedPolicy {
    Max,
    Fixed(FixedAction),
    Linear(LinearPolicyModel),
}

impl LoadedPolicy {
    fn as_policy(&self) -> &dyn Policy {
        match self {
            LoadedPolicy::Max => &MaxAction,
            LoadedPolicy::Fixed(f) => f,
            LoadedPolicy::Linear(m) => m,
        }
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("no such file: {}", path.display())))
    }
}

fn require_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(CliError::config(format!(
            "output directory does not exist: {}",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    require_file(path)?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    require_file(path)?;
    let file =
        fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    jsonl::read(BufReader::new(file)).map_err(|e| match e {
        JsonlError::Parse { .. } => CliError::data(format!("{}: {e}", path.display())),
        JsonlError::Io(_) => CliError::data(format!("{}: {e}", path.display())),
    })
}

/// Write through a temporary file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::data(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn lines_bytes<T: Serialize>(items: &[T]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    jsonl::write(&mut buf, items).map_err(|e| CliError::data(e.to_string()))?;
    Ok(buf)
}

fn load_policy(spec: &str) -> CliResult<LoadedPolicy> {
    if spec == "v0" {
        return Ok(LoadedPolicy::Max);
    }
    if let Some(n) = spec.strip_prefix("fixed:") {
        let a = n
            .parse()
            .map_err(|_| CliError::config(format!("bad fixed action {n:?}")))?;
        return Ok(LoadedPolicy::Fixed(FixedAction(a)));
    }
    Ok(match read_json::<PolicyFile>(Path::new(spec))? {
        PolicyFile::Linear(m) => LoadedPolicy::Linear(m),
        PolicyFile::Fixed { fixed_action } => LoadedPolicy::Fixed(FixedAction(fixed_action)),
    })
}

enum LogFile {
    Raw(Vec<LoggedDecision>),
    Augmented(Vec<AugmentedRecord>),
}

/// Read logs, telling raw from augmented by the first line.
fn read_logs(paths: &[PathBuf]) -> CliResult<LogFile> {
    let mut raw = Vec::new();
    let mut aug = Vec::new();
    for path in paths {
        require_file(path)?;
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let first = text.lines().find(|l| !l.trim().is_empty());
        let augmented = first.is_some_and(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .is_ok_and(|v| v.get("entries").is_some())
        });
        if augmented {
            aug.extend(read_lines::<AugmentedRecord>(path)?);
        } else {
            raw.extend(read_lines::<LoggedDecision>(path)?);
        }
    }
    match (raw.is_empty(), aug.is_empty()) {
        (_, true) => Ok(LogFile::Raw(raw)),
        (true, false) => Ok(LogFile::Augmented(aug)),
        (false, false) => Err(CliError::config("cannot mix raw and augmented logs")),
    }
}

fn feedback_model(env: EnvArg, cost: CostArg) -> Box<dyn FeedbackModel> {
    match env {
        EnvArg::Health => Box::new(HealthFeedback::new(HealthConfig::default())),
        EnvArg::Scale => Box::new(ScaleFeedback::new(cost.into(), ScaleConfig::default())),
    }
}

// ── Subcommands ─────────────────────────────────────────────────────────

fn gen_trace(args: GenTraceArgs) -> CliResult<()> {
    require_parent(&args.out)?;
    let bytes = match args.env {
        EnvArg::Health => {
            let spec = match &args.spec {
                Some(p) => read_json::<GeneratorSpec>(p)?,
                None => default_phases().remove(0),
            };
            let trace = generate_trace(&[(spec, args.n)], args.seed)
                .map_err(|e| CliError::config(e.to_string()))?;
            lines_bytes(&trace)?
        }
        EnvArg::Scale => {
            let spec = match &args.spec {
                Some(p) => read_json::<RequestSpec>(p)?,
                None => RequestSpec::default(),
            };
            let requests = generate_requests(&[(spec, args.n)], args.seed, "r")
                .map_err(|e| CliError::config(e.to_string()))?;
            lines_bytes(&requests)?
        }
    };
    write_atomic(&args.out, &bytes)
}

fn replay(args: ReplayArgs) -> CliResult<()> {
    require_parent(&args.out)?;
    let policy = load_policy(&args.policy)?;
    let explore = ExplorationConfig::new(args.epsilon, args.explore.into())
        .map_err(|e| CliError::config(e.to_string()))?;
    let mut rng = stream_rng(args.seed, 0);
    let log = match args.env {
        EnvArg::Health => {
            let trace: Vec<MachineEvent> = read_lines(&args.input)?;
            replay_trace(&trace, policy.as_policy(), &explore, &HealthConfig::default(), &mut rng)
        }
        EnvArg::Scale => {
            let model = match &args.model {
                Some(p) => read_json::<CompletionModel>(p)?,
                None => CompletionModel::default(),
            };
            let requests: Vec<ScaleRequest> = read_lines(&args.input)?;
            let env = ScaleEnv::new(args.cost.into(), ScaleConfig::default());
            requests
                .iter()
                .map(|r| simulate_request(r, policy.as_policy(), &explore, &model, &env, &mut rng))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::data(e.to_string()))?
        }
    };
    write_atomic(&args.out, &lines_bytes(&log)?)
}

fn augment_cmd(args: AugmentArgs) -> CliResult<()> {
    require_parent(&args.out)?;
    let log: Vec<LoggedDecision> = read_lines(&args.input)?;
    let model = feedback_model(args.env, args.cost);
    let augmented =
        augment_all(model.as_ref(), &log).map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(&args.out, &lines_bytes(&augmented)?)
}

fn evaluate_cmd(args: EvaluateArgs) -> CliResult<()> {
    if args.bootstrap > 0 && args.seed.is_none() {
        return Err(CliError::config("--seed is required with --bootstrap"));
    }
    let policy = load_policy(&args.policy)?;
    let logs = read_logs(&args.input)?;
    let model = feedback_model(args.env, args.cost);
    let options = EstimateOptions {
        feedback: Some(model.as_ref()),
        bootstrap: args.bootstrap,
        seed: args.seed.unwrap_or(0),
        ..EstimateOptions::default()
    };
    let input = match &logs {
        LogFile::Raw(l) => EvalLog::Raw(l),
        LogFile::Augmented(l) => EvalLog::Augmented(l),
    };
    let mut report = estimate(args.estimator.into(), input, policy.as_policy(), &options)?;
    if args.bootstrap == 0 {
        report.seed = None;
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn train_cmd(args: TrainArgs) -> CliResult<()> {
    require_parent(&args.out)?;
    let file = if let Some(plan_path) = &args.plan {
        let plan: ExperimentPlan = read_json(plan_path)?;
        PolicyFile::Linear(plan_v1_model(&plan)?)
    } else {
        let input = args
            .input
            .as_ref()
            .ok_or_else(|| CliError::config("train needs --plan or --in"))?;
        let estimator = args
            .estimator
            .ok_or_else(|| CliError::config("train --in needs --estimator"))?;
        train_from_log(input, estimator.into(), args.env, args.cost, args.window)?
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(&args.out, text.as_bytes())
}

fn train_from_log(
    input: &Path,
    kind: EstimatorKind,
    env: EnvArg,
    cost: CostArg,
    window: Option<usize>,
) -> CliResult<PolicyFile> {
    let logs = read_logs(std::slice::from_ref(&input.to_path_buf()))?;
    let config = TrainingConfig::default();
    let incompatible = |expected| {
        CliError::from(EstimateError::Incompatible {
            estimator: kind.label(),
            expected,
        })
    };
    let linear = |log: TrainingLog<'_>, mode: TrainingMode, n: usize| -> CliResult<PolicyFile> {
        let m = fit_linear(log, mode, kind.label(), window.unwrap_or(n), &config)
            .map_err(|e| CliError::data(e.to_string()))?;
        Ok(PolicyFile::Linear(m))
    };
    match (kind, &logs) {
        (EstimatorKind::Implicit, LogFile::Augmented(l)) => {
            linear(TrainingLog::Augmented(l), TrainingMode::Implicit, l.len())
        }
        (EstimatorKind::Naive, LogFile::Augmented(l)) => {
            linear(TrainingLog::Augmented(l), TrainingMode::NaiveImplicit, l.len())
        }
        (EstimatorKind::Ips, LogFile::Raw(l)) => {
            linear(TrainingLog::Raw(l), TrainingMode::Ips, l.len())
        }
        (EstimatorKind::Direct, LogFile::Raw(l)) => {
            let f = implicit_cf::policy::Featurizer::from_contexts(l.iter().map(|r| &r.context));
            let mut m = implicit_cf::estimators::direct_method_fit(l, &f, &config)?;
            m.trained_on.window = window.unwrap_or(l.len());
            Ok(PolicyFile::Linear(m))
        }
        (EstimatorKind::Survival, LogFile::Raw(l)) => {
            let (_, fixed) =
                implicit_cf::estimators::survival_fit_policy(l, &SurvivalConfig::default())?;
            Ok(PolicyFile::Fixed {
                fixed_action: fixed.0,
            })
        }
        (EstimatorKind::ExplorationOnly, LogFile::Raw(l)) => {
            let model = feedback_model(env, cost);
            let explored: Vec<LoggedDecision> = implicit_cf::estimators::exploration_records(l)
                .into_iter()
                .cloned()
                .collect();
            if explored.is_empty() {
                return Err(EstimateError::NoExplorationRecords.into());
            }
            let aug = augment_all(model.as_ref(), &explored)
                .map_err(|e| CliError::data(e.to_string()))?;
            linear(TrainingLog::Augmented(&aug), TrainingMode::FullFeedback, l.len())
        }
        (k, _) if k.needs_augmented() => Err(incompatible("an augmented log")),
        _ => Err(incompatible("a raw log")),
    }
}

fn run_cmd(args: RunArgs, abtest: bool) -> CliResult<()> {
    let mut plan: ExperimentPlan = read_json(&args.plan)?;
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    if let Some(e) = args.epsilon {
        plan.epsilon = e;
    }
    if let Some(e) = args.explore {
        plan.explore = e.into();
    }
    if let Some(w) = args.window {
        plan.window_size = Some(w);
    }
    if let Some(r) = args.retrain_every {
        plan.retrain_every = r;
    }
    if let Some(b) = args.bootstrap {
        plan.bootstrap = b;
    }
    plan.validate()?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::config(format!("{}: {e}", args.out.display())))?;
    let report = if abtest {
        run_abtest(&plan)?
    } else {
        run_continuous(&plan)?
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::data(e.to_string()))?;
    write_atomic(&args.out.join("report.json"), json.as_bytes())?;
    write_atomic(&args.out.join("costs.csv"), report.costs_csv()?.as_bytes())?;
    write_atomic(&args.out.join("estimates.csv"), report.estimates_csv()?.as_bytes())?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!(
        "{:<18} {:>8} {:>9} {:>12} {:>12}",
        "policy", "records", "retrains", "mean cost", "normalized"
    );
    for lane in &report.lanes {
        let kind = LaneKind::ALL
            .into_iter()
            .find(|k| k.label() == lane.lane)
            .expect("lane labels come from LaneKind");
        let rows = report.series(kind);
        let mean_cost = rows.iter().map(|r| r.mean_cost).sum::<f64>() / rows.len().max(1) as f64;
        let normalized = rows
            .iter()
            .map(|r| r.normalized)
            .sum::<Option<f64>>()
            .map(|s| format!("{:.4}", s / rows.len().max(1) as f64))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<18} {:>8} {:>9} {:>12.4} {:>12}",
            lane.lane, lane.records, lane.retrains, mean_cost, normalized
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTrace(a) => gen_trace(a),
        Command::Replay(a) => replay(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Loop(a) => run_cmd(a, false),
        Command::Abtest(a) => run_cmd(a, true),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
