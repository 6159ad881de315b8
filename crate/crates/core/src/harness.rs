//! Continuous-retraining experiments.
//!
//! An experiment runs several policy variants ("lanes") through the phases
//! of a simulated environment. Each lane logs what its own decisions reveal
//! and periodically retrains from scratch on its own trailing window. The
//! environment oracle scores every deployed decision, and at the end each
//! requested estimator is checked against the oracle on the final windows.
//!
//! [`run_continuous`] shows every event to every lane. [`run_abtest`] routes
//! each event to one lane chosen uniformly at random.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{
    action_union, direct_method_fit, estimate, survival_fit_policy, EstimateError, EstimateOptions,
    EstimateReport, EstimatorKind, EvalLog, SurvivalConfig, DEFAULT_QUANTILES,
};
use crate::feedback::{
    augment, ActionSpace, AugmentedRecord, Context, FeedbackError, LoggedDecision,
};
use crate::health::{
    generate_trace_with_prefix, GeneratorSpec, HealthConfig, HealthEnv, HealthError,
};
use crate::policy::{
    build_training_set, train, ExplorationConfig, ExplorationMode, Featurizer, FixedAction,
    LinearPolicyModel, MaxAction, Policy, TrainError, TrainedOn, TrainingConfig, TrainingLog,
    TrainingMode,
};
use crate::scale::{
    generate_requests, realize_events, CompletionModel, CostVariant, RequestSpec, ScaleConfig,
    ScaleEnv, ScaleError,
};
use crate::sim::{decide, full_feedback_record, mean, stream_rng, Simulator};

/// Trailing window for health experiments, in records.
pub const DEFAULT_HEALTH_WINDOW: usize = 20_000;
/// One week of requests at the default arrival rate of one per minute.
pub const DEFAULT_SCALE_WINDOW: usize = 7 * 24 * 60;
pub const DEFAULT_EPSILON: f64 = 0.1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("bad split boundaries {boundaries:?} for a trace of {len}")]
    BadBoundaries { boundaries: Vec<usize>, len: usize },

    #[error("truth must be positive, got {0}")]
    NonPositiveTruth(f64),

    #[error(transparent)]
    Health(#[from] HealthError),

    #[error(transparent)]
    Scale(#[from] ScaleError),

    #[error(transparent)]
    Estimate(#[from] EstimateError),

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Feedback(#[from] FeedbackError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

// ── Plan ────────────────────────────────────────────────────────────────

/// A policy variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LaneKind {
    /// Always the maximal action.
    V0,
    /// Trained once on the warmup and never updated.
    V1,
    /// Retrained on oracle full feedback; restarted at each phase.
    Omniscient,
    Direct,
    Naive,
    Ips,
    Survival,
    Implicit,
    ExplorationOnly,
}

impl LaneKind {
    pub const ALL: [LaneKind; 9] = [
        LaneKind::V0,
        LaneKind::V1,
        LaneKind::Omniscient,
        LaneKind::Direct,
        LaneKind::Naive,
        LaneKind::Ips,
        LaneKind::Survival,
        LaneKind::Implicit,
        LaneKind::ExplorationOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            LaneKind::V0 => "v0",
            LaneKind::V1 => "v1",
            LaneKind::Omniscient => "omniscient",
            LaneKind::Direct => "direct",
            LaneKind::Naive => "naive",
            LaneKind::Ips => "ips",
            LaneKind::Survival => "survival",
            LaneKind::Implicit => "implicit",
            LaneKind::ExplorationOnly => "exploration-only",
        }
    }

    /// Lanes that retrain on their own logs and therefore explore.
    pub fn explores(self) -> bool {
        !matches!(self, LaneKind::V0 | LaneKind::V1 | LaneKind::Omniscient)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthPhase {
    pub spec: GeneratorSpec,
    pub n_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePhase {
    #[serde(default)]
    pub spec: RequestSpec,
    pub n_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "lowercase")]
pub enum EnvPlan {
    Health {
        #[serde(default)]
        config: HealthConfig,
        phases: Vec<HealthPhase>,
    },
    Scale {
        #[serde(default)]
        config: ScaleConfig,
        #[serde(default)]
        model: CompletionModel,
        #[serde(default = "default_cost")]
        cost: CostVariant,
        phases: Vec<ScalePhase>,
    },
}

fn default_cost() -> CostVariant {
    CostVariant::Cost1
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_explore() -> ExplorationMode {
    ExplorationMode::Maximal
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(flatten)]
    pub env: EnvPlan,
    /// Records of v0 data behind the initial model; one window by default.
    #[serde(default)]
    pub warmup: Option<usize>,
    #[serde(default)]
    pub window_size: Option<usize>,
    pub retrain_every: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Exploration of the retrained lanes. The IPS lane always explores
    /// uniformly because IPS has no support for actions it never draws.
    #[serde(default = "default_explore")]
    pub explore: ExplorationMode,
    /// Empty means every lane the environment supports.
    #[serde(default)]
    pub lanes: Vec<LaneKind>,
    /// Estimators checked against the oracle at the end of the run.
    #[serde(default)]
    pub estimators: Vec<EstimatorKind>,
    /// Lanes whose final window is used for those checks. Empty means the
    /// implicit lane, or the first exploring lane without one.
    #[serde(default)]
    pub evaluate_on: Vec<LaneKind>,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub survival: SurvivalConfig,
    #[serde(default)]
    pub bootstrap: usize,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn env_label(&self) -> &'static str {
        match self.env {
            EnvPlan::Health { .. } => "health",
            EnvPlan::Scale { .. } => "scale",
        }
    }

    pub fn window(&self) -> usize {
        self.window_size.unwrap_or(match self.env {
            EnvPlan::Health { .. } => DEFAULT_HEALTH_WINDOW,
            EnvPlan::Scale { .. } => DEFAULT_SCALE_WINDOW,
        })
    }

    pub fn warmup_len(&self) -> usize {
        self.warmup.unwrap_or_else(|| self.window())
    }

    /// Lanes in canonical order.
    pub fn lane_kinds(&self) -> Vec<LaneKind> {
        let mut lanes = if self.lanes.is_empty() {
            LaneKind::ALL
                .into_iter()
                .filter(|k| *k != LaneKind::Survival || self.env_label() == "health")
                .collect()
        } else {
            self.lanes.clone()
        };
        lanes.sort();
        lanes.dedup();
        lanes
    }

    pub fn evaluation_lanes(&self) -> Vec<LaneKind> {
        if !self.evaluate_on.is_empty() || self.estimators.is_empty() {
            return self.evaluate_on.clone();
        }
        let lanes = self.lane_kinds();
        if lanes.contains(&LaneKind::Implicit) {
            return vec![LaneKind::Implicit];
        }
        lanes.into_iter().filter(|k| k.explores()).take(1).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidPlan(m));
        let n_phases = match &self.env {
            EnvPlan::Health { config, phases } => {
                config.validate()?;
                for p in phases {
                    p.spec.validate()?;
                }
                phases.len()
            }
            EnvPlan::Scale { config, phases, .. } => {
                config.validate()?;
                for p in phases {
                    p.spec.validate()?;
                }
                phases.len()
            }
        };
        if n_phases == 0 {
            return bad("no phases".into());
        }
        if self.window() == 0 {
            return bad("window_size must be positive".into());
        }
        if self.warmup_len() == 0 {
            return bad("warmup must be positive".into());
        }
        if self.retrain_every == 0 {
            return bad("retrain_every must be positive".into());
        }
        ExplorationConfig::new(self.epsilon, self.explore)?;
        self.training.validate()?;
        let lanes = self.lane_kinds();
        if lanes.is_empty() {
            return bad("no lanes".into());
        }
        let scale = self.env_label() == "scale";
        if scale && lanes.contains(&LaneKind::Survival) {
            return bad("the survival lane needs the health environment".into());
        }
        if scale && self.estimators.contains(&EstimatorKind::Survival) {
            return bad("the survival estimator needs the health environment".into());
        }
        for lane in self.evaluation_lanes() {
            if !lanes.contains(&lane) {
                return bad(format!("evaluate_on lane {} is not run", lane.label()));
            }
            let explores = lane.explores() && self.epsilon > 0.0;
            if self.estimators.contains(&EstimatorKind::ExplorationOnly) && !explores {
                return bad(format!(
                    "exploration-only needs an exploring log; lane {} does not explore",
                    lane.label()
                ));
            }
        }
        if lanes.contains(&LaneKind::ExplorationOnly) && self.epsilon == 0.0 {
            return bad("the exploration-only lane needs epsilon > 0".into());
        }
        Ok(())
    }
}

// ── Report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub interval: usize,
    pub policy: String,
    pub mean_cost: f64,
    /// `mean_cost` over v0's mean cost on the same interval.
    pub normalized: Option<f64>,
    /// Oracle cost of the deployed model without exploration, over every
    /// event of the interval.
    pub greedy_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub deployed: String,
    pub candidate: String,
    pub estimator: String,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub truth: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalInfo {
    pub index: usize,
    pub phase: usize,
    /// Events in the interval, across all lanes.
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSummary {
    pub lane: String,
    pub policy_id: String,
    /// Decisions this lane made.
    pub records: usize,
    pub retrains: usize,
    /// Intervals whose retraining failed; the previous model stayed deployed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_retrains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<LinearPolicyModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_action: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub env: String,
    pub seed: u64,
    pub window_size: usize,
    pub retrain_every: usize,
    pub lanes: Vec<LaneSummary>,
    pub intervals: Vec<IntervalInfo>,
    pub costs: Vec<CostRow>,
    pub estimates: Vec<EstimateRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn costs_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.costs)
    }

    pub fn estimates_csv(&self) -> Result<String, HarnessError> {
        to_csv(&self.estimates)
    }

    pub fn lane(&self, kind: LaneKind) -> Option<&LaneSummary> {
        self.lanes.iter().find(|l| l.lane == kind.label())
    }

    /// One lane's rows in interval order.
    pub fn series(&self, kind: LaneKind) -> Vec<&CostRow> {
        self.costs
            .iter()
            .filter(|r| r.policy == kind.label())
            .collect()
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
}

// ── Counterfactual error ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualError {
    pub bias: f64,
    pub relative_error: f64,
    /// Whether the interval contains the truth; `None` without an interval.
    pub covered: Option<bool>,
}

pub fn counterfactual_error(
    estimate: &EstimateReport,
    truth: f64,
) -> Result<CounterfactualError, HarnessError> {
    if !(truth > 0.0) {
        return Err(HarnessError::NonPositiveTruth(truth));
    }
    let bias = estimate.mean - truth;
    Ok(CounterfactualError {
        bias,
        relative_error: bias / truth,
        covered: estimate.ci.map(|[lo, hi]| lo <= truth && truth <= hi),
    })
}

// ── Trace splits ────────────────────────────────────────────────────────

/// Contiguous phases cut at `boundaries`, labelled `S1`, `S2`, ...
pub fn split_trace<'a, T>(
    trace: &'a [T],
    boundaries: &[usize],
) -> Result<Vec<(String, &'a [T])>, HarnessError> {
    let ok = boundaries.windows(2).all(|w| w[0] < w[1])
        && boundaries.iter().all(|&b| b > 0 && b < trace.len());
    if !ok {
        return Err(HarnessError::BadBoundaries {
            boundaries: boundaries.to_vec(),
            len: trace.len(),
        });
    }
    let mut cuts = vec![0];
    cuts.extend_from_slice(boundaries);
    cuts.push(trace.len());
    Ok(cuts
        .windows(2)
        .enumerate()
        .map(|(i, w)| (format!("S{}", i + 1), &trace[w[0]..w[1]]))
        .collect())
}

// ── Evaluation matrix ───────────────────────────────────────────────────

/// A deployed policy's log together with the events it was collected on.
pub struct DeployedLog<'a, E> {
    pub name: String,
    pub events: &'a [E],
    pub raw: &'a [LoggedDecision],
    pub augmented: &'a [AugmentedRecord],
}

/// Every estimator on every candidate for every log, against the oracle.
///
/// Estimators that fail on a log (no exploration records, say) are skipped
/// and reported in the second return value.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_matrix<S: Simulator>(
    sim: &S,
    logs: &[DeployedLog<'_, S::Event>],
    candidates: &[(String, &dyn Policy)],
    estimators: &[EstimatorKind],
    bootstrap: usize,
    seed: u64,
    training: &TrainingConfig,
    survival: &SurvivalConfig,
) -> (Vec<EstimateRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for log in logs {
        for (cand_name, cand) in candidates {
            let truth = mean(log.events.iter().map(|e| {
                let actions = sim.actions(e);
                sim.cost(e, cand.act(sim.context(e), &actions))
            }));
            for &kind in estimators {
                let options = EstimateOptions {
                    feedback: Some(sim.feedback()),
                    training: *training,
                    survival: *survival,
                    bootstrap,
                    quantiles: DEFAULT_QUANTILES,
                    seed,
                };
                let input = if kind.needs_augmented() {
                    EvalLog::Augmented(log.augmented)
                } else {
                    EvalLog::Raw(log.raw)
                };
                match estimate(kind, input, *cand, &options) {
                    Ok(r) => rows.push(EstimateRow {
                        deployed: log.name.clone(),
                        candidate: cand_name.clone(),
                        estimator: kind.label().into(),
                        mean: r.mean,
                        ci_low: r.ci.map(|c| c[0]),
                        ci_high: r.ci.map(|c| c[1]),
                        truth,
                        bias: r.mean - truth,
                    }),
                    Err(e) => skipped.push(format!(
                        "{} on {} for {}: {e}",
                        kind.label(),
                        log.name,
                        cand_name
                    )),
                }
            }
        }
    }
    (rows, skipped)
}

// ── Lanes ───────────────────────────────────────────────────────────────

/// What a lane currently deploys.
#[derive(Debug, Clone, PartialEq)]
pub enum LanePolicy {
    Max,
    Linear(LinearPolicyModel),
    Fixed(FixedAction),
}

impl Policy for LanePolicy {
    fn act(&self, context: &Context, actions: &ActionSpace) -> u32 {
        match self {
            LanePolicy::Max => MaxAction.act(context, actions),
            LanePolicy::Linear(m) => m.act(context, actions),
            LanePolicy::Fixed(f) => f.act(context, actions),
        }
    }

    fn policy_id(&self) -> String {
        match self {
            LanePolicy::Max => MaxAction.policy_id(),
            LanePolicy::Linear(m) => m.policy_id(),
            LanePolicy::Fixed(f) => f.policy_id(),
        }
    }
}

/// Train a linear policy from scratch on one window.
pub fn fit_linear(
    log: TrainingLog<'_>,
    mode: TrainingMode,
    label: &str,
    window: usize,
    config: &TrainingConfig,
) -> Result<LinearPolicyModel, TrainError> {
    let (featurizer, actions, n) = match log {
        TrainingLog::Raw(l) => (
            Featurizer::from_contexts(l.iter().map(|r| &r.context)),
            action_union(l.iter().map(|r| &r.actions)),
            l.len(),
        ),
        TrainingLog::Augmented(l) => (
            Featurizer::from_contexts(l.iter().map(|r| &r.context)),
            action_union(l.iter().map(|r| &r.actions)),
            l.len(),
        ),
    };
    let samples = build_training_set(log, mode, &featurizer)?;
    let trained_on = TrainedOn {
        estimator: label.into(),
        n,
        window,
    };
    train(&samples, &featurizer, &actions, config, trained_on)
}

/// Full-feedback records of the warmup, as v0 logs them.
pub fn warmup_records<S: Simulator>(sim: &S, events: &[S::Event]) -> Vec<AugmentedRecord> {
    events
        .iter()
        .map(|e| full_feedback_record(sim, e))
        .collect()
}

/// The one-shot model trained on v0's warmup. Every retrained lane starts
/// from it.
pub fn v1_model(
    warmup: &[AugmentedRecord],
    window: usize,
    config: &TrainingConfig,
) -> Result<LinearPolicyModel, TrainError> {
    fit_linear(
        TrainingLog::Augmented(warmup),
        TrainingMode::FullFeedback,
        LaneKind::V1.label(),
        window,
        config,
    )
}

struct Lane {
    kind: LaneKind,
    policy: LanePolicy,
    explore: ExplorationConfig,
    rng: ChaCha8Rng,
    raw: VecDeque<LoggedDecision>,
    augmented: VecDeque<AugmentedRecord>,
    /// Global event index of each window record.
    events: VecDeque<usize>,
    /// Oracle full feedback, omniscient lane only.
    oracle: VecDeque<AugmentedRecord>,
    records: usize,
    retrains: usize,
    failed: Vec<String>,
}

impl Lane {
    fn trim(&mut self, window: usize) {
        while self.raw.len() > window {
            self.raw.pop_front();
            self.augmented.pop_front();
            self.events.pop_front();
        }
        while self.oracle.len() > window {
            self.oracle.pop_front();
        }
    }

    fn fit(&mut self, ctx: &RunContext) -> Result<Option<LanePolicy>, HarnessError> {
        let window = ctx.window;
        let config = &ctx.training;
        let label = self.kind.label();
        let linear = |m: LinearPolicyModel| Some(LanePolicy::Linear(m));
        Ok(match self.kind {
            LaneKind::V0 | LaneKind::V1 => None,
            LaneKind::Omniscient => linear(fit_linear(
                TrainingLog::Augmented(self.oracle.make_contiguous()),
                TrainingMode::FullFeedback,
                label,
                window,
                config,
            )?),
            LaneKind::Implicit | LaneKind::Naive => {
                let mode = if self.kind == LaneKind::Implicit {
                    TrainingMode::Implicit
                } else {
                    TrainingMode::NaiveImplicit
                };
                linear(fit_linear(
                    TrainingLog::Augmented(self.augmented.make_contiguous()),
                    mode,
                    label,
                    window,
                    config,
                )?)
            }
            LaneKind::Ips => linear(fit_linear(
                TrainingLog::Raw(self.raw.make_contiguous()),
                TrainingMode::Ips,
                label,
                window,
                config,
            )?),
            LaneKind::Direct => {
                let raw = self.raw.make_contiguous();
                let featurizer = Featurizer::from_contexts(raw.iter().map(|r| &r.context));
                let mut m = direct_method_fit(raw, &featurizer, config)?;
                m.trained_on.window = window;
                linear(m)
            }
            LaneKind::Survival => {
                let (_, fixed) = survival_fit_policy(self.raw.make_contiguous(), &ctx.survival)?;
                Some(LanePolicy::Fixed(fixed))
            }
            LaneKind::ExplorationOnly => {
                let explored: Vec<AugmentedRecord> = self
                    .augmented
                    .iter()
                    .filter(|r| r.explored && r.source_action_index == r.actions.max_index())
                    .cloned()
                    .collect();
                if explored.is_empty() {
                    return Err(EstimateError::NoExplorationRecords.into());
                }
                linear(fit_linear(
                    TrainingLog::Augmented(&explored),
                    TrainingMode::FullFeedback,
                    label,
                    window,
                    config,
                )?)
            }
        })
    }

    fn retrain(&mut self, ctx: &RunContext, interval: usize) {
        match self.fit(ctx) {
            Ok(Some(policy)) => {
                self.policy = policy;
                self.retrains += 1;
            }
            Ok(None) => {}
            Err(e) => self.failed.push(format!("interval {interval}: {e}")),
        }
    }

    fn summary(&self) -> LaneSummary {
        LaneSummary {
            lane: self.kind.label().into(),
            policy_id: self.policy.policy_id(),
            records: self.records,
            retrains: self.retrains,
            failed_retrains: self.failed.clone(),
            model: match &self.policy {
                LanePolicy::Linear(m) => Some(m.clone()),
                _ => None,
            },
            fixed_action: match &self.policy {
                LanePolicy::Fixed(f) => Some(f.0),
                _ => None,
            },
        }
    }
}

struct RunContext {
    window: usize,
    training: TrainingConfig,
    survival: SurvivalConfig,
}

/// Events of one experiment, drawn up front.
pub struct World<S: Simulator> {
    pub sim: S,
    pub warmup: Vec<S::Event>,
    pub phases: Vec<Vec<S::Event>>,
    /// Fresh oracle sample per phase for restarting the omniscient lane.
    pub restarts: Vec<Vec<S::Event>>,
}

/// Independent seed for one named part of an experiment.
pub fn sub_seed(seed: u64, part: u64) -> u64 {
    stream_rng(seed, 1_000 + part).random()
}

const WARMUP_PART: u64 = 1;
const ASSIGN_PART: u64 = 2;
const EVAL_PART: u64 = 3;
const EVENTS_PART: u64 = 4;
const LANE_PART: u64 = 100;
const RESTART_PART: u64 = 200;

pub fn health_world(
    config: &HealthConfig,
    phases: &[HealthPhase],
    warmup: usize,
    window: usize,
    seed: u64,
) -> Result<World<HealthEnv>, HarnessError> {
    let specs: Vec<(GeneratorSpec, usize)> = phases
        .iter()
        .map(|p| (p.spec.clone(), p.n_events))
        .collect();
    let all = generate_trace_with_prefix(&specs, sub_seed(seed, EVENTS_PART), "e")?;
    let mut split = Vec::with_capacity(phases.len());
    let mut rest = all.as_slice();
    for p in phases {
        let (head, tail) = rest.split_at(p.n_events);
        split.push(head.to_vec());
        rest = tail;
    }
    let warm = generate_trace_with_prefix(
        &[(phases[0].spec.clone(), warmup)],
        sub_seed(seed, WARMUP_PART),
        "w",
    )?;
    let restarts = phases
        .iter()
        .enumerate()
        .map(|(i, p)| {
            generate_trace_with_prefix(
                &[(p.spec.clone(), window)],
                sub_seed(seed, RESTART_PART + i as u64),
                &format!("o{i}-"),
            )
        })
        .collect::<Result<_, _>>()?;
    Ok(World {
        sim: HealthEnv::new(config.clone()),
        warmup: warm,
        phases: split,
        restarts,
    })
}

pub fn scale_world(
    config: &ScaleConfig,
    model: &CompletionModel,
    cost: CostVariant,
    phases: &[ScalePhase],
    warmup: usize,
    window: usize,
    seed: u64,
) -> Result<World<ScaleEnv>, HarnessError> {
    let specs: Vec<(RequestSpec, usize)> = phases
        .iter()
        .map(|p| (p.spec.clone(), p.n_events))
        .collect();
    let requests = generate_requests(&specs, sub_seed(seed, EVENTS_PART), "r")?;
    let all = realize_events(&requests, model, sub_seed(seed, EVENTS_PART))?;
    let mut split = Vec::with_capacity(phases.len());
    let mut rest = all.as_slice();
    for p in phases {
        let (head, tail) = rest.split_at(p.n_events);
        split.push(head.to_vec());
        rest = tail;
    }
    let realize = |spec: &RequestSpec, n: usize, part: u64, prefix: &str| {
        let s = sub_seed(seed, part);
        let reqs = generate_requests(&[(spec.clone(), n)], s, prefix)?;
        realize_events(&reqs, model, s)
    };
    let warm = realize(&phases[0].spec, warmup, WARMUP_PART, "w")?;
    let restarts = phases
        .iter()
        .enumerate()
        .map(|(i, p)| realize(&p.spec, window, RESTART_PART + i as u64, &format!("o{i}-")))
        .collect::<Result<_, ScaleError>>()?;
    Ok(World {
        sim: ScaleEnv::new(cost, config.clone()),
        warmup: warm,
        phases: split,
        restarts,
    })
}

// ── Runs ────────────────────────────────────────────────────────────────

/// Every lane sees every event.
pub fn run_continuous(plan: &ExperimentPlan) -> Result<RunReport, HarnessError> {
    run_plan(plan, false)
}

/// Each event goes to one lane chosen uniformly at random.
pub fn run_abtest(plan: &ExperimentPlan) -> Result<RunReport, HarnessError> {
    run_plan(plan, true)
}

/// The v1 model a plan's lanes start from.
pub fn plan_v1_model(plan: &ExperimentPlan) -> Result<LinearPolicyModel, HarnessError> {
    plan.validate()?;
    let warmup = plan_warmup(plan)?;
    Ok(v1_model(&warmup, plan.window(), &plan.training)?)
}

/// v0's full-feedback warmup log for a plan.
pub fn plan_warmup(plan: &ExperimentPlan) -> Result<Vec<AugmentedRecord>, HarnessError> {
    plan.validate()?;
    let (w, win, seed) = (plan.warmup_len(), plan.window(), plan.seed);
    Ok(match &plan.env {
        EnvPlan::Health { config, phases } => {
            let world = health_world(config, &phases[..1], w, win, seed)?;
            warmup_records(&world.sim, &world.warmup)
        }
        EnvPlan::Scale {
            config,
            model,
            cost,
            phases,
        } => {
            let world = scale_world(config, model, *cost, &phases[..1], w, win, seed)?;
            warmup_records(&world.sim, &world.warmup)
        }
    })
}

fn run_plan(plan: &ExperimentPlan, split: bool) -> Result<RunReport, HarnessError> {
    plan.validate()?;
    let (w, win, seed) = (plan.warmup_len(), plan.window(), plan.seed);
    match &plan.env {
        EnvPlan::Health { config, phases } => {
            let world = health_world(config, phases, w, win, seed)?;
            let mut plan = plan.clone();
            plan.survival.reboot_cost = config.reboot_cost;
            run_world(&world, &plan, split)
        }
        EnvPlan::Scale {
            config,
            model,
            cost,
            phases,
        } => {
            let world = scale_world(config, model, *cost, phases, w, win, seed)?;
            run_world(&world, plan, split)
        }
    }
}

/// Run the lanes of `plan` over a prepared world.
pub fn run_world<S: Simulator>(
    world: &World<S>,
    plan: &ExperimentPlan,
    split: bool,
) -> Result<RunReport, HarnessError> {
    let sim = &world.sim;
    let window = plan.window();
    let ctx = RunContext {
        window,
        training: plan.training,
        survival: plan.survival,
    };
    let warmup = warmup_records(sim, &world.warmup);
    let v1 = v1_model(&warmup, window, &plan.training)?;
    let kinds = plan.lane_kinds();
    let mut lanes: Vec<Lane> = kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let explore = lane_exploration(plan, kind)?;
            Ok(Lane {
                kind,
                policy: if kind == LaneKind::V0 {
                    LanePolicy::Max
                } else {
                    LanePolicy::Linear(v1.clone())
                },
                explore,
                rng: stream_rng(sub_seed(plan.seed, LANE_PART + i as u64), 0),
                raw: VecDeque::new(),
                augmented: VecDeque::new(),
                events: VecDeque::new(),
                oracle: VecDeque::new(),
                records: 0,
                retrains: 0,
                failed: Vec::new(),
            })
        })
        .collect::<Result<_, HarnessError>>()?;

    let all_events: Vec<&S::Event> = world.phases.iter().flatten().collect();
    let assignment: Vec<usize> = if split {
        let mut rng = stream_rng(sub_seed(plan.seed, ASSIGN_PART), 0);
        all_events
            .iter()
            .map(|_| crate::scale::abc_assign(lanes.len(), &mut rng))
            .collect()
    } else {
        Vec::new()
    };

    let mut intervals = Vec::new();
    let mut costs = Vec::new();
    let mut offset = 0;
    for (phase, events) in world.phases.iter().enumerate() {
        lanes.par_iter_mut().for_each(|lane| {
            if lane.kind == LaneKind::Omniscient {
                lane.oracle = warmup_records(sim, &world.restarts[phase]).into();
                lane.trim(window);
                lane.retrain(&ctx, intervals.len());
            }
        });
        for chunk_start in (0..events.len()).step_by(plan.retrain_every) {
            let chunk_end = (chunk_start + plan.retrain_every).min(events.len());
            let interval = intervals.len();
            let range = offset + chunk_start..offset + chunk_end;
            let means: Vec<Result<(f64, f64), HarnessError>> = lanes
                .par_iter_mut()
                .enumerate()
                .map(|(li, lane)| {
                    let greedy = mean(range.clone().map(|g| {
                        let e = all_events[g];
                        let actions = sim.actions(e);
                        sim.cost(e, lane.policy.act(sim.context(e), &actions))
                    }));
                    let mut realized = Vec::new();
                    for g in range.clone() {
                        if split && assignment[g] != li {
                            continue;
                        }
                        let event = all_events[g];
                        let record = decide(sim, event, &lane.policy, &lane.explore, &mut lane.rng);
                        realized.push(record.realized_cost);
                        if lane.kind == LaneKind::Omniscient {
                            lane.oracle.push_back(full_feedback_record(sim, event));
                        }
                        lane.augmented.push_back(augment(sim.feedback(), &record)?);
                        lane.raw.push_back(record);
                        lane.events.push_back(g);
                        lane.records += 1;
                    }
                    lane.trim(window);
                    lane.retrain(&ctx, interval);
                    Ok((mean(realized), greedy))
                })
                .collect();
            let means = means.into_iter().collect::<Result<Vec<_>, _>>()?;
            let base = kinds
                .iter()
                .position(|k| *k == LaneKind::V0)
                .map(|i| means[i].0)
                .filter(|b| *b > 0.0);
            for (lane, &(m, greedy)) in lanes.iter().zip(&means) {
                costs.push(CostRow {
                    interval,
                    policy: lane.kind.label().into(),
                    mean_cost: m,
                    normalized: base.map(|b| m / b),
                    greedy_cost: greedy,
                });
            }
            intervals.push(IntervalInfo {
                index: interval,
                phase,
                events: chunk_end - chunk_start,
            });
        }
        offset += events.len();
    }

    let mut notes: Vec<String> = Vec::new();
    let mut estimates = Vec::new();
    if !plan.estimators.is_empty() {
        let candidates: Vec<(String, &dyn Policy)> = lanes
            .iter()
            .map(|l| (l.kind.label().to_string(), &l.policy as &dyn Policy))
            .collect();
        for kind in plan.evaluation_lanes() {
            let lane = lanes.iter().find(|l| l.kind == kind).expect("validated");
            let events: Vec<S::Event> =
                lane.events.iter().map(|&g| all_events[g].clone()).collect();
            let raw: Vec<LoggedDecision> = lane.raw.iter().cloned().collect();
            let augmented: Vec<AugmentedRecord> = lane.augmented.iter().cloned().collect();
            let log = DeployedLog {
                name: kind.label().into(),
                events: &events,
                raw: &raw,
                augmented: &augmented,
            };
            let (rows, skipped) = evaluate_matrix(
                sim,
                std::slice::from_ref(&log),
                &candidates,
                &plan.estimators,
                plan.bootstrap,
                sub_seed(plan.seed, EVAL_PART),
                &plan.training,
                &plan.survival,
            );
            estimates.extend(rows);
            notes.extend(skipped);
        }
    }

    Ok(RunReport {
        env: plan.env_label().into(),
        seed: plan.seed,
        window_size: window,
        retrain_every: plan.retrain_every,
        lanes: lanes.iter().map(Lane::summary).collect(),
        intervals,
        costs,
        estimates,
        notes,
    })
}

/// Exploration used by a lane kind under `plan`.
pub fn lane_exploration(
    plan: &ExperimentPlan,
    kind: LaneKind,
) -> Result<ExplorationConfig, TrainError> {
    match kind {
        k if !k.explores() => Ok(ExplorationConfig::greedy()),
        LaneKind::Ips => ExplorationConfig::new(plan.epsilon, ExplorationMode::Uniform),
        _ => ExplorationConfig::new(plan.epsilon, plan.explore),
    }
}

/// Default plan: the four synthetic health phases.
pub fn default_health_plan(n_per_phase: usize, seed: u64) -> ExperimentPlan {
    ExperimentPlan {
        env: EnvPlan::Health {
            config: HealthConfig::default(),
            phases: crate::health::default_phases()
                .into_iter()
                .map(|spec| HealthPhase {
                    spec,
                    n_events: n_per_phase,
                })
                .collect(),
        },
        warmup: None,
        window_size: None,
        retrain_every: 5_000,
        epsilon: DEFAULT_EPSILON,
        explore: ExplorationMode::Maximal,
        lanes: Vec::new(),
        estimators: Vec::new(),
        evaluate_on: Vec::new(),
        training: TrainingConfig::default(),
        survival: SurvivalConfig::default(),
        bootstrap: 0,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::health::{ClusterParams, GeneratorSpec};

    fn small_plan(lanes: Vec<LaneKind>) -> ExperimentPlan {
        let spec = GeneratorSpec {
            clusters: vec![
                ClusterParams::new(0.1, 2.0, 8.0),
                ClusterParams::new(0.8, 2.0, 8.0),
            ],
            weights: vec![0.5, 0.5],
            n_vms_weights: vec![1.0],
            noise_features: 0,
            load_features: false,
            tau_scale: 10.0,
        };
        let mut plan = default_health_plan(0, 3);
        plan.env = EnvPlan::Health {
            config: HealthConfig::default(),
            phases: vec![HealthPhase {
                spec,
                n_events: 1_000,
            }],
        };
        plan.window_size = Some(500);
        plan.retrain_every = 250;
        plan.lanes = lanes;
        plan
    }

    #[test]
    fn v0_normalizes_to_one_and_v1_never_changes() {
        let plan = small_plan(vec![LaneKind::V0, LaneKind::V1, LaneKind::Implicit]);
        let report = run_continuous(&plan).unwrap();
        assert_eq!(report.intervals.len(), 4);
        for row in report.series(LaneKind::V0) {
            assert_eq!(row.normalized, Some(1.0));
        }
        let v1 = report.lane(LaneKind::V1).unwrap();
        assert_eq!(v1.retrains, 0);
        assert_eq!(v1.model.as_ref(), Some(&plan_v1_model(&plan).unwrap()));
        assert_eq!(report.lane(LaneKind::Implicit).unwrap().retrains, 4);
    }

    #[test]
    fn abtest_splits_records() {
        let plan = small_plan(vec![LaneKind::V0, LaneKind::V1, LaneKind::Implicit]);
        let report = run_abtest(&plan).unwrap();
        let total: usize = report.lanes.iter().map(|l| l.records).sum();
        assert_eq!(total, 1_000);
        assert!(report.lanes.iter().all(|l| l.records > 250));
    }

    #[test]
    fn plan_rejects_survival_on_scale() {
        let mut plan = small_plan(vec![LaneKind::Survival]);
        plan.env = EnvPlan::Scale {
            config: ScaleConfig::default(),
            model: CompletionModel::default(),
            cost: CostVariant::Cost1,
            phases: vec![ScalePhase {
                spec: RequestSpec::default(),
                n_events: 10,
            }],
        };
        assert!(matches!(plan.validate(), Err(HarnessError::InvalidPlan(_))));
        plan.lanes = vec![LaneKind::V0];
        plan.estimators = vec![EstimatorKind::Survival];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn split_trace_boundaries() {
        let t: Vec<u32> = (0..10).collect();
        assert_eq!(split_trace(&t, &[]).unwrap().len(), 1);
        let s = split_trace(&t, &[5]).unwrap();
        assert_eq!(s[0].0, "S1");
        assert_eq!(s[1].1, &t[5..]);
        assert!(split_trace(&t, &[5, 5]).is_err());
        assert!(split_trace(&t, &[10]).is_err());
        assert!(split_trace(&t, &[0]).is_err());
    }

    #[test]
    fn counterfactual_error_basics() {
        let mut r = EstimateReport {
            estimator: "x".into(),
            policy_id: "p".into(),
            mean: 10.9,
            n: 1,
            n_matched: 1,
            ci: Some([9.0, 11.0]),
            seed: None,
            fallback_actions: vec![],
            contributions: vec![],
        };
        let e = counterfactual_error(&r, 10.0).unwrap();
        assert!((e.relative_error - 0.09).abs() < 1e-12);
        assert_eq!(e.covered, Some(true));
        r.mean = 10.0;
        let e = counterfactual_error(&r, 10.0).unwrap();
        assert_eq!((e.bias, e.relative_error), (0.0, 0.0));
        assert!(counterfactual_error(&r, 0.0).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = small_plan(vec![LaneKind::V0, LaneKind::ExplorationOnly]);
        let s = serde_json::to_string(&plan).unwrap();
        assert!(s.contains("\"env\":\"health\""));
        let back: ExperimentPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, plan);
    }
}
