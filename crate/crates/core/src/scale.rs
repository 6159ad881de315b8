//! VM over-allocation decisions.
//!
//! A request for `k` VMs is served by creating `k + a` VMs and returning the
//! first `k` to complete. The completion time of the request is the `k`-th
//! smallest creation time among the first `k + a` issued VMs, so logging
//! every creation time reveals the completion time of every smaller
//! over-allocation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::feedback::{
    ActionSpace, Context, FeedbackError, FeedbackModel, LoggedDecision, Outcome,
};
use crate::policy::{explore_wrap, ExplorationConfig, Policy};
use crate::sim::{stream_rng, Simulator};

/// Largest request the simulator issues, in VMs.
pub const MAX_BATCH: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("need at least {needed} completion times, got {got}")]
    InsufficientTimes { needed: usize, got: usize },

    #[error("unknown vm type {0:?}")]
    UnknownVmType(String),

    #[error("invalid scale config: {0}")]
    InvalidConfig(String),

    #[error("assumption check needs at least 10 trials, got {0}")]
    TooFewTrials(usize),
}

impl From<ScaleError> for FeedbackError {
    fn from(e: ScaleError) -> Self {
        FeedbackError::OutcomeMismatch(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostVariant {
    /// Penalises missing the response-time objective; reveals every
    /// over-allocation once the objective is met.
    Cost1,
    /// Also penalises meeting the objective by too much; reveals only
    /// smaller over-allocations.
    Cost2,
}

impl CostVariant {
    pub fn cost(self, t: f64, a: u32, config: &ScaleConfig) -> f64 {
        match self {
            CostVariant::Cost1 => cost1(t, a, config),
            CostVariant::Cost2 => cost2(t, a, config),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CostVariant::Cost1 => "cost1",
            CostVariant::Cost2 => "cost2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    /// Median-response-time objective, seconds.
    pub mrt_seconds: f64,
    pub max_cost_seconds: f64,
    /// Cost of one over-allocated VM, in seconds of lateness.
    pub gamma: f64,
    /// Action grid as fractions of `cap(k)`.
    pub fractions: Vec<f64>,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            mrt_seconds: 80.0,
            max_cost_seconds: 100.0,
            gamma: 13.0,
            fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<(), ScaleError> {
        let f = &self.fractions;
        if f.is_empty()
            || f[0] != 0.0
            || f[f.len() - 1] != 1.0
            || f.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ScaleError::InvalidConfig(format!(
                "fractions must increase from 0 to 1: {f:?}"
            )));
        }
        if !(self.mrt_seconds >= 0.0 && self.max_cost_seconds > 0.0 && self.gamma >= 0.0) {
            return Err(ScaleError::InvalidConfig("negative constants".into()));
        }
        Ok(())
    }

    /// Over-allocation cap: `⌈0.2k⌉`, or `k` for requests of at most 4 VMs.
    pub fn cap(k: u32) -> u32 {
        if k <= 4 {
            k
        } else {
            k.div_ceil(5)
        }
    }

    /// Fractions of the cap, rounded half away from zero and deduplicated.
    pub fn grid(&self, k: u32) -> ActionSpace {
        let cap = f64::from(Self::cap(k));
        let mut values: Vec<u32> = self
            .fractions
            .iter()
            .map(|f| (f * cap).round() as u32)
            .collect();
        values.dedup();
        ActionSpace::new(values).expect("fractions are increasing")
    }
}

/// `k`-th smallest time among the first `k + a_prime` issued VMs.
pub fn completion_time(times: &[f64], k: u32, a_prime: u32) -> Result<f64, ScaleError> {
    let n = (k + a_prime) as usize;
    if k == 0 || times.len() < n {
        return Err(ScaleError::InsufficientTimes {
            needed: n.max(1),
            got: times.len(),
        });
    }
    let mut first: Vec<f64> = times[..n].to_vec();
    first.sort_by(f64::total_cmp);
    Ok(first[k as usize - 1])
}

pub fn cost1(t: f64, a: u32, config: &ScaleConfig) -> f64 {
    let late = if t > config.mrt_seconds {
        (t - config.mrt_seconds).min(config.max_cost_seconds)
    } else {
        0.0
    };
    late + config.gamma * f64::from(a)
}

pub fn cost2(t: f64, a: u32, config: &ScaleConfig) -> f64 {
    let mrt = config.mrt_seconds;
    let raw = 0.99 * (t - mrt).max(0.0) + 0.01 * (mrt - t).max(0.0) + config.gamma * f64::from(a);
    raw.min(config.max_cost_seconds)
}

// ── Feedback model ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFeedback {
    pub variant: CostVariant,
    pub config: ScaleConfig,
}

impl ScaleFeedback {
    pub fn new(variant: CostVariant, config: ScaleConfig) -> Self {
        Self { variant, config }
    }

    fn times(record: &LoggedDecision) -> Result<(&[f64], u32), FeedbackError> {
        match &record.outcome {
            Outcome::Scale { times, k } => {
                if times.len() != (*k + record.chosen_action()) as usize {
                    return Err(FeedbackError::OutcomeMismatch(format!(
                        "{} times for k={k}, a={}",
                        times.len(),
                        record.chosen_action()
                    )));
                }
                Ok((times, *k))
            }
            _ => Err(FeedbackError::OutcomeMismatch(
                "health outcome given to the scale model".into(),
            )),
        }
    }

    /// Smallest logged grid action whose completion time meets the objective.
    fn smallest_meeting(&self, record: &LoggedDecision) -> Result<Option<u32>, FeedbackError> {
        let (times, k) = Self::times(record)?;
        let chosen = record.chosen_action();
        for &a in record.actions.values().iter().take_while(|a| **a <= chosen) {
            if completion_time(times, k, a)? <= self.config.mrt_seconds {
                return Ok(Some(a));
            }
        }
        Ok(None)
    }
}

impl FeedbackModel for ScaleFeedback {
    fn name(&self) -> &'static str {
        match self.variant {
            CostVariant::Cost1 => "scale-cost1",
            CostVariant::Cost2 => "scale-cost2",
        }
    }

    fn deduced_cost(
        &self,
        record: &LoggedDecision,
        target: u32,
    ) -> Result<Option<f64>, FeedbackError> {
        record.actions.require_index(target)?;
        let (times, k) = Self::times(record)?;
        let chosen = record.chosen_action();
        if target <= chosen {
            let t = completion_time(times, k, target)?;
            return Ok(Some(self.variant.cost(t, target, &self.config)));
        }
        match self.variant {
            CostVariant::Cost1 => {
                // t(target) ≤ t(chosen) ≤ MRT, so only the over-allocation term remains
                let t = completion_time(times, k, chosen)?;
                Ok((t <= self.config.mrt_seconds).then(|| self.config.gamma * f64::from(target)))
            }
            CostVariant::Cost2 => Ok(None),
        }
    }

    fn event_probability(
        &self,
        record: &LoggedDecision,
        target: u32,
    ) -> Result<f64, FeedbackError> {
        if self.deduced_cost(record, target)?.is_none() {
            return Err(FeedbackError::NotDeducible { target });
        }
        let threshold = match self.variant {
            CostVariant::Cost1 => self
                .smallest_meeting(record)?
                .map_or(target, |a_min| a_min.min(target)),
            CostVariant::Cost2 => target,
        };
        Ok(record
            .action_dist
            .tail_mass(&record.actions, f64::from(threshold)))
    }
}

// ── Completion-time model ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmTypeParams {
    pub name: String,
    pub median_seconds: f64,
    /// Log-space standard deviation.
    pub sigma: f64,
}

/// Per-VM creation latencies: lognormal per VM type, scaled by a time-of-day
/// multiplier `1 + amplitude · sin(2π · hour / 24)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionModel {
    pub vm_types: Vec<VmTypeParams>,
    pub diurnal_amplitude: f64,
    /// Latencies do not depend on the batch size.
    pub independent: bool,
    /// Extra seconds per VM in the batch when not independent.
    #[serde(default)]
    pub batch_seconds_per_vm: f64,
}

impl Default for CompletionModel {
    fn default() -> Self {
        let t = |name: &str, median_seconds, sigma| VmTypeParams {
            name: name.into(),
            median_seconds,
            sigma,
        };
        Self {
            vm_types: vec![
                t("small", 45.0, 0.45),
                t("medium", 55.0, 0.5),
                t("large", 65.0, 0.55),
            ],
            diurnal_amplitude: 0.2,
            independent: true,
            batch_seconds_per_vm: 0.0,
        }
    }
}

pub fn hour_of_day(timestamp: i64) -> f64 {
    timestamp.rem_euclid(86_400) as f64 / 3600.0
}

impl CompletionModel {
    /// Latencies grow with batch size.
    pub fn batch_dependent(seconds_per_vm: f64) -> Self {
        Self {
            independent: false,
            batch_seconds_per_vm: seconds_per_vm,
            ..Self::default()
        }
    }

    fn vm_type(&self, name: &str) -> Result<&VmTypeParams, ScaleError> {
        self.vm_types
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ScaleError::UnknownVmType(name.into()))
    }

    pub fn diurnal_multiplier(&self, timestamp: i64) -> f64 {
        1.0 + self.diurnal_amplitude * (2.0 * PI * hour_of_day(timestamp) / 24.0).sin()
    }

    /// `total` creation times in issue order.
    pub fn sample_times<R: Rng + ?Sized>(
        &self,
        vm_type: &str,
        timestamp: i64,
        total: u32,
        rng: &mut R,
    ) -> Result<Vec<f64>, ScaleError> {
        let params = self.vm_type(vm_type)?;
        let base = params.median_seconds * self.diurnal_multiplier(timestamp);
        let batch = if self.independent {
            0.0
        } else {
            self.batch_seconds_per_vm * f64::from(total)
        };
        Ok((0..total)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                base * (params.sigma * z).exp() + batch
            })
            .collect())
    }
}

// ── Requests ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleRequest {
    pub id: String,
    pub ts: i64,
    pub k: u32,
    pub vm_type: String,
}

impl ScaleRequest {
    pub fn context(&self, model: &CompletionModel) -> Context {
        let hour = hour_of_day(self.ts);
        let mut ctx = Context::new(self.id.clone(), self.ts)
            .with_feature("k", f64::from(self.k))
            .with_feature("hour_sin", (2.0 * PI * hour / 24.0).sin())
            .with_feature("hour_cos", (2.0 * PI * hour / 24.0).cos());
        for t in &model.vm_types {
            ctx.features.insert(
                format!("vm_{}", t.name),
                if t.name == self.vm_type { 1.0 } else { 0.0 },
            );
        }
        ctx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    /// `k_weights[i]` is the weight of a request for `i + 1` VMs.
    pub k_weights: Vec<f64>,
    /// Weight per VM type name.
    pub vm_type_weights: BTreeMap<String, f64>,
    pub mean_interarrival_seconds: f64,
}

impl Default for RequestSpec {
    fn default() -> Self {
        Self {
            k_weights: vec![0.3, 0.2, 0.15, 0.12, 0.08, 0.06, 0.05, 0.04],
            vm_type_weights: [("small", 0.4), ("medium", 0.35), ("large", 0.25)]
                .into_iter()
                .map(|(n, w)| (n.to_string(), w))
                .collect(),
            mean_interarrival_seconds: 60.0,
        }
    }
}

impl RequestSpec {
    pub fn validate(&self) -> Result<(), ScaleError> {
        if self.k_weights.is_empty()
            || self.k_weights.len() > MAX_BATCH as usize
            || self.k_weights.iter().any(|w| *w < 0.0)
            || self.k_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(ScaleError::InvalidConfig("k weights".into()));
        }
        if self.vm_type_weights.is_empty()
            || self.vm_type_weights.values().any(|w| *w < 0.0)
            || self.vm_type_weights.values().sum::<f64>() <= 0.0
        {
            return Err(ScaleError::InvalidConfig("vm type weights".into()));
        }
        if !(self.mean_interarrival_seconds > 0.0) {
            return Err(ScaleError::InvalidConfig("interarrival".into()));
        }
        Ok(())
    }
}

/// Requests of consecutive phases with exponential inter-arrival times.
pub fn generate_requests(
    phases: &[(RequestSpec, usize)],
    seed: u64,
    prefix: &str,
) -> Result<Vec<ScaleRequest>, ScaleError> {
    for (spec, _) in phases {
        spec.validate()?;
    }
    let mut rng = stream_rng(seed, 0);
    let mut ts = 0i64;
    let mut out = Vec::new();
    for (spec, n) in phases {
        let k_dist = WeightedIndex::new(&spec.k_weights).expect("validated");
        let names: Vec<&String> = spec.vm_type_weights.keys().collect();
        let type_dist = WeightedIndex::new(spec.vm_type_weights.values()).expect("validated");
        for _ in 0..*n {
            let u: f64 = rng.random();
            ts += (-spec.mean_interarrival_seconds * (1.0 - u).ln()).round() as i64;
            out.push(ScaleRequest {
                id: format!("{prefix}{}", out.len()),
                ts,
                k: k_dist.sample(&mut rng) as u32 + 1,
                vm_type: names[type_dist.sample(&mut rng)].clone(),
            });
        }
    }
    Ok(out)
}

/// A request together with creation times for its largest over-allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub request: ScaleRequest,
    pub context: Context,
    /// `k + cap(k)` creation times in issue order.
    pub times: Vec<f64>,
}

pub fn realize_events(
    requests: &[ScaleRequest],
    model: &CompletionModel,
    seed: u64,
) -> Result<Vec<ScaleEvent>, ScaleError> {
    let mut rng = stream_rng(seed, 1);
    requests
        .iter()
        .map(|r| {
            let total = r.k + ScaleConfig::cap(r.k);
            Ok(ScaleEvent {
                times: model.sample_times(&r.vm_type, r.ts, total, &mut rng)?,
                context: r.context(model),
                request: r.clone(),
            })
        })
        .collect()
}

// ── Simulation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleEnv {
    feedback: ScaleFeedback,
}

impl ScaleEnv {
    pub fn new(variant: CostVariant, config: ScaleConfig) -> Self {
        Self {
            feedback: ScaleFeedback::new(variant, config),
        }
    }

    pub fn config(&self) -> &ScaleConfig {
        &self.feedback.config
    }

    pub fn variant(&self) -> CostVariant {
        self.feedback.variant
    }

    /// The same environment scored with another cost.
    pub fn with_variant(&self, variant: CostVariant) -> Self {
        Self::new(variant, self.feedback.config.clone())
    }

    /// Recomputes a scale record's realized cost under this environment's
    /// cost variant.
    pub fn rescore(&self, record: &LoggedDecision) -> Result<LoggedDecision, FeedbackError> {
        let (times, k) = ScaleFeedback::times(record)?;
        let a = record.chosen_action();
        let t = completion_time(times, k, a)?;
        let mut out = record.clone();
        out.realized_cost = self.feedback.variant.cost(t, a, &self.feedback.config);
        Ok(out)
    }
}

impl Simulator for ScaleEnv {
    type Event = ScaleEvent;

    fn context<'a>(&self, event: &'a ScaleEvent) -> &'a Context {
        &event.context
    }

    fn actions(&self, event: &ScaleEvent) -> ActionSpace {
        self.feedback.config.grid(event.request.k)
    }

    fn outcome(&self, event: &ScaleEvent, action: u32) -> Outcome {
        let k = event.request.k;
        Outcome::Scale {
            times: event.times[..(k + action) as usize].to_vec(),
            k,
        }
    }

    fn cost(&self, event: &ScaleEvent, action: u32) -> f64 {
        let t = completion_time(&event.times, event.request.k, action)
            .expect("event holds times for the full grid");
        self.feedback.variant.cost(t, action, &self.feedback.config)
    }

    fn feedback(&self) -> &dyn FeedbackModel {
        &self.feedback
    }
}

/// Serve one request live: choose an over-allocation, create `k + a` VMs and
/// log every creation time.
pub fn simulate_request<P, R>(
    request: &ScaleRequest,
    policy: &P,
    explore: &ExplorationConfig,
    model: &CompletionModel,
    env: &ScaleEnv,
    rng: &mut R,
) -> Result<LoggedDecision, ScaleError>
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let context = request.context(model);
    let actions = env.config().grid(request.k);
    let d = explore_wrap(policy, explore, &context, &actions, rng);
    let times = model.sample_times(&request.vm_type, request.ts, request.k + d.action, rng)?;
    let t = completion_time(&times, request.k, d.action)?;
    Ok(LoggedDecision {
        context,
        realized_cost: env.variant().cost(t, d.action, env.config()),
        outcome: Outcome::Scale {
            times,
            k: request.k,
        },
        actions,
        action_index: d.action_index,
        action_dist: d.dist,
        explored: d.explored,
    })
}

/// Uniform independent assignment of a request to one of `n_policies` lanes.
pub fn abc_assign<R: Rng + ?Sized>(n_policies: usize, rng: &mut R) -> usize {
    if n_policies <= 1 {
        0
    } else {
        rng.random_range(0..n_policies)
    }
}

// ── Observed-potential-outcomes check ───────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub slope: f64,
    pub intercept: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Regress the completion time of `k` out of the first `k + a_prime` VMs on
/// a randomised total batch size in `[k + a_prime, 100]`. A high p-value
/// means the batch size has no detectable influence.
pub fn assumption_check<R: Rng + ?Sized>(
    n_trials: usize,
    k: u32,
    a_prime: u32,
    model: &CompletionModel,
    rng: &mut R,
) -> Result<AssumptionCheck, ScaleError> {
    if n_trials < 10 {
        return Err(ScaleError::TooFewTrials(n_trials));
    }
    let lo = k + a_prime;
    if k == 0 || lo > MAX_BATCH {
        return Err(ScaleError::InvalidConfig(format!(
            "k + a' = {lo} outside [1, {MAX_BATCH}]"
        )));
    }
    let mut xs = Vec::with_capacity(n_trials);
    let mut ys = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let total = rng.random_range(lo..=MAX_BATCH);
        let vm = &model.vm_types[rng.random_range(0..model.vm_types.len())];
        let ts = rng.random_range(0..86_400);
        let times = model.sample_times(&vm.name, ts, total, rng)?;
        xs.push(f64::from(total));
        ys.push(completion_time(&times, k, a_prime)?);
    }
    Ok(ols_slope_test(&xs, &ys))
}

fn ols_slope_test(xs: &[f64], ys: &[f64]) -> AssumptionCheck {
    let n = xs.len();
    let x_mean = xs.iter().sum::<f64>() / n as f64;
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let constant_y = ys.iter().all(|y| *y == ys[0]);
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    if constant_y || sxx == 0.0 {
        return AssumptionCheck {
            slope: 0.0,
            intercept: if constant_y { ys[0] } else { y_mean },
            p_value: 1.0,
            n,
        };
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let dof = (n - 2) as f64;
    let se = (ssr / dof / sxx).sqrt();
    let p_value = if se == 0.0 {
        0.0
    } else {
        let t = StudentsT::new(0.0, 1.0, dof).expect("dof > 0");
        2.0 * t.sf((slope / se).abs())
    };
    AssumptionCheck {
        slope,
        intercept,
        p_value,
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{augment, ActionDistribution};
    use crate::policy::{FixedAction, MaxAction};

    fn cfg() -> ScaleConfig {
        ScaleConfig::default()
    }

    #[test]
    fn completion_time_examples() {
        let times = [50.0, 10.0, 40.0, 20.0, 30.0];
        assert_eq!(completion_time(&times, 2, 0).unwrap(), 50.0);
        assert_eq!(completion_time(&times, 2, 2).unwrap(), 20.0);
        assert!(completion_time(&times, 2, 4).is_err());
        assert!(completion_time(&times, 0, 0).is_err());
    }

    #[test]
    fn cost_examples() {
        let c = cfg();
        assert_eq!(cost1(100.0, 2, &c), 46.0);
        assert_eq!(cost1(60.0, 3, &c), 39.0);
        assert_eq!(cost1(80.0, 0, &c), 0.0);
        assert_eq!(cost1(1000.0, 0, &c), 100.0);
        assert!((cost2(100.0, 0, &c) - 19.8).abs() < 1e-12);
        assert!((cost2(60.0, 1, &c) - 13.2).abs() < 1e-12);
        assert_eq!(cost2(10_000.0, 3, &c), 100.0);
    }

    #[test]
    fn grid_follows_cap() {
        let c = cfg();
        assert_eq!(ScaleConfig::cap(3), 3);
        assert_eq!(ScaleConfig::cap(5), 1);
        assert_eq!(ScaleConfig::cap(10), 2);
        assert_eq!(ScaleConfig::cap(100), 20);
        assert_eq!(c.grid(1).values(), &[0, 1]);
        assert_eq!(c.grid(2).values(), &[0, 1, 2]);
        assert_eq!(c.grid(4).values(), &[0, 1, 2, 3, 4]);
        assert_eq!(c.grid(10).values(), &[0, 1, 2]);
        assert_eq!(c.grid(100).values(), &[0, 5, 10, 15, 20]);
        for k in 1..=100 {
            assert_eq!(c.grid(k).max(), ScaleConfig::cap(k));
        }
    }

    fn record(times: Vec<f64>, k: u32, chosen: u32, variant: CostVariant) -> LoggedDecision {
        let actions = cfg().grid(k);
        let n = actions.len();
        let t = completion_time(&times, k, chosen).unwrap();
        LoggedDecision {
            context: Context::new("s", 0),
            action_index: actions.index_of(chosen).unwrap(),
            action_dist: ActionDistribution::uniform(n),
            actions,
            realized_cost: variant.cost(t, chosen, &cfg()),
            outcome: Outcome::Scale { times, k },
            explored: false,
        }
    }

    #[test]
    fn cost1_reveals_full_grid_when_objective_met() {
        let fb = ScaleFeedback::new(CostVariant::Cost1, cfg());
        // k = 4, a = 1: 4th smallest of 5 is 70 ≤ 80
        let r = record(vec![90.0, 60.0, 70.0, 50.0, 40.0], 4, 1, CostVariant::Cost1);
        let aug = augment(&fb, &r).unwrap();
        assert!(aug.is_full_feedback());
        assert_eq!(aug.entry_for(3).unwrap().cost, 39.0);
        assert_eq!(aug.entry_for(0).unwrap().cost, 10.0);
        // a_min is the 2nd grid action: uniform tail over {1,2,3,4} = 0.8
        let p = fb.event_probability(&r, 3).unwrap();
        assert!((p - 0.8).abs() < 1e-12);
        assert_eq!(aug.source_entry().unwrap().cost, r.realized_cost);
    }

    #[test]
    fn cost2_is_one_sided() {
        let fb = ScaleFeedback::new(CostVariant::Cost2, cfg());
        let r = record(vec![90.0, 60.0, 70.0, 50.0, 40.0], 4, 1, CostVariant::Cost2);
        assert_eq!(fb.deduced_cost(&r, 2).unwrap(), None);
        let aug = augment(&fb, &r).unwrap();
        let idx: Vec<usize> = aug.entries.iter().map(|e| e.action_index).collect();
        assert_eq!(idx, vec![0, 1]);
        assert!(fb.event_probability(&r, 2).is_err());
    }

    #[test]
    fn cost1_missed_objective_is_one_sided() {
        let fb = ScaleFeedback::new(CostVariant::Cost1, cfg());
        let r = record(
            vec![90.0, 95.0, 100.0, 85.0, 120.0],
            4,
            1,
            CostVariant::Cost1,
        );
        assert_eq!(fb.deduced_cost(&r, 2).unwrap(), None);
        let p = fb.event_probability(&r, 1).unwrap();
        assert!((p - 0.8).abs() < 1e-12);
    }

    #[test]
    fn maximal_action_is_full_feedback_for_both_costs() {
        let model = CompletionModel::default();
        let reqs = generate_requests(&[(RequestSpec::default(), 200)], 3, "r").unwrap();
        let events = realize_events(&reqs, &model, 3).unwrap();
        for variant in [CostVariant::Cost1, CostVariant::Cost2] {
            let env = ScaleEnv::new(variant, cfg());
            let mut rng = stream_rng(3, 9);
            let log = crate::sim::replay(
                &env,
                &events,
                &MaxAction,
                &ExplorationConfig::greedy(),
                &mut rng,
            );
            for r in &log {
                assert!(augment(env.feedback(), r).unwrap().is_full_feedback());
            }
        }
    }

    #[test]
    fn deterministic_latencies_give_gamma_cost() {
        let model = CompletionModel {
            vm_types: vec![VmTypeParams {
                name: "x".into(),
                median_seconds: 60.0,
                sigma: 0.0,
            }],
            diurnal_amplitude: 0.0,
            independent: true,
            batch_seconds_per_vm: 0.0,
        };
        let env = ScaleEnv::new(CostVariant::Cost1, cfg());
        let req = ScaleRequest {
            id: "r".into(),
            ts: 0,
            k: 4,
            vm_type: "x".into(),
        };
        let mut rng = stream_rng(1, 1);
        let r = simulate_request(
            &req,
            &FixedAction(3),
            &ExplorationConfig::greedy(),
            &model,
            &env,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.realized_cost, 39.0);

        let v0 = simulate_request(
            &req,
            &MaxAction,
            &ExplorationConfig::greedy(),
            &model,
            &env,
            &mut rng,
        )
        .unwrap();
        assert_eq!(v0.chosen_action(), 4);
    }

    #[test]
    fn simulate_request_is_reproducible() {
        let model = CompletionModel::default();
        let env = ScaleEnv::new(CostVariant::Cost2, cfg());
        let req = ScaleRequest {
            id: "r".into(),
            ts: 4000,
            k: 3,
            vm_type: "medium".into(),
        };
        let run = || {
            let mut rng = stream_rng(11, 0);
            simulate_request(
                &req,
                &FixedAction(1),
                &ExplorationConfig::greedy(),
                &model,
                &env,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn abc_assignment() {
        let mut rng = stream_rng(2, 0);
        assert!((0..100).all(|_| abc_assign(1, &mut rng) == 0));
        let seq = |seed| {
            let mut rng = stream_rng(seed, 0);
            (0..50).map(|_| abc_assign(3, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
    }

    #[test]
    fn zero_variance_latencies_give_zero_slope() {
        let model = CompletionModel {
            vm_types: vec![VmTypeParams {
                name: "x".into(),
                median_seconds: 33.0,
                sigma: 0.0,
            }],
            diurnal_amplitude: 0.0,
            independent: true,
            batch_seconds_per_vm: 0.0,
        };
        let mut rng = stream_rng(1, 0);
        let check = assumption_check(100, 4, 0, &model, &mut rng).unwrap();
        assert_eq!(check.slope, 0.0);
        assert_eq!(check.p_value, 1.0);
        assert!(assumption_check(9, 4, 0, &model, &mut rng).is_err());
    }

    #[test]
    fn batch_dependent_model_is_detected() {
        let model = CompletionModel::batch_dependent(0.5);
        let mut rng = stream_rng(7, 0);
        let check = assumption_check(1000, 4, 0, &model, &mut rng).unwrap();
        assert!(check.p_value < 0.01, "{check:?}");
        assert!(check.slope > 0.0);
    }
}
