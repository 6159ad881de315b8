//! Linear contextual-bandit policies.
//!
//! A [`LinearPolicyModel`] holds one independent linear cost head per action
//! over a fixed feature schema. The policy it defines is the argmin of the
//! predicted cost, with ties going to the smaller action. Training is a
//! per-action weighted ridge regression; the weights are what distinguish
//! the estimators ([`TrainingMode`]).

use std::cmp::Ordering;
use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::{ActionDistribution, ActionSpace, AugmentedRecord, Context, LoggedDecision};

/// Ridge added to every diagonal element when the normal equations are
/// singular and no ridge was configured.
const SINGULAR_RIDGE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training mode {mode:?} needs {expected} records")]
    ModeMismatch {
        mode: TrainingMode,
        expected: &'static str,
    },

    #[error("record {id} is not full feedback")]
    NotFullFeedback { id: String },

    #[error("no training samples")]
    NoSamples,

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("invalid exploration config: {0}")]
    InvalidExploration(String),
}

// ── Policies ────────────────────────────────────────────────────────────

/// A deterministic decision rule over a per-decision action space.
pub trait Policy: Sync {
    /// Must return a value from `actions`.
    fn act(&self, context: &Context, actions: &ActionSpace) -> u32;

    fn policy_id(&self) -> String;
}

/// Always picks the maximal action (the conservative full-feedback policy).
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxAction;

impl Policy for MaxAction {
    fn act(&self, _context: &Context, actions: &ActionSpace) -> u32 {
        actions.max()
    }

    fn policy_id(&self) -> String {
        "v0".into()
    }
}

/// Picks a fixed value, or the largest allowed value below it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedAction(pub u32);

impl Policy for FixedAction {
    fn act(&self, _context: &Context, actions: &ActionSpace) -> u32 {
        nearest_allowed(actions, self.0)
    }

    fn policy_id(&self) -> String {
        format!("fixed-{}", self.0)
    }
}

/// Wraps a closure as a policy.
pub struct FnPolicy<F> {
    id: String,
    f: F,
}

impl<F> FnPolicy<F>
where
    F: Fn(&Context, &ActionSpace) -> u32 + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        Self { id: id.into(), f }
    }
}

impl<F> Policy for FnPolicy<F>
where
    F: Fn(&Context, &ActionSpace) -> u32 + Sync,
{
    fn act(&self, context: &Context, actions: &ActionSpace) -> u32 {
        nearest_allowed(actions, (self.f)(context, actions))
    }

    fn policy_id(&self) -> String {
        self.id.clone()
    }
}

/// `value` if allowed, else the largest allowed action below it, else the
/// smallest action.
pub fn nearest_allowed(actions: &ActionSpace, value: u32) -> u32 {
    actions
        .values()
        .iter()
        .rev()
        .find(|a| **a <= value)
        .copied()
        .unwrap_or_else(|| actions.min())
}

// ── Featurization ───────────────────────────────────────────────────────

/// Maps a context onto a fixed, ordered list of feature names. The intercept
/// is handled by the model, not the featurizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    schema: Vec<String>,
}

impl Featurizer {
    pub fn new(schema: Vec<String>) -> Self {
        Self { schema }
    }

    /// Sorted union of all feature names.
    pub fn from_contexts<'a>(contexts: impl IntoIterator<Item = &'a Context>) -> Self {
        let names: BTreeSet<&str> = contexts
            .into_iter()
            .flat_map(|c| c.features.keys().map(String::as_str))
            .collect();
        Self::new(names.into_iter().map(String::from).collect())
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    /// Feature vector plus the number of schema features missing from the
    /// context (they are read as 0).
    pub fn featurize(&self, context: &Context) -> (Vec<f64>, usize) {
        let mut missing = 0;
        let x = self
            .schema
            .iter()
            .map(|name| {
                context.feature(name).unwrap_or_else(|| {
                    missing += 1;
                    0.0
                })
            })
            .collect();
        (x, missing)
    }
}

// ── Model ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub estimator: String,
    pub n: usize,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicyModel {
    pub schema: Vec<String>,
    pub actions: Vec<u32>,
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Actions whose head is the global-mean fallback.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_actions: Vec<u32>,
    pub trained_on: TrainedOn,
}

impl LinearPolicyModel {
    pub fn featurizer(&self) -> Featurizer {
        Featurizer::new(self.schema.clone())
    }

    fn head(&self, action: u32) -> Option<usize> {
        self.actions.binary_search(&action).ok()
    }

    fn predict_head(&self, head: usize, x: &[f64]) -> f64 {
        self.weights[head]
            .iter()
            .zip(x)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.intercepts[head]
    }

    /// Predicted cost of `action` in `context`, if the model has a head for it.
    pub fn predict(&self, context: &Context, action: u32) -> Option<f64> {
        let head = self.head(action)?;
        let (x, _) = self.featurizer().featurize(context);
        Some(self.predict_head(head, &x))
    }

    /// Argmin action plus the number of missing features.
    pub fn act_counting(&self, context: &Context, actions: &ActionSpace) -> (u32, usize) {
        let (x, missing) = self.featurizer().featurize(context);
        let mut best: Option<(u32, f64)> = None;
        for &a in actions.values() {
            let Some(head) = self.head(a) else { continue };
            let cost = self.predict_head(head, &x);
            // strict comparison keeps the smaller action on ties
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((a, cost));
            }
        }
        (best.map_or_else(|| actions.min(), |(a, _)| a), missing)
    }

    pub fn is_weight_finite(&self) -> bool {
        self.weights.iter().flatten().all(|w| w.is_finite())
            && self.intercepts.iter().all(|b| b.is_finite())
    }
}

impl Policy for LinearPolicyModel {
    fn act(&self, context: &Context, actions: &ActionSpace) -> u32 {
        self.act_counting(context, actions).0
    }

    fn policy_id(&self) -> String {
        format!("linear-{}", self.trained_on.estimator)
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// One sample per augmented entry, weight 1/P(E).
    Implicit,
    /// One sample per record for the chosen action, weight 1/p.
    Ips,
    /// One sample per augmented entry, weight 1.
    #[serde(rename = "naive")]
    NaiveImplicit,
    /// One sample per (record, action), weight 1; every record must be full
    /// feedback.
    #[serde(rename = "full")]
    FullFeedback,
}

impl TrainingMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainingMode::Implicit => "implicit",
            TrainingMode::Ips => "ips",
            TrainingMode::NaiveImplicit => "naive",
            TrainingMode::FullFeedback => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub ridge_lambda: f64,
    /// Caps 1/P(E) sample weights.
    pub weight_cap: Option<f64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            ridge_lambda: 1e-3,
            weight_cap: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "ridge_lambda {}",
                self.ridge_lambda
            )));
        }
        if let Some(cap) = self.weight_cap {
            if !(cap > 0.0) {
                return Err(TrainError::InvalidConfig(format!("weight_cap {cap}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub action: u32,
    pub cost: f64,
    pub weight: f64,
}

/// Log input for [`build_training_set`].
#[derive(Debug, Clone, Copy)]
pub enum TrainingLog<'a> {
    Raw(&'a [LoggedDecision]),
    Augmented(&'a [AugmentedRecord]),
}

pub fn build_training_set(
    log: TrainingLog<'_>,
    mode: TrainingMode,
    featurizer: &Featurizer,
) -> Result<Vec<Sample>, TrainError> {
    let mut samples = Vec::new();
    match (log, mode) {
        (TrainingLog::Raw(records), TrainingMode::Ips) => {
            for r in records {
                let (features, _) = featurizer.featurize(&r.context);
                samples.push(Sample {
                    features,
                    action: r.chosen_action(),
                    cost: r.realized_cost,
                    weight: 1.0 / r.propensity(),
                });
            }
        }
        (TrainingLog::Augmented(records), TrainingMode::Implicit)
        | (TrainingLog::Augmented(records), TrainingMode::NaiveImplicit)
        | (TrainingLog::Augmented(records), TrainingMode::FullFeedback) => {
            for r in records {
                if mode == TrainingMode::FullFeedback && !r.is_full_feedback() {
                    return Err(TrainError::NotFullFeedback {
                        id: r.context.id.clone(),
                    });
                }
                let (features, _) = featurizer.featurize(&r.context);
                for e in &r.entries {
                    let weight = match mode {
                        TrainingMode::Implicit => 1.0 / e.p_event,
                        _ => 1.0,
                    };
                    samples.push(Sample {
                        features: features.clone(),
                        action: r.actions.values()[e.action_index],
                        cost: e.cost,
                        weight,
                    });
                }
            }
        }
        (TrainingLog::Raw(_), _) => {
            return Err(TrainError::ModeMismatch {
                mode,
                expected: "augmented",
            })
        }
        (TrainingLog::Augmented(_), TrainingMode::Ips) => {
            return Err(TrainError::ModeMismatch {
                mode,
                expected: "raw",
            })
        }
    }
    Ok(samples)
}

fn canonical_order(a: &Sample, b: &Sample) -> Ordering {
    a.action
        .cmp(&b.action)
        .then_with(|| {
            a.features
                .iter()
                .zip(&b.features)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.cost.total_cmp(&b.cost))
        .then_with(|| a.weight.total_cmp(&b.weight))
}

/// Per-action weighted ridge least squares.
///
/// Each head minimises `Σ w (f_a(x) − c)² / Σ w + λ‖w_a‖²` (the intercept is
/// not penalised). Normalising by the total weight makes the fit invariant to
/// rescaling all weights. Samples are accumulated in a canonical order, so
/// the model does not depend on sample order. Actions without samples get a
/// zero-weight head whose intercept is the weighted mean cost of all samples.
pub fn train(
    samples: &[Sample],
    featurizer: &Featurizer,
    actions: &[u32],
    config: &TrainingConfig,
    trained_on: TrainedOn,
) -> Result<LinearPolicyModel, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let dim = featurizer.dim();
    let cap = |w: f64| config.weight_cap.map_or(w, |c| w.min(c));

    let mut sorted: Vec<&Sample> = samples.iter().collect();
    sorted.sort_by(|a, b| canonical_order(a, b));

    let (mut cost_sum, mut weight_sum) = (0.0, 0.0);
    for s in &sorted {
        cost_sum += cap(s.weight) * s.cost;
        weight_sum += cap(s.weight);
    }
    let global_mean = if weight_sum > 0.0 {
        cost_sum / weight_sum
    } else {
        0.0
    };

    let mut weights = Vec::with_capacity(actions.len());
    let mut intercepts = Vec::with_capacity(actions.len());
    let mut fallback_actions = Vec::new();
    for &action in actions {
        let start = sorted.partition_point(|s| s.action < action);
        let end = sorted.partition_point(|s| s.action <= action);
        match fit_head(&sorted[start..end], dim, config.ridge_lambda, &cap) {
            Some((w, b)) => {
                weights.push(w);
                intercepts.push(b);
            }
            None => {
                weights.push(vec![0.0; dim]);
                intercepts.push(global_mean);
                fallback_actions.push(action);
            }
        }
    }

    Ok(LinearPolicyModel {
        schema: featurizer.schema().to_vec(),
        actions: actions.to_vec(),
        weights,
        intercepts,
        fallback_actions,
        trained_on,
    })
}

fn fit_head(
    rows: &[&Sample],
    dim: usize,
    lambda: f64,
    cap: &impl Fn(f64) -> f64,
) -> Option<(Vec<f64>, f64)> {
    let total: f64 = rows.iter().map(|s| cap(s.weight)).sum();
    if rows.is_empty() || total <= 0.0 {
        return None;
    }
    let d = dim + 1;
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut row = vec![0.0; d];
    for s in rows {
        row[..dim].copy_from_slice(&s.features);
        row[dim] = 1.0;
        let w = cap(s.weight) / total;
        for i in 0..d {
            let wi = w * row[i];
            rhs[i] += wi * s.cost;
            for j in i..d {
                gram[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    for i in 0..dim {
        gram[(i, i)] += lambda;
    }

    let solve = |g: DMatrix<f64>| g.cholesky().map(|c| c.solve(&rhs));
    let beta = solve(gram.clone()).or_else(|| {
        let mut g = gram.clone();
        let ridge = if lambda > 0.0 { lambda } else { SINGULAR_RIDGE };
        for i in 0..d {
            g[(i, i)] += ridge;
        }
        solve(g)
    })?;
    if beta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((beta.as_slice()[..dim].to_vec(), beta[dim]))
}

// ── Exploration ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplorationMode {
    /// Explore by taking the maximal (most revealing) action.
    Maximal,
    /// Explore uniformly over all actions.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub epsilon: f64,
    pub mode: ExplorationMode,
}

impl ExplorationConfig {
    pub fn new(epsilon: f64, mode: ExplorationMode) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(TrainError::InvalidExploration(format!(
                "epsilon {epsilon} outside [0, 1]"
            )));
        }
        Ok(Self { epsilon, mode })
    }

    pub fn greedy() -> Self {
        Self {
            epsilon: 0.0,
            mode: ExplorationMode::Maximal,
        }
    }

    /// The exact sampling distribution around a greedy choice.
    pub fn distribution(&self, greedy_index: usize, len: usize) -> ActionDistribution {
        let mut probs = vec![0.0; len];
        match self.mode {
            ExplorationMode::Maximal => probs[len - 1] += self.epsilon,
            ExplorationMode::Uniform => {
                let share = self.epsilon / len as f64;
                probs.iter_mut().for_each(|p| *p = share);
            }
        }
        probs[greedy_index] += 1.0 - self.epsilon;
        // construction keeps the sum within rounding of 1
        ActionDistribution::from_trusted(probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploredDecision {
    pub action_index: usize,
    pub action: u32,
    pub dist: ActionDistribution,
    pub explored: bool,
}

/// Epsilon-greedy around `policy`. The returned distribution is exactly the
/// one the action was sampled from.
pub fn explore_wrap<P, R>(
    policy: &P,
    config: &ExplorationConfig,
    context: &Context,
    actions: &ActionSpace,
    rng: &mut R,
) -> ExploredDecision
where
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let greedy = nearest_allowed(actions, policy.act(context, actions));
    let greedy_index = actions
        .index_of(greedy)
        .expect("nearest_allowed is in space");
    let dist = config.distribution(greedy_index, actions.len());
    let coin: f64 = rng.random();
    let explored = coin < config.epsilon;
    let action_index = if !explored {
        greedy_index
    } else {
        match config.mode {
            ExplorationMode::Maximal => actions.max_index(),
            ExplorationMode::Uniform => rng.random_range(0..actions.len()),
        }
    };
    ExploredDecision {
        action_index,
        action: actions.values()[action_index],
        dist,
        explored,
    }
}
