//! Decision logs and implicit-feedback augmentation.
//!
//! A [`LoggedDecision`] is what a deployed policy writes for every decision:
//! the context, the full action distribution it sampled from, the chosen
//! action and the raw outcome. A [`FeedbackModel`] knows which other actions'
//! costs can be deduced from that outcome, and with what probability the
//! deployed distribution would have revealed them. [`augment`] applies a
//! model to a raw record and produces an [`AugmentedRecord`].
//!
//! Augmentation is a pure post-processing step: raw logs stay replayable
//! under any feedback model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of an [`ActionDistribution`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error("action {action} is not in the action space {space:?}")]
    ActionOutsideSpace { action: u32, space: Vec<u32> },

    #[error("cost of action {target} is not deducible from this outcome")]
    NotDeducible { target: u32 },

    #[error("outcome does not match the feedback model: {0}")]
    OutcomeMismatch(String),

    #[error("invalid action space: {0}")]
    InvalidActionSpace(String),

    #[error("invalid action distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
}

// ── Context ─────────────────────────────────────────────────────────────

/// Properties of the environment observed at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub timestamp: i64,
    pub features: BTreeMap<String, f64>,
}

impl Context {
    pub fn new(id: impl Into<String>, timestamp: i64) -> Self {
        Self {
            id: id.into(),
            timestamp,
            features: BTreeMap::new(),
        }
    }

    pub fn with_feature(mut self, name: impl Into<String>, value: f64) -> Self {
        self.features.insert(name.into(), value);
        self
    }

    pub fn feature(&self, name: &str) -> Option<f64> {
        self.features.get(name).copied()
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        for (name, value) in &self.features {
            if name.is_empty() {
                return Err(FeedbackError::InvalidContext(format!(
                    "empty feature name in {}",
                    self.id
                )));
            }
            if !value.is_finite() {
                return Err(FeedbackError::InvalidContext(format!(
                    "feature {name} of {} is not finite",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

// ── Action space ────────────────────────────────────────────────────────

/// Strictly increasing, non-empty list of integer action values.
///
/// Values are resource units: minutes of waiting for health decisions,
/// extra VMs for scale decisions. The last element is the maximal action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ActionSpace(Vec<u32>);

impl ActionSpace {
    pub fn new(actions: Vec<u32>) -> Result<Self, FeedbackError> {
        if actions.is_empty() {
            return Err(FeedbackError::InvalidActionSpace("empty".into()));
        }
        if actions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FeedbackError::InvalidActionSpace(format!(
                "not strictly increasing: {actions:?}"
            )));
        }
        Ok(Self(actions))
    }

    /// Every integer in `lo..=hi`.
    pub fn range(lo: u32, hi: u32) -> Result<Self, FeedbackError> {
        Self::new((lo..=hi).collect())
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    pub fn max(&self) -> u32 {
        self.0[self.0.len() - 1]
    }

    pub fn max_index(&self) -> usize {
        self.0.len() - 1
    }

    pub fn get(&self, index: usize) -> Option<u32> {
        self.0.get(index).copied()
    }

    pub fn index_of(&self, action: u32) -> Option<usize> {
        self.0.binary_search(&action).ok()
    }

    pub fn require_index(&self, action: u32) -> Result<usize, FeedbackError> {
        self.index_of(action)
            .ok_or_else(|| FeedbackError::ActionOutsideSpace {
                action,
                space: self.0.clone(),
            })
    }

    pub fn contains(&self, action: u32) -> bool {
        self.index_of(action).is_some()
    }
}

impl TryFrom<Vec<u32>> for ActionSpace {
    type Error = FeedbackError;

    fn try_from(value: Vec<u32>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ActionSpace> for Vec<u32> {
    fn from(value: ActionSpace) -> Self {
        value.0
    }
}

// ── Action distribution ────────────────────────────────────────────────

/// The exact sampling distribution of the deployed policy for one decision,
/// aligned with an [`ActionSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionDistribution(Vec<f64>);

impl ActionDistribution {
    pub fn new(probs: Vec<f64>, space: &ActionSpace) -> Result<Self, FeedbackError> {
        if probs.len() != space.len() {
            return Err(FeedbackError::InvalidDistribution(format!(
                "{} probabilities for {} actions",
                probs.len(),
                space.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(FeedbackError::InvalidDistribution(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(FeedbackError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(Self(probs))
    }

    /// All mass on `index`.
    pub fn point_mass(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self(probs)
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_trusted(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// P(A ≥ threshold): mass on every action whose value reaches `threshold`.
    /// Exactly 1 when every action does.
    pub fn tail_mass(&self, space: &ActionSpace, threshold: f64) -> f64 {
        if threshold <= f64::from(space.min()) {
            return 1.0;
        }
        space
            .values()
            .iter()
            .zip(&self.0)
            .filter(|(a, _)| f64::from(**a) >= threshold)
            .map(|(_, p)| *p)
            .sum()
    }
}

// ── Outcome ─────────────────────────────────────────────────────────────

/// Raw outcome of a logged decision.
///
/// A health timeout is its own variant and never a sentinel recovery time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Outcome {
    /// The machine responded `tau` minutes after the decision, within the
    /// chosen wait.
    Responded { tau: f64 },
    /// The machine was still unresponsive when the chosen wait ran out.
    Timeout,
    /// Per-VM completion times in issue order for a request of `k` VMs.
    Scale { times: Vec<f64>, k: u32 },
}

// ── Logged decision ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLine", into = "RawLine")]
pub struct LoggedDecision {
    pub context: Context,
    pub actions: ActionSpace,
    pub action_index: usize,
    pub action_dist: ActionDistribution,
    pub outcome: Outcome,
    pub realized_cost: f64,
    /// The exploration coin fired for this decision.
    pub explored: bool,
}

impl LoggedDecision {
    pub fn chosen_action(&self) -> u32 {
        self.actions.values()[self.action_index]
    }

    pub fn propensity(&self) -> f64 {
        self.action_dist.prob(self.action_index)
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        let invalid = |reason: String| FeedbackError::InvalidRecord {
            id: self.context.id.clone(),
            reason,
        };
        self.context.validate()?;
        if self.action_index >= self.actions.len() {
            return Err(invalid(format!(
                "action index {} out of range",
                self.action_index
            )));
        }
        if self.action_dist.len() != self.actions.len() {
            return Err(invalid("distribution length mismatch".into()));
        }
        if self.propensity() <= 0.0 {
            return Err(invalid("chosen action has zero probability".into()));
        }
        if !(self.realized_cost.is_finite() && self.realized_cost >= 0.0) {
            return Err(invalid(format!("cost {}", self.realized_cost)));
        }
        match &self.outcome {
            Outcome::Responded { tau } => {
                if !(*tau > 0.0 && *tau <= f64::from(self.chosen_action())) {
                    return Err(invalid(format!(
                        "responded at {tau} with wait {}",
                        self.chosen_action()
                    )));
                }
            }
            Outcome::Timeout => {}
            Outcome::Scale { times, k } => {
                let expected = *k as usize + self.chosen_action() as usize;
                if times.len() != expected {
                    return Err(invalid(format!(
                        "{} completion times for k={k} and a={}",
                        times.len(),
                        self.chosen_action()
                    )));
                }
                if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                    return Err(invalid("negative or non-finite completion time".into()));
                }
            }
        }
        Ok(())
    }
}

/// One line of the raw JSON-lines log.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawLine {
    id: String,
    ts: i64,
    features: BTreeMap<String, f64>,
    actions: Vec<u32>,
    probs: Vec<f64>,
    action_index: usize,
    outcome: Outcome,
    cost: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    explored: bool,
}

impl TryFrom<RawLine> for LoggedDecision {
    type Error = FeedbackError;

    fn try_from(line: RawLine) -> Result<Self, Self::Error> {
        let actions = ActionSpace::new(line.actions)?;
        let action_dist = ActionDistribution::new(line.probs, &actions)?;
        let record = LoggedDecision {
            context: Context {
                id: line.id,
                timestamp: line.ts,
                features: line.features,
            },
            actions,
            action_index: line.action_index,
            action_dist,
            outcome: line.outcome,
            realized_cost: line.cost,
            explored: line.explored,
        };
        record.validate()?;
        Ok(record)
    }
}

impl From<LoggedDecision> for RawLine {
    fn from(r: LoggedDecision) -> Self {
        RawLine {
            id: r.context.id,
            ts: r.context.timestamp,
            features: r.context.features,
            actions: r.actions.into(),
            probs: r.action_dist.0,
            action_index: r.action_index,
            outcome: r.outcome,
            cost: r.realized_cost,
            explored: r.explored,
        }
    }
}

// ── Augmented records ───────────────────────────────────────────────────

/// A deducible (action, cost, event probability) triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEntry {
    pub action_index: usize,
    pub cost: f64,
    pub p_event: f64,
}

/// A logged decision expanded into every action whose cost it reveals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AugmentedLine", into = "AugmentedLine")]
pub struct AugmentedRecord {
    pub context: Context,
    pub actions: ActionSpace,
    pub entries: Vec<AugmentedEntry>,
    pub source_action_index: usize,
    pub explored: bool,
}

impl AugmentedRecord {
    /// The entry for action value `action`, if its cost was deducible.
    pub fn entry_for(&self, action: u32) -> Option<&AugmentedEntry> {
        let index = self.actions.index_of(action)?;
        self.entries.iter().find(|e| e.action_index == index)
    }

    pub fn source_entry(&self) -> Option<&AugmentedEntry> {
        self.entries
            .iter()
            .find(|e| e.action_index == self.source_action_index)
    }

    /// Every action in the space has an entry.
    pub fn is_full_feedback(&self) -> bool {
        self.entries.len() == self.actions.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AugmentedLine {
    id: String,
    #[serde(default)]
    ts: i64,
    features: BTreeMap<String, f64>,
    actions: Vec<u32>,
    entries: Vec<AugmentedEntry>,
    source_action_index: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    explored: bool,
}

impl TryFrom<AugmentedLine> for AugmentedRecord {
    type Error = FeedbackError;

    fn try_from(line: AugmentedLine) -> Result<Self, Self::Error> {
        let actions = ActionSpace::new(line.actions)?;
        let invalid = |reason: &str| FeedbackError::InvalidRecord {
            id: line.id.clone(),
            reason: reason.to_string(),
        };
        let mut seen = vec![false; actions.len()];
        for e in &line.entries {
            if e.action_index >= actions.len() {
                return Err(invalid("entry action index out of range"));
            }
            if std::mem::replace(&mut seen[e.action_index], true) {
                return Err(invalid("duplicate entry action"));
            }
            if !(e.p_event > 0.0 && e.p_event <= 1.0 + PROB_SUM_TOLERANCE) {
                return Err(invalid("p_event outside (0, 1]"));
            }
        }
        if line.source_action_index >= actions.len() || !seen[line.source_action_index] {
            return Err(invalid("source action missing from entries"));
        }
        let context = Context {
            id: line.id,
            timestamp: line.ts,
            features: line.features,
        };
        context.validate()?;
        Ok(AugmentedRecord {
            context,
            actions,
            entries: line.entries,
            source_action_index: line.source_action_index,
            explored: line.explored,
        })
    }
}

impl From<AugmentedRecord> for AugmentedLine {
    fn from(r: AugmentedRecord) -> Self {
        AugmentedLine {
            id: r.context.id,
            ts: r.context.timestamp,
            features: r.context.features,
            actions: r.actions.into(),
            entries: r.entries,
            source_action_index: r.source_action_index,
            explored: r.explored,
        }
    }
}

// ── Feedback models ─────────────────────────────────────────────────────

/// Application rules for deducing counterfactual costs from a logged outcome.
///
/// The event `E` for a target action is "the target's cost can be deduced
/// from the outcome of whatever action the deployed policy draws".
/// [`FeedbackModel::event_probability`] is P(E) under the logged
/// distribution, which is what makes `1{E}/P(E)` reweighting unbiased.
pub trait FeedbackModel: Sync {
    fn name(&self) -> &'static str;

    /// Cost `target` would have incurred, or `None` when the outcome does not
    /// reveal it.
    fn deduced_cost(
        &self,
        record: &LoggedDecision,
        target: u32,
    ) -> Result<Option<f64>, FeedbackError>;

    /// P(E) for `target`. Only defined when the cost is deducible.
    fn event_probability(&self, record: &LoggedDecision, target: u32)
        -> Result<f64, FeedbackError>;
}

/// Expand a raw record into every (action, cost, P(E)) it reveals.
pub fn augment(
    model: &dyn FeedbackModel,
    record: &LoggedDecision,
) -> Result<AugmentedRecord, FeedbackError> {
    let mut entries = Vec::with_capacity(record.actions.len());
    for (index, &action) in record.actions.values().iter().enumerate() {
        if let Some(cost) = model.deduced_cost(record, action)? {
            let p_event = model.event_probability(record, action)?;
            entries.push(AugmentedEntry {
                action_index: index,
                cost,
                p_event,
            });
        }
    }
    Ok(AugmentedRecord {
        context: record.context.clone(),
        actions: record.actions.clone(),
        entries,
        source_action_index: record.action_index,
        explored: record.explored,
    })
}

pub fn augment_all(
    model: &dyn FeedbackModel,
    records: &[LoggedDecision],
) -> Result<Vec<AugmentedRecord>, FeedbackError> {
    use rayon::prelude::*;
    records.par_iter().map(|r| augment(model, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_space_rejects_bad_input() {
        assert!(ActionSpace::new(vec![]).is_err());
        assert!(ActionSpace::new(vec![1, 1]).is_err());
        assert!(ActionSpace::new(vec![3, 2]).is_err());
        let space = ActionSpace::range(1, 10).unwrap();
        assert_eq!(space.max(), 10);
        assert_eq!(space.index_of(7), Some(6));
        assert!(space.require_index(11).is_err());
    }

    #[test]
    fn distribution_must_sum_to_one() {
        let space = ActionSpace::range(1, 3).unwrap();
        assert!(ActionDistribution::new(vec![0.5, 0.5, 0.5], &space).is_err());
        assert!(ActionDistribution::new(vec![0.5, 0.5], &space).is_err());
        assert!(ActionDistribution::new(vec![-0.1, 0.6, 0.5], &space).is_err());
        let d = ActionDistribution::new(vec![0.2, 0.3, 0.5], &space).unwrap();
        assert!((d.tail_mass(&space, 2.0) - 0.8).abs() < 1e-12);
        assert!((d.tail_mass(&space, 2.5) - 0.5).abs() < 1e-12);
        assert_eq!(d.tail_mass(&space, 0.0), 1.0);
    }

    #[test]
    fn context_rejects_non_finite_features() {
        let ctx = Context::new("x", 0).with_feature("a", f64::NAN);
        assert!(ctx.validate().is_err());
        let ctx = Context::new("x", 0).with_feature("", 1.0);
        assert!(ctx.validate().is_err());
    }

    #[test]
    fn raw_line_parses_and_validates() {
        let line = r#"{"id":"e1","ts":5,"features":{"n_vms":2.0},"actions":[1,2,3],
            "probs":[0.0,0.9,0.1],"action_index":1,"outcome":{"kind":"responded","tau":1.5},"cost":3.0}"#;
        let r: LoggedDecision = serde_json::from_str(line).unwrap();
        assert_eq!(r.chosen_action(), 2);
        assert_eq!(r.outcome, Outcome::Responded { tau: 1.5 });
        assert!(!r.explored);

        // responded after the chosen wait is inconsistent
        let bad = line.replace("\"tau\":1.5", "\"tau\":2.5");
        assert!(serde_json::from_str::<LoggedDecision>(&bad).is_err());
        // the chosen action must have been choosable
        let bad = line.replace("[0.0,0.9,0.1]", "[0.9,0.0,0.1]");
        assert!(serde_json::from_str::<LoggedDecision>(&bad).is_err());
    }

    #[test]
    fn timeout_is_not_a_number() {
        let json = serde_json::to_string(&Outcome::Timeout).unwrap();
        assert_eq!(json, r#"{"kind":"timeout"}"#);
    }

    #[test]
    fn augmented_line_guards_entries() {
        let ok = r#"{"id":"a","features":{},"actions":[1,2],"entries":[{"action_index":0,"cost":1.0,"p_event":1.0}],"source_action_index":0}"#;
        assert!(serde_json::from_str::<AugmentedRecord>(ok).is_ok());
        let dup = r#"{"id":"a","features":{},"actions":[1,2],"entries":[{"action_index":0,"cost":1.0,"p_event":1.0},{"action_index":0,"cost":1.0,"p_event":1.0}],"source_action_index":0}"#;
        assert!(serde_json::from_str::<AugmentedRecord>(dup).is_err());
        let no_source = r#"{"id":"a","features":{},"actions":[1,2],"entries":[{"action_index":0,"cost":1.0,"p_event":1.0}],"source_action_index":1}"#;
        assert!(serde_json::from_str::<AugmentedRecord>(no_source).is_err());
        let zero_p = r#"{"id":"a","features":{},"actions":[1,2],"entries":[{"action_index":0,"cost":1.0,"p_event":0.0}],"source_action_index":0}"#;
        assert!(serde_json::from_str::<AugmentedRecord>(zero_p).is_err());
    }
}
