//! Environment-agnostic replay of full-feedback events.
//!
//! A simulator event carries the ground truth for every action. Replaying it
//! under a policy hides everything the chosen action would not reveal and
//! emits the raw [`LoggedDecision`] a production system would have written.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::feedback::{
    ActionSpace, AugmentedEntry, AugmentedRecord, Context, FeedbackModel, LoggedDecision, Outcome,
};
use crate::policy::{explore_wrap, ExplorationConfig, Policy};

pub trait Simulator: Sync {
    type Event: Clone + Send + Sync;

    fn context<'a>(&self, event: &'a Self::Event) -> &'a Context;

    fn actions(&self, event: &Self::Event) -> ActionSpace;

    /// What the logging system observes after taking `action`.
    fn outcome(&self, event: &Self::Event, action: u32) -> Outcome;

    /// Ground-truth cost of `action`.
    fn cost(&self, event: &Self::Event, action: u32) -> f64;

    fn feedback(&self) -> &dyn FeedbackModel;
}

/// Deterministic RNG for one named stream of an experiment.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Arithmetic mean with left-to-right summation. `NaN` when empty.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// One decision: explore around `policy`, observe, and log.
pub fn decide<S, P, R>(
    sim: &S,
    event: &S::Event,
    policy: &P,
    explore: &ExplorationConfig,
    rng: &mut R,
) -> LoggedDecision
where
    S: Simulator + ?Sized,
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    let context = sim.context(event);
    let actions = sim.actions(event);
    let d = explore_wrap(policy, explore, context, &actions, rng);
    LoggedDecision {
        context: context.clone(),
        outcome: sim.outcome(event, d.action),
        realized_cost: sim.cost(event, d.action),
        actions,
        action_index: d.action_index,
        action_dist: d.dist,
        explored: d.explored,
    }
}

pub fn replay<S, P, R>(
    sim: &S,
    events: &[S::Event],
    policy: &P,
    explore: &ExplorationConfig,
    rng: &mut R,
) -> Vec<LoggedDecision>
where
    S: Simulator + ?Sized,
    P: Policy + ?Sized,
    R: Rng + ?Sized,
{
    events
        .iter()
        .map(|e| decide(sim, e, policy, explore, rng))
        .collect()
}

/// Mean ground-truth cost of `policy` over `events`.
pub fn true_policy_cost<S, P>(sim: &S, events: &[S::Event], policy: &P) -> f64
where
    S: Simulator + ?Sized,
    P: Policy + ?Sized,
{
    mean(events.iter().map(|e| {
        let actions = sim.actions(e);
        sim.cost(e, policy.act(sim.context(e), &actions))
    }))
}

/// Every action's true cost with P(E) = 1, as logged by the maximal action.
pub fn full_feedback_record<S>(sim: &S, event: &S::Event) -> AugmentedRecord
where
    S: Simulator + ?Sized,
{
    let actions = sim.actions(event);
    let entries = actions
        .values()
        .iter()
        .enumerate()
        .map(|(i, &a)| AugmentedEntry {
            action_index: i,
            cost: sim.cost(event, a),
            p_event: 1.0,
        })
        .collect();
    AugmentedRecord {
        context: sim.context(event).clone(),
        source_action_index: actions.max_index(),
        actions,
        entries,
        explored: false,
    }
}
