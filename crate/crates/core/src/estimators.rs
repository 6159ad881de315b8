//! Counterfactual cost estimators.
//!
//! Every estimator returns an [`EstimateReport`] holding one contribution
//! per record, so the mean, the matched-record count and bootstrap intervals
//! all come from the same pass. The divisor of the mean is always the number
//! of records, matched or not.
//!
//! | estimator | log | unbiased |
//! |---|---|---|
//! | [`ips_evaluate`] | raw | yes |
//! | [`implicit_evaluate`] | augmented | yes |
//! | [`direct_method_evaluate`] | raw | no |
//! | [`naive_implicit_evaluate`] | augmented | no |
//! | [`survival_evaluate_log`] | raw health | no |
//! | [`exploration_only_evaluate`] | raw | yes, on explored records |

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::{
    ActionSpace, AugmentedRecord, Context, FeedbackError, FeedbackModel, LoggedDecision, Outcome,
};
use crate::health::{n_vms_of, HealthConfig, HealthFeedback, DEFAULT_REBOOT_COST};
use crate::policy::{
    build_training_set, train, Featurizer, FixedAction, LinearPolicyModel, Policy, Sample,
    TrainError, TrainedOn, TrainingConfig, TrainingLog, TrainingMode,
};
use crate::sim::{mean, stream_rng};

/// Default bootstrap quantiles.
pub const DEFAULT_QUANTILES: (f64, f64) = (0.025, 0.975);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("record {id} has non-positive propensity {p}")]
    NonPositivePropensity { id: String, p: f64 },

    #[error("record {id} has non-positive event probability {p}")]
    NonPositiveEventProbability { id: String, p: f64 },

    #[error("empty log")]
    EmptyLog,

    #[error("no exploration records")]
    NoExplorationRecords,

    #[error("survival fit failed: {0}")]
    Fit(String),

    #[error("{estimator} needs {expected}")]
    Incompatible {
        estimator: &'static str,
        expected: &'static str,
    },

    #[error(transparent)]
    Train(#[from] TrainError),

    #[error(transparent)]
    Feedback(#[from] FeedbackError),
}

// ── Report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub policy_id: String,
    pub mean: f64,
    pub n: usize,
    pub n_matched: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Actions whose cost-model head fell back to the global mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback_actions: Vec<u32>,
    #[serde(skip)]
    pub contributions: Vec<f64>,
}

impl EstimateReport {
    fn from_contributions(
        estimator: &str,
        policy_id: String,
        contributions: Vec<f64>,
        n_matched: usize,
    ) -> Result<Self, EstimateError> {
        if contributions.is_empty() {
            return Err(EstimateError::EmptyLog);
        }
        Ok(Self {
            estimator: estimator.into(),
            policy_id,
            mean: mean(contributions.iter().copied()),
            n: contributions.len(),
            n_matched,
            ci: None,
            seed: None,
            fallback_actions: Vec::new(),
            contributions,
        })
    }

    /// Attach a percentile interval from resampling the contributions.
    pub fn with_mean_ci(mut self, resamples: usize, seed: u64) -> Self {
        self.ci = bootstrap_mean_ci(&self.contributions, resamples, DEFAULT_QUANTILES, seed)
            .map(|(lo, hi)| [lo, hi]);
        self.seed = Some(seed);
        self
    }
}

// ── IPS and Implicit ────────────────────────────────────────────────────

/// `1{π(x) = a} · c / p`, averaged over all records.
pub fn ips_evaluate<P: Policy + ?Sized>(
    log: &[LoggedDecision],
    policy: &P,
) -> Result<EstimateReport, EstimateError> {
    let terms: Vec<Option<f64>> = log
        .par_iter()
        .map(|r| {
            let p = r.propensity();
            if !(p > 0.0) {
                return Err(EstimateError::NonPositivePropensity {
                    id: r.context.id.clone(),
                    p,
                });
            }
            Ok((policy.act(&r.context, &r.actions) == r.chosen_action())
                .then(|| r.realized_cost / p))
        })
        .collect::<Result<_, _>>()?;
    let n_matched = terms.iter().flatten().count();
    let contributions = terms.into_iter().map(|t| t.unwrap_or(0.0)).collect();
    EstimateReport::from_contributions("ips", policy.policy_id(), contributions, n_matched)
}

/// `1{E} · c(π(x)) / P(E)`, averaged over all records.
pub fn implicit_evaluate<P: Policy + ?Sized>(
    log: &[AugmentedRecord],
    policy: &P,
) -> Result<EstimateReport, EstimateError> {
    let terms: Vec<Option<f64>> = log
        .par_iter()
        .map(|r| {
            let Some(entry) = r.entry_for(policy.act(&r.context, &r.actions)) else {
                return Ok(None);
            };
            if !(entry.p_event > 0.0) {
                return Err(EstimateError::NonPositiveEventProbability {
                    id: r.context.id.clone(),
                    p: entry.p_event,
                });
            }
            Ok(Some(entry.cost / entry.p_event))
        })
        .collect::<Result<_, _>>()?;
    let n_matched = terms.iter().flatten().count();
    let contributions = terms.into_iter().map(|t| t.unwrap_or(0.0)).collect();
    EstimateReport::from_contributions("implicit", policy.policy_id(), contributions, n_matched)
}

// ── Regression baselines ────────────────────────────────────────────────

/// Per-action linear cost predictor.
pub type CostModel = LinearPolicyModel;

/// Sorted union of action values over a log.
pub fn action_union<'a>(spaces: impl IntoIterator<Item = &'a ActionSpace>) -> Vec<u32> {
    let set: BTreeSet<u32> = spaces
        .into_iter()
        .flat_map(|s| s.values().iter().copied())
        .collect();
    set.into_iter().collect()
}

/// Regress realized costs on context for the chosen action only.
pub fn direct_method_fit(
    log: &[LoggedDecision],
    featurizer: &Featurizer,
    config: &TrainingConfig,
) -> Result<CostModel, EstimateError> {
    if log.is_empty() {
        return Err(EstimateError::EmptyLog);
    }
    let samples: Vec<Sample> = log
        .iter()
        .map(|r| Sample {
            features: featurizer.featurize(&r.context).0,
            action: r.chosen_action(),
            cost: r.realized_cost,
            weight: 1.0,
        })
        .collect();
    let actions = action_union(log.iter().map(|r| &r.actions));
    let trained_on = TrainedOn {
        estimator: "direct".into(),
        n: log.len(),
        window: log.len(),
    };
    Ok(train(&samples, featurizer, &actions, config, trained_on)?)
}

/// Mean predicted cost of the policy's action over `contexts`.
pub fn direct_method_evaluate<'a, P: Policy + ?Sized>(
    model: &CostModel,
    contexts: &[(&'a Context, &'a ActionSpace)],
    policy: &P,
) -> Result<EstimateReport, EstimateError> {
    let featurizer = model.featurizer();
    let contributions: Vec<f64> = contexts
        .par_iter()
        .map(|(ctx, actions)| {
            let a = policy.act(ctx, actions);
            let x = featurizer.featurize(ctx).0;
            match model.actions.binary_search(&a) {
                Ok(h) => {
                    model.intercepts[h]
                        + model.weights[h]
                            .iter()
                            .zip(&x)
                            .map(|(w, v)| w * v)
                            .sum::<f64>()
                }
                // the model never saw this action value
                Err(_) => mean(model.intercepts.iter().copied()),
            }
        })
        .collect();
    let n = contributions.len();
    let mut report = EstimateReport::from_contributions(
        &model.trained_on.estimator,
        policy.policy_id(),
        contributions,
        n,
    )?;
    report.fallback_actions = model.fallback_actions.clone();
    Ok(report)
}

fn raw_contexts(log: &[LoggedDecision]) -> Vec<(&Context, &ActionSpace)> {
    log.iter().map(|r| (&r.context, &r.actions)).collect()
}

fn augmented_contexts(log: &[AugmentedRecord]) -> Vec<(&Context, &ActionSpace)> {
    log.iter().map(|r| (&r.context, &r.actions)).collect()
}

/// Fit on the chosen actions of `log` and evaluate over its contexts.
pub fn direct_method(
    log: &[LoggedDecision],
    policy: &(impl Policy + ?Sized),
    config: &TrainingConfig,
) -> Result<EstimateReport, EstimateError> {
    let featurizer = Featurizer::from_contexts(log.iter().map(|r| &r.context));
    let model = direct_method_fit(log, &featurizer, config)?;
    direct_method_evaluate(&model, &raw_contexts(log), policy)
}

/// Regress every augmented entry's cost on context with weight 1.
pub fn naive_implicit_fit(
    log: &[AugmentedRecord],
    featurizer: &Featurizer,
    config: &TrainingConfig,
) -> Result<CostModel, EstimateError> {
    if log.is_empty() {
        return Err(EstimateError::EmptyLog);
    }
    let samples = build_training_set(
        TrainingLog::Augmented(log),
        TrainingMode::NaiveImplicit,
        featurizer,
    )?;
    let actions = action_union(log.iter().map(|r| &r.actions));
    let trained_on = TrainedOn {
        estimator: "naive".into(),
        n: log.len(),
        window: log.len(),
    };
    Ok(train(&samples, featurizer, &actions, config, trained_on)?)
}

pub fn naive_implicit_evaluate<P: Policy + ?Sized>(
    log: &[AugmentedRecord],
    featurizer: &Featurizer,
    policy: &P,
    config: &TrainingConfig,
) -> Result<EstimateReport, EstimateError> {
    let model = naive_implicit_fit(log, featurizer, config)?;
    direct_method_evaluate(&model, &augmented_contexts(log), policy)
}

// ── Survival analysis ───────────────────────────────────────────────────

/// Lomax (Pareto type II) distribution with shape `alpha` and scale `lam`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LomaxParams {
    pub alpha: f64,
    pub lam: f64,
}

impl LomaxParams {
    pub fn new(alpha: f64, lam: f64) -> Result<Self, EstimateError> {
        if !(alpha > 0.0 && lam > 0.0 && alpha.is_finite() && lam.is_finite()) {
            return Err(EstimateError::Fit(format!(
                "parameters must be positive and finite: alpha={alpha}, lam={lam}"
            )));
        }
        Ok(Self { alpha, lam })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        (self.alpha / self.lam) * (1.0 + x / self.lam).powf(-(self.alpha + 1.0))
    }

    pub fn survival(&self, x: f64) -> f64 {
        (1.0 + x / self.lam).powf(-self.alpha)
    }

    pub fn quantile(&self, q: f64) -> f64 {
        self.lam * ((1.0 - q).powf(-1.0 / self.alpha) - 1.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // 1 - U is in (0, 1], so the draw is finite
        let u: f64 = 1.0 - rng.random::<f64>();
        self.lam * (u.powf(-1.0 / self.alpha) - 1.0)
    }

    fn log_likelihood(&self, durations: &[(f64, bool)]) -> f64 {
        let (a, l) = (self.alpha, self.lam);
        durations
            .iter()
            .map(|&(x, censored)| {
                let z = (x / l).ln_1p();
                if censored {
                    -a * z
                } else {
                    a.ln() - l.ln() - (a + 1.0) * z
                }
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalConfig {
    pub reboot_cost: f64,
    /// Trapezoid subintervals over `[0, max action]`.
    pub subintervals: usize,
    /// Simplex diameter at which the likelihood search stops.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        Self {
            reboot_cost: DEFAULT_REBOOT_COST,
            subintervals: 10_000,
            tolerance: 1e-6,
            max_iterations: 20_000,
        }
    }
}

/// Maximum-likelihood Lomax fit to right-censored durations
/// (`(value, censored)`), by Nelder–Mead over `(ln α, ln λ)` starting from
/// `α = 1`, `λ = median`.
pub fn survival_fit_lomax(
    durations: &[(f64, bool)],
    config: &SurvivalConfig,
) -> Result<LomaxParams, EstimateError> {
    if let Some(&(x, _)) = durations.iter().find(|(x, _)| !(*x > 0.0 && x.is_finite())) {
        return Err(EstimateError::Fit(format!("duration {x} is not positive")));
    }
    if durations.iter().all(|(_, censored)| *censored) {
        return Err(EstimateError::Fit("every duration is censored".into()));
    }
    let mut values: Vec<f64> = durations.iter().map(|(x, _)| *x).collect();
    values.sort_by(f64::total_cmp);
    let median = values[values.len() / 2];

    let objective = |p: [f64; 2]| {
        let params = LomaxParams {
            alpha: p[0].exp(),
            lam: p[1].exp(),
        };
        let ll = params.log_likelihood(durations);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    let best = nelder_mead(
        objective,
        [0.0, median.ln()],
        0.5,
        config.tolerance,
        config.max_iterations,
    );
    if !objective(best).is_finite() {
        return Err(EstimateError::Fit("likelihood is not finite".into()));
    }
    LomaxParams::new(best[0].exp(), best[1].exp())
}

fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    step: f64,
    tolerance: f64,
    max_iterations: usize,
) -> [f64; 2] {
    let mut simplex = [
        start,
        [start[0] + step, start[1]],
        [start[0], start[1] + step],
    ];
    let mut values = simplex.map(&f);
    let lerp =
        |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];

    for _ in 0..max_iterations {
        let mut order = [0, 1, 2];
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);

        let diameter = (0..3)
            .flat_map(|i| (i + 1..3).map(move |j| (i, j)))
            .map(|(i, j)| {
                let (a, b) = (simplex[i], simplex[j]);
                (a[0] - b[0]).hypot(a[1] - b[1])
            })
            .fold(0.0, f64::max);
        if diameter < tolerance {
            break;
        }

        let centroid = lerp(simplex[0], simplex[1], 0.5);
        let worst = simplex[2];
        let reflected = lerp(centroid, worst, -1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = lerp(centroid, worst, -2.0);
            let fe = f(expanded);
            (simplex[2], values[2]) = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
        } else if fr < values[1] {
            (simplex[2], values[2]) = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < values[2] {
                let c = lerp(centroid, reflected, 0.5);
                (c, f(c))
            } else {
                let c = lerp(centroid, worst, 0.5);
                (c, f(c))
            };
            if fc < values[2].min(fr) {
                (simplex[2], values[2]) = (contracted, fc);
            } else {
                for i in 1..3 {
                    simplex[i] = lerp(simplex[0], simplex[i], 0.5);
                    values[i] = f(simplex[i]);
                }
            }
        }
    }
    let best = (0..3)
        .min_by(|&i, &j| values[i].total_cmp(&values[j]))
        .unwrap_or(0);
    simplex[best]
}

/// Durations observed by a raw health log: responses are exact, timeouts
/// are censored at the chosen wait.
pub fn health_durations(log: &[LoggedDecision]) -> Result<Vec<(f64, bool)>, EstimateError> {
    log.iter()
        .map(|r| match r.outcome {
            Outcome::Responded { tau } => Ok((tau, false)),
            Outcome::Timeout => Ok((f64::from(r.chosen_action()), true)),
            Outcome::Scale { .. } => Err(EstimateError::Incompatible {
                estimator: "survival",
                expected: "a health log",
            }),
        })
        .collect()
}

/// Per-VM expected downtime of each wait under a fitted recovery-time
/// distribution, integrated on a fixed trapezoid grid over `[0, max action]`.
#[derive(Debug, Clone)]
pub struct SurvivalCostTable {
    params: LomaxParams,
    reboot_cost: f64,
    step: f64,
    /// `cumulative[i] = ∫₀^{i·step} τ f(τ) dτ`.
    cumulative: Vec<f64>,
}

impl SurvivalCostTable {
    pub fn new(params: LomaxParams, max_action: u32, config: &SurvivalConfig) -> Self {
        let n = config.subintervals.max(1);
        let step = f64::from(max_action.max(1)) / n as f64;
        let g = |x: f64| x * params.pdf(x);
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for i in 0..n {
            let (x0, x1) = (i as f64 * step, (i + 1) as f64 * step);
            acc += 0.5 * step * (g(x0) + g(x1));
            cumulative.push(acc);
        }
        Self {
            params,
            reboot_cost: config.reboot_cost,
            step,
            cumulative,
        }
    }

    /// `∫₀^x τ f(τ) dτ`, with a partial trapezoid past the last grid point.
    fn moment(&self, x: f64) -> f64 {
        let i = ((x / self.step).floor() as usize).min(self.cumulative.len() - 1);
        let x0 = i as f64 * self.step;
        if x <= x0 {
            return self.cumulative[i];
        }
        let g = |t: f64| t * self.params.pdf(t);
        self.cumulative[i] + 0.5 * (x - x0) * (g(x0) + g(x))
    }

    /// `∫₀^a τ f(τ) dτ + S(a)·(a + R)`.
    pub fn expected_cost(&self, action: u32) -> f64 {
        let a = f64::from(action);
        self.moment(a) + self.params.survival(a) * (a + self.reboot_cost)
    }

    /// Expected cost of waiting `target` given the machine was still down
    /// after `waited` minutes.
    pub fn conditional_cost(&self, waited: u32, target: u32) -> f64 {
        let (c, t) = (f64::from(waited), f64::from(target));
        let tail = self.params.survival(c);
        if !(tail > 0.0) {
            return t + self.reboot_cost;
        }
        (self.moment(t) - self.moment(c) + self.params.survival(t) * (t + self.reboot_cost)) / tail
    }
}

/// Per-action expected per-VM cost.
pub fn survival_evaluate(
    params: LomaxParams,
    actions: &ActionSpace,
    config: &SurvivalConfig,
) -> Vec<f64> {
    let table = SurvivalCostTable::new(params, actions.max(), config);
    actions
        .values()
        .iter()
        .map(|&a| table.expected_cost(a))
        .collect()
}

/// The wait with the lowest expected cost; ties go to the smaller wait.
pub fn survival_policy(params: LomaxParams, actions: &ActionSpace, config: &SurvivalConfig) -> u32 {
    let costs = survival_evaluate(params, actions, config);
    let mut best = 0;
    for (i, c) in costs.iter().enumerate() {
        if *c < costs[best] {
            best = i;
        }
    }
    actions.values()[best]
}

/// Fit a Lomax model to a health log and return the single-wait policy it
/// implies.
pub fn survival_fit_policy(
    log: &[LoggedDecision],
    config: &SurvivalConfig,
) -> Result<(LomaxParams, FixedAction), EstimateError> {
    let params = survival_fit_lomax(&health_durations(log)?, config)?;
    let actions = log.first().ok_or(EstimateError::EmptyLog)?.actions.clone();
    Ok((
        params,
        FixedAction(survival_policy(params, &actions, config)),
    ))
}

/// Estimate a candidate's cost from a health log: deducible costs are used
/// directly; otherwise the fitted distribution fills in the cost conditional
/// on the machine still being down at the logged wait.
pub fn survival_evaluate_log<P: Policy + ?Sized>(
    log: &[LoggedDecision],
    policy: &P,
    config: &SurvivalConfig,
) -> Result<(EstimateReport, LomaxParams), EstimateError> {
    let params = survival_fit_lomax(&health_durations(log)?, config)?;
    let max_action = log.iter().map(|r| r.actions.max()).max().unwrap_or(1);
    let table = SurvivalCostTable::new(params, max_action, config);
    let terms: Vec<(f64, bool)> = log
        .par_iter()
        .map(|r| {
            let target = policy.act(&r.context, &r.actions);
            let fb = HealthFeedback::new(HealthConfig {
                reboot_cost: config.reboot_cost,
                actions: r.actions.clone(),
            });
            Ok(match fb.deduced_cost(r, target)? {
                Some(c) => (c, true),
                None => (
                    n_vms_of(&r.context) * table.conditional_cost(r.chosen_action(), target),
                    false,
                ),
            })
        })
        .collect::<Result<_, EstimateError>>()?;
    let n_matched = terms.iter().filter(|(_, deduced)| *deduced).count();
    let contributions = terms.into_iter().map(|(c, _)| c).collect();
    let report = EstimateReport::from_contributions(
        "survival",
        policy.policy_id(),
        contributions,
        n_matched,
    )?;
    Ok((report, params))
}

// ── Exploration only ────────────────────────────────────────────────────

/// Records where exploration drew the maximal action.
pub fn exploration_records(log: &[LoggedDecision]) -> Vec<&LoggedDecision> {
    log.iter()
        .filter(|r| r.explored && r.action_index == r.actions.max_index())
        .collect()
}

/// Mean deduced cost of the policy's action over exploration records only.
pub fn exploration_only_evaluate<P: Policy + ?Sized>(
    log: &[LoggedDecision],
    policy: &P,
    model: &dyn FeedbackModel,
) -> Result<EstimateReport, EstimateError> {
    let subset = exploration_records(log);
    if subset.is_empty() {
        return Err(EstimateError::NoExplorationRecords);
    }
    let contributions: Vec<f64> = subset
        .par_iter()
        .map(|r| {
            let target = policy.act(&r.context, &r.actions);
            model
                .deduced_cost(r, target)?
                .ok_or(EstimateError::Feedback(FeedbackError::NotDeducible {
                    target,
                }))
        })
        .collect::<Result<_, _>>()?;
    let n = contributions.len();
    EstimateReport::from_contributions("exploration-only", policy.policy_id(), contributions, n)
}

// ── Bootstrap ───────────────────────────────────────────────────────────

/// Statistic of `resamples` bootstrap resamples (with replacement, same
/// size). Resample `i` draws from its own stream of `seed`, so the result
/// does not depend on the number of worker threads.
pub fn bootstrap_distribution<T, F>(
    inputs: &[T],
    statistic: F,
    resamples: usize,
    seed: u64,
) -> Vec<f64>
where
    T: Sync,
    F: Fn(&[&T]) -> f64 + Sync,
{
    if inputs.is_empty() {
        return Vec::new();
    }
    (0..resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let sample: Vec<&T> = (0..inputs.len())
                .map(|_| &inputs[rng.random_range(0..inputs.len())])
                .collect();
            statistic(&sample)
        })
        .collect()
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of a bootstrapped statistic; `None` when there are no
/// resamples or no inputs.
pub fn bootstrap_ci<T, F>(
    inputs: &[T],
    statistic: F,
    resamples: usize,
    quantiles: (f64, f64),
    seed: u64,
) -> Option<(f64, f64)>
where
    T: Sync,
    F: Fn(&[&T]) -> f64 + Sync,
{
    let mut dist = bootstrap_distribution(inputs, statistic, resamples, seed);
    if dist.is_empty() {
        return None;
    }
    dist.sort_by(f64::total_cmp);
    Some((quantile(&dist, quantiles.0), quantile(&dist, quantiles.1)))
}

pub fn bootstrap_mean_ci(
    contributions: &[f64],
    resamples: usize,
    quantiles: (f64, f64),
    seed: u64,
) -> Option<(f64, f64)> {
    bootstrap_ci(contributions, mean_of_refs, resamples, quantiles, seed)
}

/// Standard deviation of the bootstrapped mean.
pub fn bootstrap_mean_std(contributions: &[f64], resamples: usize, seed: u64) -> f64 {
    let dist = bootstrap_distribution(contributions, mean_of_refs, resamples, seed);
    let m = mean(dist.iter().copied());
    (dist.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (dist.len().max(2) - 1) as f64).sqrt()
}

fn mean_of_refs(sample: &[&f64]) -> f64 {
    mean(sample.iter().map(|v| **v))
}

// ── Unified entry point ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Ips,
    Implicit,
    Direct,
    Naive,
    Survival,
    ExplorationOnly,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Ips,
        EstimatorKind::Implicit,
        EstimatorKind::Direct,
        EstimatorKind::Naive,
        EstimatorKind::Survival,
        EstimatorKind::ExplorationOnly,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Ips => "ips",
            EstimatorKind::Implicit => "implicit",
            EstimatorKind::Direct => "direct",
            EstimatorKind::Naive => "naive",
            EstimatorKind::Survival => "survival",
            EstimatorKind::ExplorationOnly => "exploration-only",
        }
    }

    /// Whether the estimator reads augmented records.
    pub fn needs_augmented(self) -> bool {
        matches!(self, EstimatorKind::Implicit | EstimatorKind::Naive)
    }
}

/// Log given to [`estimate`].
#[derive(Debug, Clone, Copy)]
pub enum EvalLog<'a> {
    Raw(&'a [LoggedDecision]),
    Augmented(&'a [AugmentedRecord]),
}

pub struct EstimateOptions<'a> {
    /// Needed by the exploration-only estimator.
    pub feedback: Option<&'a dyn FeedbackModel>,
    pub training: TrainingConfig,
    pub survival: SurvivalConfig,
    /// Bootstrap resamples; 0 disables the interval.
    pub bootstrap: usize,
    pub quantiles: (f64, f64),
    pub seed: u64,
}

impl Default for EstimateOptions<'_> {
    fn default() -> Self {
        Self {
            feedback: None,
            training: TrainingConfig::default(),
            survival: SurvivalConfig::default(),
            bootstrap: 0,
            quantiles: DEFAULT_QUANTILES,
            seed: 0,
        }
    }
}

/// Run any estimator, checking that the log kind fits it first.
///
/// Mean-of-contribution estimators resample contributions; the regression
/// baselines refit on every resample; survival keeps its fitted parameters.
pub fn estimate<P: Policy + ?Sized>(
    kind: EstimatorKind,
    log: EvalLog<'_>,
    policy: &P,
    options: &EstimateOptions<'_>,
) -> Result<EstimateReport, EstimateError> {
    let incompatible = |expected| EstimateError::Incompatible {
        estimator: kind.label(),
        expected,
    };
    let mut report = match (kind, log) {
        (EstimatorKind::Ips, EvalLog::Raw(l)) => ips_evaluate(l, policy)?,
        (EstimatorKind::Implicit, EvalLog::Augmented(l)) => implicit_evaluate(l, policy)?,
        (EstimatorKind::Direct, EvalLog::Raw(l)) => direct_method(l, policy, &options.training)?,
        (EstimatorKind::Naive, EvalLog::Augmented(l)) => {
            let featurizer = Featurizer::from_contexts(l.iter().map(|r| &r.context));
            naive_implicit_evaluate(l, &featurizer, policy, &options.training)?
        }
        (EstimatorKind::Survival, EvalLog::Raw(l)) => {
            survival_evaluate_log(l, policy, &options.survival)?.0
        }
        (EstimatorKind::ExplorationOnly, EvalLog::Raw(l)) => {
            let model = options.feedback.ok_or(incompatible("a feedback model"))?;
            exploration_only_evaluate(l, policy, model)?
        }
        (k, _) if k.needs_augmented() => return Err(incompatible("an augmented log")),
        _ => return Err(incompatible("a raw log")),
    };
    if options.bootstrap == 0 {
        return Ok(report);
    }
    let b = options.bootstrap;
    let seed = options.seed;
    let refit_ci = match (kind, log) {
        (EstimatorKind::Direct, EvalLog::Raw(l)) => bootstrap_ci(
            l,
            |s: &[&LoggedDecision]| {
                let owned: Vec<LoggedDecision> = s.iter().map(|r| (*r).clone()).collect();
                direct_method(&owned, policy, &options.training).map_or(f64::NAN, |r| r.mean)
            },
            b,
            options.quantiles,
            seed,
        ),
        (EstimatorKind::Naive, EvalLog::Augmented(l)) => bootstrap_ci(
            l,
            |s: &[&AugmentedRecord]| {
                let owned: Vec<AugmentedRecord> = s.iter().map(|r| (*r).clone()).collect();
                let featurizer = Featurizer::from_contexts(owned.iter().map(|r| &r.context));
                naive_implicit_evaluate(&owned, &featurizer, policy, &options.training)
                    .map_or(f64::NAN, |r| r.mean)
            },
            b,
            options.quantiles,
            seed,
        ),
        _ => bootstrap_mean_ci(&report.contributions, b, options.quantiles, seed),
    };
    report.ci = refit_ci.map(|(lo, hi)| [lo, hi]);
    report.seed = Some(seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::{augment, ActionDistribution};
    use crate::policy::{FixedAction, FnPolicy};

    fn health_record(chosen: u32, outcome: Outcome, dist: ActionDistribution) -> LoggedDecision {
        let actions = ActionSpace::range(1, 10).unwrap();
        let tau = match outcome {
            Outcome::Responded { tau } => Some(tau),
            _ => None,
        };
        LoggedDecision {
            context: Context::new("r", 0).with_feature("n_vms", 1.0),
            action_index: actions.index_of(chosen).unwrap(),
            actions,
            action_dist: dist,
            realized_cost: crate::health::health_cost(chosen, tau, 1.0, 10.0),
            outcome,
            explored: false,
        }
    }

    #[test]
    fn ips_single_record() {
        let actions = ActionSpace::range(1, 3).unwrap();
        let dist = ActionDistribution::new(vec![0.25, 0.25, 0.5], &actions).unwrap();
        let r = LoggedDecision {
            context: Context::new("a", 0),
            action_index: 2,
            actions,
            action_dist: dist,
            outcome: Outcome::Responded { tau: 2.0 },
            realized_cost: 5.0,
            explored: false,
        };
        let hit = ips_evaluate(std::slice::from_ref(&r), &FixedAction(3)).unwrap();
        assert_eq!(hit.mean, 10.0);
        assert_eq!(hit.n_matched, 1);
        let miss = ips_evaluate(std::slice::from_ref(&r), &FixedAction(2)).unwrap();
        assert_eq!(miss.mean, 0.0);
        assert_eq!(miss.n_matched, 0);
    }

    #[test]
    fn ips_rejects_zero_propensity() {
        let mut r = health_record(5, Outcome::Timeout, ActionDistribution::uniform(10));
        r.action_dist = ActionDistribution::point_mass(10, 0);
        let err = ips_evaluate(&[r], &FixedAction(5)).unwrap_err();
        assert!(matches!(err, EstimateError::NonPositivePropensity { .. }));
    }

    #[test]
    fn implicit_contributions() {
        let fb = HealthFeedback::new(HealthConfig::default());
        let responded = health_record(
            5,
            Outcome::Responded { tau: 3.0 },
            ActionDistribution::uniform(10),
        );
        let timeout = health_record(5, Outcome::Timeout, ActionDistribution::uniform(10));
        let aug = |r: &LoggedDecision| vec![augment(&fb, r).unwrap()];

        let e = implicit_evaluate(&aug(&responded), &FixedAction(4)).unwrap();
        assert!((e.mean - 3.75).abs() < 1e-12);
        let e = implicit_evaluate(&aug(&timeout), &FixedAction(2)).unwrap();
        assert!((e.mean - 12.0 / 0.9).abs() < 1e-12);
        let e = implicit_evaluate(&aug(&timeout), &FixedAction(7)).unwrap();
        assert_eq!(e.mean, 0.0);
        assert_eq!(e.n_matched, 0);
    }

    #[test]
    fn deterministic_deployment_gives_realized_mean() {
        let fb = HealthFeedback::new(HealthConfig::default());
        let log: Vec<LoggedDecision> = (0..20)
            .map(|i| {
                let outcome = if i % 3 == 0 {
                    Outcome::Timeout
                } else {
                    Outcome::Responded {
                        tau: 0.2 * f64::from(i),
                    }
                };
                health_record(4, outcome, ActionDistribution::point_mass(10, 3))
            })
            .collect();
        let aug: Vec<_> = log.iter().map(|r| augment(&fb, r).unwrap()).collect();
        let realized = mean(log.iter().map(|r| r.realized_cost));
        assert_eq!(ips_evaluate(&log, &FixedAction(4)).unwrap().mean, realized);
        assert_eq!(
            implicit_evaluate(&aug, &FixedAction(4)).unwrap().mean,
            realized
        );
    }

    #[test]
    fn direct_method_reproduces_linear_costs() {
        let actions = ActionSpace::range(1, 2).unwrap();
        let log: Vec<LoggedDecision> = (0..50)
            .map(|i| {
                let x = f64::from(i) / 10.0;
                LoggedDecision {
                    context: Context::new(format!("d{i}"), 0).with_feature("x", x),
                    actions: actions.clone(),
                    action_index: (i % 2) as usize,
                    action_dist: ActionDistribution::uniform(2),
                    outcome: Outcome::Timeout,
                    realized_cost: 2.0 * x,
                    explored: false,
                }
            })
            .collect();
        let config = TrainingConfig {
            ridge_lambda: 0.0,
            ..TrainingConfig::default()
        };
        let featurizer = Featurizer::new(vec!["x".into()]);
        let model = direct_method_fit(&log, &featurizer, &config).unwrap();
        for r in &log {
            for a in [1, 2] {
                let p = model.predict(&r.context, a).unwrap();
                assert!((p - r.realized_cost).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn direct_method_falls_back_to_global_mean() {
        let actions = ActionSpace::range(1, 3).unwrap();
        let log: Vec<LoggedDecision> = [4.0, 6.0]
            .iter()
            .enumerate()
            .map(|(i, c)| LoggedDecision {
                context: Context::new(format!("f{i}"), 0).with_feature("x", i as f64),
                actions: actions.clone(),
                action_index: 0,
                action_dist: ActionDistribution::point_mass(3, 0),
                outcome: Outcome::Timeout,
                realized_cost: *c,
                explored: false,
            })
            .collect();
        let report = direct_method(&log, &FixedAction(3), &TrainingConfig::default()).unwrap();
        assert_eq!(report.fallback_actions, vec![2, 3]);
        assert!((report.mean - 5.0).abs() < 1e-12);
    }

    #[test]
    fn naive_single_entry_predicts_its_cost() {
        let aug = AugmentedRecord {
            context: Context::new("n", 0).with_feature("x", 1.0),
            actions: ActionSpace::range(1, 1).unwrap(),
            entries: vec![crate::feedback::AugmentedEntry {
                action_index: 0,
                cost: 7.5,
                p_event: 1.0,
            }],
            source_action_index: 0,
            explored: false,
        };
        let f = Featurizer::from_contexts([&aug.context]);
        let e = naive_implicit_evaluate(&[aug], &f, &FixedAction(1), &TrainingConfig::default())
            .unwrap();
        assert!((e.mean - 7.5).abs() < 1e-9);
    }

    #[test]
    fn lomax_closed_forms() {
        let p = LomaxParams::new(1.0, 4.0).unwrap();
        assert_eq!(p.survival(0.0), 1.0);
        assert_eq!(p.survival(4.0), 0.5);
        let q = LomaxParams::new(2.0, 3.0).unwrap();
        assert!((q.survival(q.quantile(0.7)) - 0.3).abs() < 1e-12);
        assert!(LomaxParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn lomax_fit_rejects_degenerate_input() {
        let cfg = SurvivalConfig::default();
        assert!(survival_fit_lomax(&[(1.0, true), (2.0, true)], &cfg).is_err());
        assert!(survival_fit_lomax(&[(0.0, false)], &cfg).is_err());
    }

    #[test]
    fn survival_costs_in_limit_cases() {
        let actions = ActionSpace::range(1, 10).unwrap();
        // mass concentrated near 0.01 minutes
        let early = LomaxParams::new(1000.0, 10.0).unwrap();
        let costs = survival_evaluate(early, &actions, &SurvivalConfig::default());
        let tau0 = early.lam / (early.alpha - 1.0);
        for c in &costs {
            assert!((c - tau0).abs() < 1e-4, "{c} vs {tau0}");
        }
        assert_eq!(
            survival_policy(early, &actions, &SurvivalConfig::default()),
            1
        );

        // all mass far beyond the largest wait, no reboot cost
        let late = LomaxParams::new(1.0, 1e9).unwrap();
        let cfg = SurvivalConfig {
            reboot_cost: 0.0,
            ..SurvivalConfig::default()
        };
        let costs = survival_evaluate(late, &actions, &cfg);
        for (a, c) in actions.values().iter().zip(&costs) {
            assert!((c - f64::from(*a)).abs() < 1e-6);
        }
        assert_eq!(survival_policy(late, &actions, &cfg), 1);
    }

    #[test]
    fn exploration_only_needs_explored_records() {
        let fb = HealthFeedback::new(HealthConfig::default());
        let mut r = health_record(
            10,
            Outcome::Responded { tau: 4.0 },
            ActionDistribution::uniform(10),
        );
        let err =
            exploration_only_evaluate(std::slice::from_ref(&r), &FixedAction(3), &fb).unwrap_err();
        assert_eq!(err.to_string(), "no exploration records");
        r.explored = true;
        let e = exploration_only_evaluate(&[r], &FixedAction(3), &fb).unwrap();
        assert_eq!(e.mean, 13.0);
    }

    #[test]
    fn bootstrap_edge_cases() {
        let same = vec![2.0; 50];
        assert_eq!(
            bootstrap_mean_ci(&same, 200, DEFAULT_QUANTILES, 1),
            Some((2.0, 2.0))
        );
        let data: Vec<f64> = (0..50).map(f64::from).collect();
        let (lo, hi) = bootstrap_mean_ci(&data, 1, DEFAULT_QUANTILES, 5).unwrap();
        assert_eq!(lo, hi);
        let single = bootstrap_distribution(&data, mean_of_refs, 1, 5);
        assert_eq!(single, vec![lo]);
        assert_eq!(bootstrap_mean_ci(&data, 0, DEFAULT_QUANTILES, 5), None);
        assert_eq!(
            bootstrap_mean_ci(&data, 100, DEFAULT_QUANTILES, 9),
            bootstrap_mean_ci(&data, 100, DEFAULT_QUANTILES, 9)
        );
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert!((quantile(&s, 0.5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn estimate_checks_log_kind() {
        let r = health_record(5, Outcome::Timeout, ActionDistribution::uniform(10));
        let err = estimate(
            EstimatorKind::Implicit,
            EvalLog::Raw(std::slice::from_ref(&r)),
            &FixedAction(2),
            &EstimateOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "implicit needs an augmented log");
        let policy = FnPolicy::new("half", |_: &Context, a: &ActionSpace| a.max() / 2);
        let ok = estimate(
            EstimatorKind::Ips,
            EvalLog::Raw(&[r]),
            &policy,
            &EstimateOptions {
                bootstrap: 10,
                seed: 3,
                ..EstimateOptions::default()
            },
        )
        .unwrap();
        assert!(ok.ci.is_some());
        let json = serde_json::to_value(&ok).unwrap();
        assert_eq!(json["seed"], 3);
        assert!(json.get("contributions").is_none());
    }
}
