//! Exact expectations by enumerating every deployed action.

use implicit_cf::estimators::{implicit_evaluate, ips_evaluate};
use implicit_cf::feedback::{augment_all, ActionSpace, Context, LoggedDecision};
use implicit_cf::policy::{ExplorationConfig, ExplorationMode, FnPolicy};
use implicit_cf::scale::{
    completion_time, CostVariant, ScaleConfig, ScaleEnv, ScaleEvent, ScaleRequest,
};
use implicit_cf::sim::{mean, stream_rng, Simulator};
use rand::Rng;

fn event(i: usize, k: u32, times: Vec<f64>) -> ScaleEvent {
    let request = ScaleRequest {
        id: format!("r{i}"),
        ts: i as i64,
        k,
        vm_type: "small".into(),
    };
    ScaleEvent {
        context: Context::new(request.id.clone(), request.ts).with_feature("slot", i as f64),
        request,
        times,
    }
}

/// Three requests whose completion times straddle the objective.
fn events() -> Vec<ScaleEvent> {
    vec![
        event(0, 4, vec![70.0, 95.0, 60.0, 88.0, 75.0, 50.0, 120.0, 66.0]),
        event(1, 2, vec![85.0, 78.0, 90.0, 79.0]),
        event(2, 10, vec![
            40.0, 55.0, 62.0, 71.0, 77.0, 80.5, 83.0, 90.0, 96.0, 110.0, 79.0, 45.0,
        ]),
    ]
}

/// Expected IPS and Implicit estimates of `candidate` under a per-event
/// deployed distribution, next to its true cost.
fn expectations(
    env: &ScaleEnv,
    events: &[ScaleEvent],
    explore: &ExplorationConfig,
    greedy: &[usize],
    candidate: &[u32],
) -> (f64, f64, f64) {
    let spaces: Vec<ActionSpace> = events.iter().map(|e| env.actions(e)).collect();
    let dists: Vec<_> = spaces
        .iter()
        .zip(greedy)
        .map(|(s, g)| explore.distribution(*g, s.len()))
        .collect();
    let policy = FnPolicy::new("table", |c: &Context, _: &ActionSpace| {
        candidate[c.feature("slot").unwrap() as usize]
    });

    let sizes: Vec<usize> = spaces.iter().map(ActionSpace::len).collect();
    let total: usize = sizes.iter().product();
    let (mut ips, mut implicit) = (0.0, 0.0);
    for assignment in 0..total {
        let mut rest = assignment;
        let mut weight = 1.0;
        let log: Vec<LoggedDecision> = events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let index = rest % sizes[i];
                rest /= sizes[i];
                weight *= dists[i].prob(index);
                let action = spaces[i].values()[index];
                LoggedDecision {
                    context: e.context.clone(),
                    actions: spaces[i].clone(),
                    action_index: index,
                    action_dist: dists[i].clone(),
                    outcome: env.outcome(e, action),
                    realized_cost: env.cost(e, action),
                    explored: false,
                }
            })
            .collect();
        if weight == 0.0 {
            continue;
        }
        let aug = augment_all(env.feedback(), &log).unwrap();
        ips += weight * ips_evaluate(&log, &policy).unwrap().mean;
        implicit += weight * implicit_evaluate(&aug, &policy).unwrap().mean;
    }
    let cfg = env.config();
    let truth = mean(events.iter().zip(candidate).map(|(e, &a)| {
        let t = completion_time(&e.times, e.request.k, a).unwrap();
        env.variant().cost(t, a, cfg)
    }));
    (ips, implicit, truth)
}

#[test]
fn scale_estimators_are_unbiased_for_both_costs() {
    let events = events();
    let mut rng = stream_rng(12, 0);
    for variant in [CostVariant::Cost1, CostVariant::Cost2] {
        let env = ScaleEnv::new(variant, ScaleConfig::default());
        for mode in [ExplorationMode::Maximal, ExplorationMode::Uniform] {
            let explore = ExplorationConfig::new(0.3, mode).unwrap();
            for _ in 0..10 {
                let spaces: Vec<ActionSpace> = events.iter().map(|e| env.actions(e)).collect();
                let greedy: Vec<usize> = spaces.iter().map(|s| rng.random_range(0..s.len())).collect();
                let candidate: Vec<u32> = spaces
                    .iter()
                    .map(|s| s.values()[rng.random_range(0..s.len())])
                    .collect();
                let (ips, implicit, truth) = expectations(&env, &events, &explore, &greedy, &candidate);
                // IPS needs support everywhere, which only uniform exploration gives
                if mode == ExplorationMode::Uniform {
                    assert!((ips - truth).abs() < 1e-9, "{variant:?} ips {ips} vs {truth}");
                }
                assert!(
                    (implicit - truth).abs() < 1e-9,
                    "{variant:?} {mode:?} implicit {implicit} vs {truth}"
                );
            }
        }
    }
}

#[test]
fn maximal_exploration_alone_supports_implicit_but_not_ips() {
    let events = events();
    let env = ScaleEnv::new(CostVariant::Cost2, ScaleConfig::default());
    let explore = ExplorationConfig::new(0.2, ExplorationMode::Maximal).unwrap();
    // deployed greedy is the smallest action, candidate always the middle one
    let greedy = vec![0; events.len()];
    let candidate: Vec<u32> = events
        .iter()
        .map(|e| {
            let s = env.actions(e);
            s.values()[s.len() / 2]
        })
        .collect();
    let (ips, implicit, truth) = expectations(&env, &events, &explore, &greedy, &candidate);
    assert!((implicit - truth).abs() < 1e-9);
    assert!(ips < truth - 1.0, "ips {ips} should miss unsupported actions");
}
