//! Independent reference checks: rollouts, exhaustive search, Bayes-rule
//! identities by simulation.

use rayon::prelude::*;

use offline_rl::config::ExperimentConfig;
use offline_rl::cppo::{cppo_optimize, pessimistic_value};
use offline_rl::data::{sample_dataset, weighted_l1sq, OfflineDistribution};
use offline_rl::estimation::{build_version_space, mle_finite};
use offline_rl::experiments::radius_for;
use offline_rl::mdp::occupancy;
use offline_rl::models::{
    make_finite_class, random_policy, random_task, random_transition, FiniteModelClass,
};
use offline_rl::oracle::{
    brute_force_max_min, deterministic_policies, grid_max_min_two_actions, monte_carlo,
    trajectory_value,
};
use offline_rl::pspo::{posterior_update, ModelPrior, PosteriorSampler, SampledModel};
use offline_rl::rng::{categorical, derive_seed, stream};
use offline_rl::stats::{mean, std_error};
use offline_rl::TabularMdp;

#[test]
fn monte_carlo_agrees_with_dynamic_programming() {
    let mut rng = stream(3, 0);
    let task = random_task(&mut rng, 4, 3, 5);
    let mdp = TabularMdp::new(task, random_transition(&mut rng, 4, 3, 1.0)).unwrap();
    let pi = random_policy(&mut rng, 4, 3, 5);
    let mc = monte_carlo(&mdp, &pi, 1_000_000, 11);
    let exact = mdp.task.value(&mdp.transition, &pi).unwrap();
    assert!(
        (mc.value_mean - exact).abs() <= 3.0 * mc.value_se,
        "{} vs {exact} (se {})",
        mc.value_mean,
        mc.value_se
    );
    let d = occupancy(&mdp, &pi).unwrap();
    for (v, x) in mc.visits.iter().zip(&d.average) {
        // binomial-ish SE on a per-step frequency
        let se = (x * (1.0 - x) / 1e6).sqrt();
        assert!((v - x).abs() <= 4.0 * se + 1e-6, "{v} vs {x}");
    }
}

#[test]
fn planning_matches_exhaustive_search() {
    for seed in 0..20 {
        let mut rng = stream(seed, 1);
        let task = random_task(&mut rng, 3, 2, 3);
        let mdp = TabularMdp::new(task, random_transition(&mut rng, 3, 2, 1.0)).unwrap();
        let (_, v) = mdp.task.plan(&mdp.transition).unwrap();
        let best = deterministic_policies(3, 2, 3)
            .iter()
            .map(|p| trajectory_value(&mdp, p))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((v - best).abs() <= 1e-12);
    }
}

#[test]
fn single_member_max_min_is_planning() {
    for seed in 0..10 {
        let mut rng = stream(seed, 2);
        let task = random_task(&mut rng, 2, 2, 2);
        let p = random_transition(&mut rng, 2, 2, 1.0);
        let class = FiniteModelClass::new(vec![p.clone()], 0).unwrap();
        let (bf, _) = brute_force_max_min(&class, &[0], &task).unwrap();
        let (_, v) = task.plan(&p).unwrap();
        assert!((bf - v).abs() <= 1e-12);
        let res = cppo_optimize(&class, &[0], &task, 2000, 0.24).unwrap();
        assert!((res.pessimistic_value - v).abs() <= 1e-6);
    }
}

#[test]
fn stochastic_grid_never_below_deterministic() {
    for seed in 0..10 {
        let mut rng = stream(seed, 3);
        let task = random_task(&mut rng, 2, 2, 2);
        let models = (0..3)
            .map(|_| random_transition(&mut rng, 2, 2, 1.0))
            .collect();
        let class = FiniteModelClass::new(models, 0).unwrap();
        let (det, _) = brute_force_max_min(&class, &[0, 1, 2], &task).unwrap();
        // the grid contains every deterministic policy
        let grid = grid_max_min_two_actions(&class, &[0, 1, 2], &task, 4).unwrap();
        assert!(grid >= det - 1e-12);
        let res = cppo_optimize(&class, &[0, 1, 2], &task, 3000, 0.24).unwrap();
        assert!(res.pessimistic_value >= det - 1e-6);
    }
}

/// `E[L(π(P*); D)] = E[L(π(P_t); D)]` with `P* ∼ prior`, `D ∼ P*`, `P_t ∼ β(·|D)`.
#[test]
fn posterior_draws_are_exchangeable_with_truth() {
    let class = make_finite_class(4, 3, 2, 6, 0.8).unwrap();
    let task = random_task(&mut stream(4, 9), 3, 2, 3);
    let weights = vec![1.0 / 6.0; 6];
    let prior = ModelPrior::discrete(class.clone(), weights.clone()).unwrap();
    let plans: Vec<_> = class
        .models
        .iter()
        .map(|m| task.plan(m).unwrap().0)
        .collect();
    let rho = OfflineDistribution::uniform(3, 2);
    let diffs: Vec<f64> = (0..4000u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(k, 0xe4);
            let star = categorical(&mut rng, &weights);
            let mdp = TabularMdp::new(task.clone(), class.models[star].clone()).unwrap();
            let data = sample_dataset(&mdp, &rho, 15, derive_seed(k, 1)).unwrap();
            let post = posterior_update(&prior, &data).unwrap();
            let SampledModel::Member(t) = PosteriorSampler::new(&post).unwrap().sample(&mut rng)
            else {
                unreachable!()
            };
            let vs = build_version_space(&class, mle_finite(&class, &data).unwrap(), &data, 0.2)
                .unwrap();
            let lcb = |i: usize| {
                pessimistic_value(&class, &vs.member_indices, &task, &plans[i])
                    .unwrap()
                    .0
            };
            lcb(star) - lcb(t)
        })
        .collect();
    let (m, se) = (mean(&diffs), std_error(&diffs));
    assert!(m.abs() <= 3.0 * se, "mean diff {m} vs se {se}");
}

/// When `P* ∈ M_D` every member is within a constant multiple of `ξ` of `P*`
/// in population squared ℓ1.
#[test]
fn concentration_transfer_on_pessimism_scenario() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/pessimism.toml");
    let cfg = ExperimentConfig::from_path(std::path::Path::new(path)).unwrap();
    let sc = cfg.scenario.build(cfg.seed).unwrap();
    let n = cfg.sweep.n_grid[0];
    let xi = radius_for(&cfg, &sc, n, 0).unwrap();
    let class = sc.class().unwrap();
    let worst = (0..100u64)
        .into_par_iter()
        .filter_map(|t| {
            let data = sample_dataset(&sc.truth, &sc.rho, n, derive_seed(0x77, t)).unwrap();
            let vs =
                build_version_space(class, mle_finite(class, &data).unwrap(), &data, xi).unwrap();
            vs.contains(class.truth_index).then(|| {
                vs.member_indices
                    .iter()
                    .map(|&i| weighted_l1sq(sc.rho.table(), &class.models[i], class.truth()))
                    .fold(0.0, f64::max)
            })
        })
        .reduce(|| 0.0, f64::max);
    assert!(worst <= 8.0 * xi, "{worst} vs 8 xi = {}", 8.0 * xi);
}
