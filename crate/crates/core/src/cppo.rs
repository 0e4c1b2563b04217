//! Pessimistic evaluation over a version space and the max-min policy search.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{std_normal, OfflineDataset};
use crate::error::{param, Error, Result};
use crate::estimation::{
    build_version_space, mle_finite, psd_sqrt, spectral_norm, KnrBall, VersionSpace,
};
use crate::mdp::{npg_step_with, NpgForm, Task, TimePolicy, ValueTriple};
use crate::models::{FiniteModelClass, KnrScenario};
use crate::rng::stream;

/// `min_{P ∈ members} V^π_P` and the lowest-index minimizer.
pub fn pessimistic_value(
    class: &FiniteModelClass,
    members: &[usize],
    task: &Task,
    policy: &TimePolicy,
) -> Result<(f64, usize)> {
    let (v, i, _) = worst_member(class, members, task, policy)?;
    Ok((v, i))
}

fn worst_member(
    class: &FiniteModelClass,
    members: &[usize],
    task: &Task,
    policy: &TimePolicy,
) -> Result<(f64, usize, ValueTriple)> {
    let mut worst: Option<(f64, usize, ValueTriple)> = None;
    for &i in members {
        let vt = task.evaluate(&class.models[i], policy)?;
        if worst.as_ref().is_none_or(|(w, _, _)| vt.value < *w) {
            worst = Some((vt.value, i, vt));
        }
    }
    worst.ok_or(Error::EmptyVersionSpace)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CppoIterate {
    pub iteration: usize,
    pub pessimistic_value: f64,
    pub worst_model_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CppoResult {
    pub policy: TimePolicy,
    pub pessimistic_value: f64,
    pub worst_model_index: usize,
    pub iterations: usize,
    pub best_iteration: usize,
    /// The returned policy is the greedy rounding of iterate `best_iteration`.
    pub rounded: bool,
    pub trajectory: Vec<CppoIterate>,
}

impl CppoResult {
    /// `iteration,pessimistic_value,worst_model_index` rows.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("iteration,pessimistic_value,worst_model_index\n");
        for it in &self.trajectory {
            out.push_str(&format!(
                "{},{:.12},{}\n",
                it.iteration, it.pessimistic_value, it.worst_model_index
            ));
        }
        out
    }
}

pub(crate) fn check_eta(eta: f64, horizon: usize) -> Result<()> {
    let bound = 1.0 / (2.0 * horizon as f64);
    if !(eta > 0.0 && eta < bound) {
        return Err(param(
            "eta",
            format!("{eta} must lie in (0, 1/(2H)) = (0, {bound})"),
        ));
    }
    Ok(())
}

pub fn cppo_optimize(
    class: &FiniteModelClass,
    members: &[usize],
    task: &Task,
    iterations: usize,
    eta: f64,
) -> Result<CppoResult> {
    cppo_optimize_with(class, members, task, iterations, eta, NpgForm::PerStep)
}

/// Best-response dynamics: NPG on the worst member's advantage. Every iterate
/// and its greedy rounding are candidates; the one with the highest
/// pessimistic value is returned (earliest on ties, iterate before rounding).
pub fn cppo_optimize_with(
    class: &FiniteModelClass,
    members: &[usize],
    task: &Task,
    iterations: usize,
    eta: f64,
    form: NpgForm,
) -> Result<CppoResult> {
    if iterations == 0 {
        return Err(param("T", "need at least one iteration"));
    }
    check_eta(eta, task.horizon())?;
    if members.is_empty() {
        return Err(Error::EmptyVersionSpace);
    }
    let mut pi = TimePolicy::uniform(task.num_states(), task.num_actions(), task.horizon());
    let mut trajectory = Vec::with_capacity(iterations + 1);
    let mut best: Option<(f64, usize, bool, TimePolicy)> = None;
    let mut last_rounded: Option<TimePolicy> = None;
    for t in 0..=iterations {
        let (v, worst, vt) = worst_member(class, members, task, &pi)?;
        trajectory.push(CppoIterate {
            iteration: t,
            pessimistic_value: v,
            worst_model_index: worst,
        });
        if best.as_ref().is_none_or(|(b, ..)| v > *b) {
            best = Some((v, t, false, pi.clone()));
        }
        let g = pi.greedy();
        if last_rounded.as_ref() != Some(&g) {
            let (vg, _) = pessimistic_value(class, members, task, &g)?;
            if best.as_ref().is_none_or(|(b, ..)| vg > *b) {
                best = Some((vg, t, true, g.clone()));
            }
            last_rounded = Some(g);
        }
        if t < iterations {
            pi = npg_step_with(&pi, &vt, eta, form)?;
        }
    }
    let (_, best_iteration, rounded, policy) = best.expect("at least one iterate");
    // recompute exactly at return
    let (pessimistic_value, worst_model_index) = pessimistic_value(class, members, task, &policy)?;
    Ok(CppoResult {
        policy,
        pessimistic_value,
        worst_model_index,
        iterations,
        best_iteration,
        rounded,
        trajectory,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineResult {
    pub result: CppoResult,
    pub version_space: VersionSpace,
    pub xi: f64,
    /// Harness diagnostic; never read by the algorithm.
    pub truth_in_space: bool,
}

/// MLE → version space at radius `xi` → max-min search.
pub fn cppo_pipeline(
    class: &FiniteModelClass,
    dataset: &OfflineDataset,
    task: &Task,
    xi: f64,
    iterations: usize,
    eta: f64,
) -> Result<PipelineResult> {
    let mle = mle_finite(class, dataset)?;
    let version_space = build_version_space(class, mle, dataset, xi)?;
    let result = cppo_optimize(class, &version_space.member_indices, task, iterations, eta)?;
    Ok(PipelineResult {
        truth_in_space: version_space.contains(class.truth_index),
        result,
        version_space,
        xi,
    })
}

/// Plan on the MLE, no pessimism. Returns the policy and the MLE index.
pub fn naive_certainty_equivalent(
    class: &FiniteModelClass,
    dataset: &OfflineDataset,
    task: &Task,
) -> Result<(TimePolicy, usize)> {
    let mle = mle_finite(class, dataset)?;
    let (pi, _) = task.plan(&class.models[mle])?;
    Ok((pi, mle))
}

/// Monte Carlo value of a candidate policy under `s' = Wφ(s,a) + ζε`.
/// Noise comes from `stream(seed, rollout)`, so every `(policy, W)` pair sees
/// the same noise sequence.
pub fn knr_rollout_value(
    scenario: &KnrScenario,
    policy_index: usize,
    w: &DMatrix<f64>,
    rollouts: usize,
    seed: u64,
) -> f64 {
    let model = &scenario.model;
    let policy = scenario.candidate_policies[policy_index];
    let mut total = 0.0;
    for k in 0..rollouts {
        let mut rng = stream(seed, k as u64);
        let start = &scenario.initial_states[k % scenario.initial_states.len()];
        let mut s = start.clone();
        for _ in 0..scenario.horizon {
            let a = policy.act(&s);
            total += scenario.reward(&s, a);
            let mean = model.mean_next(w, &s, a);
            s = mean
                .iter()
                .map(|m| m + model.noise_sigma * std_normal(&mut rng))
                .collect();
        }
    }
    total / rollouts as f64
}

/// `K` models on the boundary of `{‖(W − Ŵ)(Σ_n + λI)^{1/2}‖₂ ≤ ξ}` (a subset
/// of the confidence ball) plus its center.
pub fn knr_ball_samples(ball: &KnrBall, lambda: f64, k: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let d = ball.sigma_n.nrows();
    let ds = ball.w_hat.nrows();
    let reg = &ball.sigma_n + DMatrix::identity(d, d) * lambda;
    let inv_root = psd_sqrt(&reg)
        .try_inverse()
        .expect("regularized covariance is invertible");
    let mut rng = stream(seed, 0xba11);
    let mut out = vec![ball.w_hat.clone()];
    for _ in 0..k {
        let z = DMatrix::from_fn(ds, d, |_, _| std_normal(&mut rng));
        let norm = spectral_norm(&z);
        out.push(&ball.w_hat + (z / norm) * &inv_root * ball.xi);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KnrCppoResult {
    pub policy_index: usize,
    pub pessimistic_value: f64,
    /// Per candidate: `(pessimistic value, worst sample index)`.
    pub candidate_values: Vec<(f64, usize)>,
    pub num_models: usize,
}

/// Outer max over the scenario's candidate policies, inner min over sampled
/// ball models; approximate by construction.
pub fn knr_cppo(
    scenario: &KnrScenario,
    ball: &KnrBall,
    lambda: f64,
    num_boundary: usize,
    rollouts: usize,
    seed: u64,
) -> Result<KnrCppoResult> {
    if scenario.candidate_policies.is_empty() {
        return Err(param("candidate_policies", "empty"));
    }
    let models = knr_ball_samples(ball, lambda, num_boundary, seed);
    let candidate_values: Vec<(f64, usize)> = (0..scenario.candidate_policies.len())
        .map(|p| {
            models
                .iter()
                .enumerate()
                .map(|(m, w)| (knr_rollout_value(scenario, p, w, rollouts, seed), m))
                .fold(
                    (f64::INFINITY, 0),
                    |acc, x| if x.0 < acc.0 { x } else { acc },
                )
        })
        .collect();
    let (policy_index, &(pessimistic_value, _)) = candidate_values
        .iter()
        .enumerate()
        .fold(
            None,
            |acc: Option<(usize, &(f64, usize))>, (i, v)| match acc {
                Some((_, b)) if b.0 >= v.0 => acc,
                _ => Some((i, v)),
            },
        )
        .expect("non-empty");
    Ok(KnrCppoResult {
        policy_index,
        pessimistic_value,
        candidate_values,
        num_models: models.len(),
    })
}
