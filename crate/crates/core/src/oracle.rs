//! Slow reference implementations: trajectory enumeration, Monte Carlo
//! rollouts and exhaustive policy search. Used as independent checks.

use crate::cppo::pessimistic_value;
use crate::data::Cdf;
use crate::error::Result;
use crate::mdp::{TabularMdp, Task, TimePolicy};
use crate::models::FiniteModelClass;
use crate::rng::stream;

/// `V^π` as an explicit sum over every trajectory.
pub fn trajectory_value(mdp: &TabularMdp, policy: &TimePolicy) -> f64 {
    fn go(mdp: &TabularMdp, pi: &TimePolicy, h: usize, s: usize) -> f64 {
        if h == mdp.horizon() {
            return 0.0;
        }
        let mut total = 0.0;
        for a in 0..mdp.num_actions() {
            let pa = pi.prob(h, s, a);
            if pa == 0.0 {
                continue;
            }
            let mut future = 0.0;
            for sp in 0..mdp.num_states() {
                let ps = mdp.transition.prob(s, a, sp);
                if ps > 0.0 {
                    future += ps * go(mdp, pi, h + 1, sp);
                }
            }
            total += pa * (mdp.task.reward(s, a) + future);
        }
        total
    }
    let d0 = mdp.task.initial_dist();
    (0..mdp.num_states())
        .map(|s| d0[s] * go(mdp, policy, 0, s))
        .sum()
}

/// Rollout estimate of the value and per-pair average visit frequencies.
pub struct RolloutEstimate {
    pub value_mean: f64,
    pub value_se: f64,
    /// `(1/H) · visits(s,a) / rollouts`.
    pub visits: Vec<f64>,
}

pub fn monte_carlo(
    mdp: &TabularMdp,
    policy: &TimePolicy,
    rollouts: usize,
    seed: u64,
) -> RolloutEstimate {
    let (ns, na, hz) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut rng = stream(seed, 0x3c);
    let d0 = Cdf::new(mdp.task.initial_dist());
    let rows: Vec<Cdf> = (0..ns * na)
        .map(|i| Cdf::new(mdp.transition.row(i / na, i % na)))
        .collect();
    let pis: Vec<Cdf> = (0..hz * ns)
        .map(|i| Cdf::new(policy.row(i / ns, i % ns)))
        .collect();
    let mut visits = vec![0.0; ns * na];
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..rollouts {
        let mut s = d0.sample(&mut rng);
        let mut ret = 0.0;
        for h in 0..hz {
            let a = pis[h * ns + s].sample(&mut rng);
            visits[s * na + a] += 1.0;
            ret += mdp.task.reward(s, a);
            s = rows[s * na + a].sample(&mut rng);
        }
        sum += ret;
        sum2 += ret * ret;
    }
    let m = rollouts as f64;
    let mean = sum / m;
    let var = (sum2 / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    visits.iter_mut().for_each(|v| *v /= m * hz as f64);
    RolloutEstimate {
        value_mean: mean,
        value_se: (var / m).sqrt(),
        visits,
    }
}

/// Every deterministic time-indexed policy, `|A|^(H·|S|)` of them.
pub fn deterministic_policies(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
) -> Vec<TimePolicy> {
    let slots = horizon * num_states;
    let total = num_actions.pow(slots as u32);
    (0..total)
        .map(|mut code| {
            let choice: Vec<usize> = (0..slots)
                .map(|_| {
                    let a = code % num_actions;
                    code /= num_actions;
                    a
                })
                .collect();
            TimePolicy::deterministic(num_states, num_actions, horizon, &choice)
        })
        .collect()
}

/// Exhaustive `max_π min_P V^π_P` over deterministic policies.
pub fn brute_force_max_min(
    class: &FiniteModelClass,
    members: &[usize],
    task: &Task,
) -> Result<(f64, TimePolicy)> {
    let mut best: Option<(f64, TimePolicy)> = None;
    for pi in deterministic_policies(task.num_states(), task.num_actions(), task.horizon()) {
        let (v, _) = pessimistic_value(class, members, task, &pi)?;
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, pi));
        }
    }
    Ok(best.expect("at least one policy"))
}

/// `max_π min_P V^π_P` over two-action stochastic policies whose
/// probabilities lie on a grid of `steps + 1` points per `(h,s)`.
pub fn grid_max_min_two_actions(
    class: &FiniteModelClass,
    members: &[usize],
    task: &Task,
    steps: usize,
) -> Result<f64> {
    assert_eq!(task.num_actions(), 2, "grid oracle is for two actions");
    let (ns, hz) = (task.num_states(), task.horizon());
    let slots = ns * hz;
    let total = (steps + 1).pow(slots as u32);
    let mut best = f64::NEG_INFINITY;
    let mut probs = vec![0.0; slots * 2];
    for mut code in 0..total {
        for k in 0..slots {
            let p = (code % (steps + 1)) as f64 / steps as f64;
            code /= steps + 1;
            probs[2 * k] = p;
            probs[2 * k + 1] = 1.0 - p;
        }
        let pi = TimePolicy::from_flat(ns, 2, hz, probs.clone())?;
        let (v, _) = pessimistic_value(class, members, task, &pi)?;
        best = best.max(v);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_count() {
        assert_eq!(deterministic_policies(2, 2, 2).len(), 16);
        assert_eq!(deterministic_policies(1, 3, 2).len(), 9);
    }
}
