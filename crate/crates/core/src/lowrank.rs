//! Representation learning over finite `(μ, φ)` classes and the matching
//! gap diagnostics.

use serde::Serialize;

use crate::coverage::{
    initial_dist_concentrability, numerical_rank, relative_condition_number, second_moment,
};
use crate::cppo::cppo_pipeline;
use crate::data::{OfflineDataset, OfflineDistribution};
use crate::error::{check_dim, Error, Result};
use crate::estimation::{argmax_ll, log_likelihood};
use crate::mdp::{occupancy, TabularMdp, TimePolicy, TransitionTable};
use crate::models::LowRankModelClass;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowRankFit {
    pub chosen_mu_index: usize,
    pub chosen_phi_index: usize,
    /// Position among the class's valid pairs.
    pub position: usize,
    pub table: TransitionTable,
    pub log_likelihood: f64,
}

/// `Σ N(s,a,s') ln μ(s')ᵀφ(s,a) − Σ N(s,a) ln Σ_{s'} μ(s')ᵀφ(s,a)`.
pub fn factored_log_likelihood(class: &LowRankModelClass, position: usize, counts: &[f64]) -> f64 {
    let table = &class.tables[position];
    let ns = class.num_states;
    let mut norm_term = 0.0;
    for (row_counts, row) in counts.chunks(ns).zip(table.as_flat().chunks(ns)) {
        let n: f64 = row_counts.iter().sum();
        if n > 0.0 {
            norm_term += n * row.iter().sum::<f64>().ln();
        }
    }
    log_likelihood(table, counts) - norm_term
}

/// Exhaustive scan over valid pairs, lexicographic `(μ, φ)` on ties.
pub fn mle_low_rank(class: &LowRankModelClass, dataset: &OfflineDataset) -> Result<LowRankFit> {
    if class.valid_pairs.is_empty() {
        return Err(Error::EmptyVersionSpace);
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("MLE needs at least one record"));
    }
    check_dim("dataset num_states", class.num_states, dataset.num_states())?;
    check_dim(
        "dataset num_actions",
        class.num_actions,
        dataset.num_actions(),
    )?;
    let counts = dataset.transition_counts();
    let position =
        argmax_ll((0..class.tables.len()).map(|i| factored_log_likelihood(class, i, &counts)))?;
    let (mu, phi) = class.valid_pairs[position];
    Ok(LowRankFit {
        chosen_mu_index: mu,
        chosen_phi_index: phi,
        position,
        table: class.tables[position].clone(),
        log_likelihood: factored_log_likelihood(class, position, &counts),
    })
}

/// Gap-bound ingredients under the true feature `φ*` plus the realized gap.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowRankReport {
    pub gap: f64,
    pub xi: f64,
    pub rel_cond_number: f64,
    #[serde(rename = "C_d0")]
    pub c_d0: f64,
    pub rank_sigma_rho: usize,
    pub min_pib: f64,
    pub stationary: Option<bool>,
    pub truth_in_space: bool,
    pub version_space_size: usize,
}

impl LowRankReport {
    /// `ξ^{1/2}|A|^{1/2}(H√C_{d0} + H²√(C̄ rank(Σ_ρ)/min π_b))`.
    pub fn rhs(&self, num_actions: usize, horizon: usize) -> f64 {
        let h = horizon as f64;
        self.xi.sqrt()
            * (num_actions as f64).sqrt()
            * (h * self.c_d0.sqrt()
                + h * h * (self.rel_cond_number * self.rank_sigma_rho as f64 / self.min_pib).sqrt())
    }
}

/// Smallest `π_b(a|s)` over every step, or the first zero entry as an error.
pub fn min_behavior_prob(behavior: &TimePolicy) -> Result<f64> {
    let (ns, na) = (behavior.num_states(), behavior.num_actions());
    for h in 0..behavior.horizon() {
        for s in 0..ns {
            for a in 0..na {
                if behavior.prob(h, s, a) <= 0.0 {
                    return Err(Error::ZeroBehaviorProbability {
                        state: s,
                        action: a,
                    });
                }
            }
        }
    }
    Ok(behavior.min_prob())
}

/// Runs the CPPO pipeline over the class's valid products and reports the
/// coverage ingredients computed with `φ*`. `rho` must be in behavior form.
#[allow(clippy::too_many_arguments)]
pub fn lowrank_gap_diagnostics(
    class: &LowRankModelClass,
    dataset: &OfflineDataset,
    xi: f64,
    iterations: usize,
    eta: f64,
    comparator: &TimePolicy,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
) -> Result<LowRankReport> {
    let behavior = rho.behavior().ok_or_else(|| {
        Error::Unsupported("low-rank diagnostics need a behavior-form offline distribution".into())
    })?;
    let min_pib = min_behavior_prob(behavior)?;
    let finite = class.as_finite_class();
    let run = cppo_pipeline(&finite, dataset, &mdp_true.task, xi, iterations, eta)?;
    let v_star = mdp_true.task.value(&mdp_true.transition, comparator)?;
    let v_hat = mdp_true
        .task
        .value(&mdp_true.transition, &run.result.policy)?;

    let features: Vec<Vec<f64>> = class
        .true_feature()
        .chunks(class.dim)
        .map(|c| c.to_vec())
        .collect();
    let d = occupancy(mdp_true, comparator)?;
    Ok(LowRankReport {
        gap: v_star - v_hat,
        xi,
        rel_cond_number: relative_condition_number(&features, &d.average, rho.table(), 0.0)?,
        c_d0: initial_dist_concentrability(&finite, mdp_true, rho)?,
        rank_sigma_rho: numerical_rank(&second_moment(&features, rho.table())?, 1e-9)?,
        min_pib,
        stationary: rho.is_stationary(),
        truth_in_space: run.truth_in_space,
        version_space_size: run.version_space.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_dataset, stationary_offline};
    use crate::models::make_low_rank_class;

    #[test]
    fn zero_behavior_entry_is_named() {
        let pi = TimePolicy::from_flat(2, 2, 1, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        assert_eq!(
            min_behavior_prob(&pi),
            Err(Error::ZeroBehaviorProbability {
                state: 1,
                action: 1
            })
        );
    }

    #[test]
    fn truth_only_class_has_zero_gap() {
        let full = make_low_rank_class(2, 4, 2, 2, 2, 2, 0).unwrap();
        let (j, i) = full.truth_pair;
        let class = LowRankModelClass::from_factors(
            4,
            2,
            2,
            vec![full.phi_set[i].clone()],
            vec![full.mu_set[j].clone()],
            (0, 0),
        )
        .unwrap();
        let task = crate::models::random_task(&mut crate::rng::stream(1, 2), 4, 2, 3);
        let mdp = TabularMdp::new(task, class.truth().clone()).unwrap();
        let rho = stationary_offline(&mdp.transition, &[0.5; 8], 3, 10_000).unwrap();
        let data = sample_dataset(&mdp, &rho, 200, 4).unwrap();
        let fit = mle_low_rank(&class, &data).unwrap();
        assert_eq!((fit.chosen_mu_index, fit.chosen_phi_index), (0, 0));
        let (star, _) = mdp.task.plan(&mdp.transition).unwrap();
        let r = lowrank_gap_diagnostics(&class, &data, 0.1, 300, 0.16, &star, &mdp, &rho).unwrap();
        assert!(r.gap.abs() < 0.05 * 3.0, "{}", r.gap);
        assert!(r.rank_sigma_rho <= 2);
    }
}
