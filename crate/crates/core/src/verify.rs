//! One-shot invariant suite at small scale. Failures are report content,
//! never errors.

use rand::Rng;
use serde::Serialize;

use crate::coverage::{
    bayesian_coverage, class_ratio_sup, concentrability, gaussian_l1_bound_check,
    refined_concentrability, relative_condition_number,
};
use crate::cppo::{cppo_optimize, pessimistic_value};
use crate::data::{empirical_l1sq, sample_dataset, sample_knr_dataset, OfflineDistribution};
use crate::error::Result;
use crate::estimation::{build_version_space, mle_finite, ridge_mle_knr};
use crate::lowrank::mle_low_rank;
use crate::mdp::{
    npg_step, occupancy, performance_difference, simulation_gap_bound, TabularMdp, TimePolicy,
    TransitionTable, ValueTriple,
};
use crate::models::{
    knr_one_hot_embedding, make_finite_class, make_low_rank_class, make_navigation_knr,
    make_partial_coverage_instance, make_trap_class, random_policy, random_task, random_transition,
    FiniteModelClass,
};
use crate::oracle::{brute_force_max_min, deterministic_policies, trajectory_value};
use crate::pspo::{posterior_update, posterior_update_knr, ModelPrior};
use crate::rng::{derive_seed, stream, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Distance from the failure threshold; positive when passing.
    pub slack: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}::{} slack={:.3e} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.module,
                c.name,
                c.slack,
                c.detail
            ));
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!(
            "{passed}/{} invariants passed\n",
            self.checks.len()
        ));
        out
    }
}

/// `(passed, slack, detail)`.
type Outcome = (bool, f64, String);

/// Within-tolerance outcome: slack is `tol − worst`.
fn within(worst: f64, tol: f64) -> Outcome {
    (
        worst <= tol,
        tol - worst,
        format!("worst {worst:.3e} vs tol {tol:.0e}"),
    )
}

fn random_mdp(rng: &mut StreamRng, ns: usize, na: usize, h: usize) -> TabularMdp {
    let task = random_task(rng, ns, na, h);
    TabularMdp::new(task, random_transition(rng, ns, na, 1.0)).expect("matching dims")
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn run(
        &mut self,
        module: &'static str,
        name: &'static str,
        f: impl FnOnce() -> Result<Outcome>,
    ) {
        let (passed, slack, detail) = match f() {
            Ok(o) => o,
            Err(e) => (false, f64::NAN, format!("error: {e}")),
        };
        self.checks.push(Check {
            module,
            name,
            passed,
            slack,
            detail,
        });
    }
}

/// Executes every module's invariant suite with streams derived from `seed`.
pub fn verify_all(seed: u64) -> VerifyReport {
    let mut suite = Suite { checks: Vec::new() };
    let rng_for = |tag: u64| stream(seed, 0x7e51 + tag);

    // ---- mdp
    suite.run("mdp", "rows_normalized", || {
        let mut rng = rng_for(0);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let p = random_transition(&mut rng, 5, 3, 0.5);
            for s in 0..5 {
                for a in 0..3 {
                    worst = worst.max((p.row(s, a).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
        Ok(within(worst, 1e-10))
    });
    suite.run("mdp", "corrupted_row_detected", || {
        let mut flat = TransitionTable::uniform(3, 2).as_flat().to_vec();
        // row (s=1, a=0)
        flat[2 * 3] += 0.05;
        match TransitionTable::from_flat(3, 2, flat) {
            Ok(_) => Ok((false, -1.0, "corrupted table accepted".into())),
            Err(e) => {
                let msg = e.to_string();
                Ok((msg.contains("s=1,a=0"), 0.0, msg))
            }
        }
    });
    suite.run("mdp", "evaluate_matches_enumeration", || {
        let mut rng = rng_for(1);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let mdp = random_mdp(&mut rng, 3, 2, 3);
            let pi = random_policy(&mut rng, 3, 2, 3);
            worst = worst
                .max((mdp.task.value(&mdp.transition, &pi)? - trajectory_value(&mdp, &pi)).abs());
        }
        Ok(within(worst, 1e-12))
    });
    suite.run("mdp", "occupancy_normalized", || {
        let mut rng = rng_for(2);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let mdp = random_mdp(&mut rng, 4, 3, 4);
            let d = occupancy(&mdp, &random_policy(&mut rng, 4, 3, 4))?;
            for h in 0..4 {
                worst = worst.max((d.step(h).iter().sum::<f64>() - 1.0).abs());
            }
            worst = worst.max((d.average.iter().sum::<f64>() - 1.0).abs());
        }
        Ok(within(worst, 1e-12))
    });
    suite.run("mdp", "value_bounds_and_zero_mean_advantage", || {
        let mut rng = rng_for(3);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let mdp = random_mdp(&mut rng, 4, 3, 5);
            let pi = random_policy(&mut rng, 4, 3, 5);
            let vt = mdp.task.evaluate(&mdp.transition, &pi)?;
            for h in 0..5 {
                for s in 0..4 {
                    let v = vt.v(h, s);
                    worst = worst.max(-v).max(v - (5 - h) as f64);
                    let m: f64 = (0..3)
                        .map(|a| pi.prob(h, s, a) * vt.advantage(h, s, a))
                        .sum();
                    worst = worst.max(m.abs());
                }
            }
        }
        Ok(within(worst, 1e-12))
    });
    suite.run("mdp", "performance_difference_identity", || {
        let mut rng = rng_for(4);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let mdp = random_mdp(&mut rng, 4, 3, 4);
            let a = random_policy(&mut rng, 4, 3, 4);
            let b = random_policy(&mut rng, 4, 3, 4);
            let (lhs, rhs) = performance_difference(&mdp, &a, &b)?;
            worst = worst.max((lhs - rhs).abs());
        }
        Ok(within(worst, 1e-9))
    });
    suite.run("mdp", "simulation_lemma", || {
        let mut rng = rng_for(5);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..1000 {
            let mdp = random_mdp(&mut rng, 3, 2, 3);
            let alt = mdp
                .task
                .with_transition(random_transition(&mut rng, 3, 2, 1.0))?;
            let (gap, bound) = simulation_gap_bound(&mdp, &alt, &random_policy(&mut rng, 3, 2, 3))?;
            worst = worst.max(gap - bound);
        }
        Ok(within(worst, 1e-12))
    });
    suite.run("mdp", "plan_matches_exhaustive_search", || {
        let mut rng = rng_for(6);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let mdp = random_mdp(&mut rng, 2, 2, 3);
            let (pi, v) = mdp.task.plan(&mdp.transition)?;
            let best = deterministic_policies(2, 2, 3)
                .iter()
                .map(|p| trajectory_value(&mdp, p))
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst
                .max((v - best).abs())
                .max((mdp.task.value(&mdp.transition, &pi)? - v).abs());
            for _ in 0..20 {
                worst = worst.max(
                    mdp.task
                        .value(&mdp.transition, &random_policy(&mut rng, 2, 2, 3))?
                        - v,
                );
            }
        }
        Ok(within(worst, 1e-12))
    });
    suite.run("mdp", "npg_shift_invariance_and_simplex", || {
        let mut rng = rng_for(7);
        let mut worst: f64 = 0.0;
        let (ns, na, h) = (3, 3, 4);
        for _ in 0..50 {
            let pi = random_policy(&mut rng, ns, na, h);
            let adv: Vec<f64> = (0..h * ns * na)
                .map(|_| rng.random_range(-4.0..4.0))
                .collect();
            let mut shifted = adv.clone();
            for row in shifted.chunks_mut(na) {
                let c = rng.random_range(-10.0..10.0);
                row.iter_mut().for_each(|x| *x += c);
            }
            let eta = 0.1;
            let a = npg_step(&pi, &ValueTriple::from_advantage(ns, na, h, adv)?, eta)?;
            let b = npg_step(&pi, &ValueTriple::from_advantage(ns, na, h, shifted)?, eta)?;
            for (x, y) in a.as_flat().iter().zip(b.as_flat()) {
                worst = worst.max((x - y).abs());
            }
            for row in a.as_flat().chunks(na) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                worst = worst.max(-row.iter().cloned().fold(f64::INFINITY, f64::min));
            }
        }
        Ok(within(worst, 1e-12))
    });

    // ---- models
    suite.run("models", "partial_coverage_contract", || {
        let inst = make_partial_coverage_instance(seed, 6, 3, 3)?;
        let c = concentrability(&inst.comparator, &inst.mdp, &inst.rho)?;
        let trap_mass: f64 = (0..inst.num_decision)
            .map(|s| inst.rho.at(s, inst.trap_action))
            .sum();
        let class = make_trap_class(&inst, 0.3, 0.05)?;
        let ok = c.is_finite() && trap_mass == 0.0 && class.truth() == &inst.mdp.transition;
        Ok((
            ok,
            c,
            format!("C = {c:.3}, trap mass {trap_mass}, |M| = {}", class.len()),
        ))
    });
    suite.run("models", "low_rank_class_rows_valid", || {
        let lr = make_low_rank_class(seed, 5, 2, 2, 3, 3, 2)?;
        let pos = lr.truth_position();
        let ok = !lr.tables.is_empty() && lr.valid_pairs[pos] == lr.truth_pair;
        Ok((
            ok,
            lr.tables.len() as f64,
            format!("{} valid products", lr.tables.len()),
        ))
    });

    // ---- data
    suite.run("data", "sampling_reproducible", || {
        let mut rng = rng_for(8);
        let mdp = random_mdp(&mut rng, 4, 2, 3);
        let rho = OfflineDistribution::uniform(4, 2);
        let a = sample_dataset(&mdp, &rho, 500, 9)?;
        let b = sample_dataset(&mdp, &rho, 500, 9)?;
        let c = sample_dataset(&mdp, &rho, 500, 10)?;
        Ok((
            a == b && a != c,
            0.0,
            "same seed equal, new seed differs".into(),
        ))
    });
    suite.run("data", "l1sq_symmetry_and_triangle", || {
        let mut rng = rng_for(9);
        let mdp = random_mdp(&mut rng, 4, 2, 3);
        let data = sample_dataset(&mdp, &OfflineDistribution::uniform(4, 2), 200, 3)?;
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..50 {
            let (p, q, r) = (
                random_transition(&mut rng, 4, 2, 1.0),
                random_transition(&mut rng, 4, 2, 1.0),
                random_transition(&mut rng, 4, 2, 1.0),
            );
            let (pq, qp) = (
                empirical_l1sq(&data, &p, &q)?,
                empirical_l1sq(&data, &q, &p)?,
            );
            worst = worst.max((pq - qp).abs());
            // √ of the empirical squared ℓ1 is a seminorm distance
            let tri = pq.sqrt()
                - (empirical_l1sq(&data, &p, &r)?.sqrt() + empirical_l1sq(&data, &r, &q)?.sqrt());
            worst = worst.max(tri);
        }
        Ok(within(worst, 1e-12))
    });

    // ---- estimation
    let finite = || -> Result<(FiniteModelClass, TabularMdp, OfflineDistribution)> {
        let class = make_finite_class(seed, 4, 2, 8, 0.5)?;
        let mut rng = rng_for(10);
        let task = random_task(&mut rng, 4, 2, 3);
        let mdp = TabularMdp::new(task, class.truth().clone())?;
        Ok((class, mdp, OfflineDistribution::uniform(4, 2)))
    };
    suite.run("estimation", "version_space_monotone_in_xi", || {
        let (class, mdp, rho) = finite()?;
        let data = sample_dataset(&mdp, &rho, 300, 4)?;
        let mle = mle_finite(&class, &data)?;
        let mut prev: Vec<usize> = Vec::new();
        let mut ok = true;
        for xi in [0.0, 0.01, 0.05, 0.2, 1.0, 4.0] {
            let vs = build_version_space(&class, mle, &data, xi)?;
            ok &= prev.iter().all(|i| vs.contains(*i)) && vs.contains(mle);
            prev = vs.member_indices.clone();
        }
        Ok((ok, 0.0, format!("final size {}", prev.len())))
    });
    suite.run("estimation", "ridge_normal_equations", || {
        let sc = make_navigation_knr(5, 0.5, 0.1, 4, 2.0)?;
        let data = sample_knr_dataset(&sc, 300, 5);
        let lambda = 0.7;
        let (w, sigma) = ridge_mle_knr(&data, &sc.model.feature, lambda)?;
        let d = sc.model.feature.dim;
        let mut cross = nalgebra::DMatrix::zeros(1, d);
        for t in &data.records {
            let phi = sc.model.feature.phi(&t.s, t.a);
            for i in 0..d {
                cross[(0, i)] += t.sp[0] * phi[i];
            }
        }
        let resid = &w * (&sigma + nalgebra::DMatrix::identity(d, d) * lambda) - cross;
        Ok(within(resid.abs().max(), 1e-8))
    });

    // ---- cppo
    suite.run("cppo", "pessimism_when_truth_captured", || {
        let (class, mdp, rho) = finite()?;
        let mut rng = rng_for(11);
        let mut worst = f64::NEG_INFINITY;
        for k in 0..10 {
            let data = sample_dataset(&mdp, &rho, 200, derive_seed(seed, k))?;
            let vs = build_version_space(&class, mle_finite(&class, &data)?, &data, 10.0)?;
            if !vs.contains(class.truth_index) {
                continue;
            }
            for _ in 0..20 {
                let pi = random_policy(&mut rng, 4, 2, 3);
                let (lo, _) = pessimistic_value(&class, &vs.member_indices, &mdp.task, &pi)?;
                worst = worst.max(lo - mdp.task.value(&mdp.transition, &pi)?);
            }
        }
        Ok(within(worst, 0.0))
    });
    suite.run("cppo", "best_iterate_not_below_uniform", || {
        let (class, mdp, _) = finite()?;
        let members: Vec<usize> = (0..class.len()).collect();
        let res = cppo_optimize(&class, &members, &mdp.task, 50, 0.15)?;
        let (v0, _) =
            pessimistic_value(&class, &members, &mdp.task, &TimePolicy::uniform(4, 2, 3))?;
        let slack = res.pessimistic_value - v0;
        Ok((
            slack >= 0.0,
            slack,
            format!("{:.6} vs uniform {v0:.6}", res.pessimistic_value),
        ))
    });
    suite.run("cppo", "matches_brute_force_when_deterministic", || {
        let mut rng = rng_for(12);
        let task = random_task(&mut rng, 2, 2, 2);
        // single-member version space: max-min is plain planning
        let class = FiniteModelClass::new(vec![random_transition(&mut rng, 2, 2, 1.0)], 0)?;
        let res = cppo_optimize(&class, &[0], &task, 2000, 0.2)?;
        let (bf, _) = brute_force_max_min(&class, &[0], &task)?;
        Ok(within((res.pessimistic_value - bf).abs(), 1e-6))
    });

    // ---- pspo
    suite.run("pspo", "dirichlet_order_invariance", || {
        let mut rng = rng_for(13);
        let mdp = random_mdp(&mut rng, 3, 2, 3);
        let data = sample_dataset(&mdp, &OfflineDistribution::uniform(3, 2), 300, 6)?;
        let mut rev = data.clone();
        rev.records.reverse();
        let prior = ModelPrior::symmetric_dirichlet(3, 2, 0.5)?;
        let (a, b) = (
            posterior_update(&prior, &data)?,
            posterior_update(&prior, &rev)?,
        );
        let worst = match (&a.belief, &b.belief) {
            (ModelPrior::Dirichlet { alpha: x, .. }, ModelPrior::Dirichlet { alpha: y, .. }) => x
                .iter()
                .zip(y)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max),
            _ => f64::INFINITY,
        };
        Ok(within(worst, 1e-10))
    });
    suite.run("pspo", "discrete_posterior_matches_bayes_rule", || {
        let (class, mdp, rho) = finite()?;
        let data = sample_dataset(&mdp, &rho, 40, 7)?;
        let w0: Vec<f64> = (1..=class.len()).map(|i| i as f64).collect();
        let z: f64 = w0.iter().sum();
        let w0: Vec<f64> = w0.iter().map(|w| w / z).collect();
        let post = posterior_update(&ModelPrior::discrete(class.clone(), w0.clone())?, &data)?;
        // direct product of per-record likelihoods
        let mut direct: Vec<f64> = class
            .models
            .iter()
            .zip(&w0)
            .map(|(m, w)| {
                data.records
                    .iter()
                    .map(|t| m.prob(t.s, t.a, t.sp))
                    .product::<f64>()
                    * w
            })
            .collect();
        let z: f64 = direct.iter().sum();
        direct.iter_mut().for_each(|x| *x /= z);
        let worst = match &post.belief {
            ModelPrior::Discrete { weights, .. } => weights
                .iter()
                .zip(&direct)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
            _ => f64::INFINITY,
        };
        Ok(within(worst, 1e-10))
    });
    suite.run("pspo", "matrix_normal_order_invariance", || {
        let sc = make_navigation_knr(5, 0.5, 0.2, 4, 2.0)?;
        let data = sample_knr_dataset(&sc, 200, 8);
        let mut rev = data.clone();
        rev.records.reverse();
        let d = sc.model.feature.dim;
        let prior = ModelPrior::matrix_normal(
            nalgebra::DMatrix::zeros(1, d),
            1.0,
            0.2,
            sc.model.feature.clone(),
        )?;
        let (a, b) = (
            posterior_update_knr(&prior, &data)?,
            posterior_update_knr(&prior, &rev)?,
        );
        let worst = match (&a.belief, &b.belief) {
            (
                ModelPrior::MatrixNormal {
                    mean: m1,
                    precision: p1,
                    ..
                },
                ModelPrior::MatrixNormal {
                    mean: m2,
                    precision: p2,
                    ..
                },
            ) => (m1 - m2)
                .abs()
                .max()
                .max((p1 - p2).abs().max() / p1.abs().max()),
            _ => f64::INFINITY,
        };
        Ok(within(worst, 1e-10))
    });

    // ---- coverage
    suite.run("coverage", "refined_below_density_ratio", || {
        let mut worst = f64::NEG_INFINITY;
        for k in 0..30 {
            let s = derive_seed(seed, 100 + k);
            let class = make_finite_class(s, 3, 2, 6, 0.6)?;
            let mut rng = stream(s, 9);
            let task = random_task(&mut rng, 3, 2, 3);
            let mdp = TabularMdp::new(task, class.truth().clone())?;
            let rho = OfflineDistribution::from_table(
                3,
                2,
                crate::models::normalized_exact(crate::rng::dirichlet(&mut rng, &[1.0; 6])),
            )?;
            let pi = random_policy(&mut rng, 3, 2, 3);
            let c = concentrability(&pi, &mdp, &rho)?;
            let cd = refined_concentrability(&class, &pi, &mdp, &rho)?;
            worst = worst.max(cd - c * (1.0 + 1e-12));
        }
        Ok(within(worst, 0.0))
    });
    suite.run(
        "coverage",
        "one_hot_condition_number_is_density_ratio",
        || {
            let mut rng = rng_for(14);
            let mdp = random_mdp(&mut rng, 4, 2, 3);
            let pi = random_policy(&mut rng, 4, 2, 3);
            let rho = OfflineDistribution::from_table(
                4,
                2,
                crate::models::normalized_exact(crate::rng::dirichlet(&mut rng, &[1.0; 8])),
            )?;
            let d = occupancy(&mdp, &pi)?;
            let feats = knr_one_hot_embedding(4, 2).table;
            let cbar = relative_condition_number(&feats, &d.average, rho.table(), 0.0)?;
            let c = concentrability(&pi, &mdp, &rho)?;
            Ok(within((cbar - c).abs() / c, 1e-9))
        },
    );
    suite.run("coverage", "class_ratio_skips_zero_over_zero", || {
        let t = TransitionTable::uniform(2, 2);
        let class = FiniteModelClass::new(vec![t.clone(), t.clone()], 0)?;
        let v = class_ratio_sup(&class, &t, &[0.25; 4], &[0.25; 4]);
        Ok((v == 0.0, 0.0, format!("sup = {v}")))
    });
    suite.run("coverage", "degenerate_bayes_equals_frequentist", || {
        let (class, mdp, _) = finite()?;
        let rho = OfflineDistribution::from_table(
            4,
            2,
            crate::models::normalized_exact(crate::rng::dirichlet(&mut rng_for(15), &[1.0; 8])),
        )?;
        let bayes = bayesian_coverage(
            &ModelPrior::degenerate(class.clone()),
            &mdp.task,
            &rho,
            10,
            3,
        )?;
        let (star, _) = mdp.task.plan(&mdp.transition)?;
        let c = concentrability(&star, &mdp, &rho)?;
        let cd = refined_concentrability(&class, &star, &mdp, &rho)?;
        let ok = bayes.c_bayes == c && bayes.c_dagger_bayes == cd;
        Ok((
            ok,
            0.0,
            format!(
                "C {} vs {c}, C† {} vs {cd}",
                bayes.c_bayes, bayes.c_dagger_bayes
            ),
        ))
    });
    suite.run("coverage", "gaussian_l1_bound", || {
        let mut worst = f64::NEG_INFINITY;
        for zeta in [0.1, 1.0, 10.0] {
            for delta in [0.0, 0.3, 1.0, 2.5] {
                let (l1, bound) = gaussian_l1_bound_check(&[0.0], &[delta * zeta], zeta)?;
                worst = worst.max(l1 - bound);
            }
        }
        Ok(within(worst, 1e-6))
    });

    // ---- lowrank
    suite.run("lowrank", "mle_prefers_truth_with_data", || {
        let lr = make_low_rank_class(seed, 5, 2, 2, 3, 3, 0)?;
        let mut rng = rng_for(16);
        let task = random_task(&mut rng, 5, 2, 3);
        let mdp = TabularMdp::new(task, lr.truth().clone())?;
        let data = sample_dataset(&mdp, &OfflineDistribution::uniform(5, 2), 20_000, 11)?;
        let fit = mle_low_rank(&lr, &data)?;
        let d = crate::data::weighted_l1sq(&[0.1; 10], &fit.table, lr.truth());
        Ok((d < 0.05, 0.05 - d, format!("fit at distance {d:.3e}")))
    });

    VerifyReport {
        seed,
        checks: suite.checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let r = verify_all(0);
        assert!(r.checks.len() >= 20);
        assert!(r.all_passed(), "{}", r.to_text());
    }
}
