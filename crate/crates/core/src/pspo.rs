//! Posterior sampling policy optimization.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cppo::{check_eta, pessimistic_value};
use crate::data::{sample_dataset, std_normal, KnrDataset, OfflineDataset, OfflineDistribution};
use crate::error::{check_dim, param, Error, Result};
use crate::estimation::{log_likelihood, VersionSpace};
use crate::mdp::{npg_step, TabularMdp, Task, TimePolicy, TransitionTable};
use crate::models::{FiniteModelClass, KnrFeatureTable};
use crate::rng::{categorical, derive_seed, dirichlet, stream, StreamRng};
use crate::stats::{mean, std_error};

/// Prior (or posterior) over transition models.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelPrior {
    Discrete {
        class: FiniteModelClass,
        weights: Vec<f64>,
    },
    /// `alpha[(s*A + a)*S + s']`.
    Dirichlet {
        num_states: usize,
        num_actions: usize,
        alpha: Vec<f64>,
    },
    /// Rows of `W` independent, row `i ∼ N(mean_i, ζ² Λ⁻¹)`; `Λ` is the column precision.
    MatrixNormal {
        mean: DMatrix<f64>,
        precision: DMatrix<f64>,
        zeta: f64,
        feature: KnrFeatureTable,
    },
}

impl ModelPrior {
    pub fn discrete(class: FiniteModelClass, weights: Vec<f64>) -> Result<Self> {
        check_dim("prior weights", class.len(), weights.len())?;
        let z: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (z - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution {
                what: "prior weights".into(),
                detail: format!("sum {z}"),
            });
        }
        Ok(Self::Discrete { class, weights })
    }

    /// All mass on the class truth.
    pub fn degenerate(class: FiniteModelClass) -> Self {
        let mut weights = vec![0.0; class.len()];
        weights[class.truth_index] = 1.0;
        Self::Discrete { class, weights }
    }

    pub fn dirichlet(num_states: usize, num_actions: usize, alpha: Vec<f64>) -> Result<Self> {
        check_dim(
            "dirichlet alpha",
            num_states * num_actions * num_states,
            alpha.len(),
        )?;
        if alpha.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(param("alpha", "concentrations must be > 0"));
        }
        Ok(Self::Dirichlet {
            num_states,
            num_actions,
            alpha,
        })
    }

    pub fn symmetric_dirichlet(num_states: usize, num_actions: usize, alpha: f64) -> Result<Self> {
        Self::dirichlet(
            num_states,
            num_actions,
            vec![alpha; num_states * num_actions * num_states],
        )
    }

    /// `W₀` mean, column precision `λI`, row covariance `ζ²I`.
    pub fn matrix_normal(
        mean: DMatrix<f64>,
        lambda: f64,
        zeta: f64,
        feature: KnrFeatureTable,
    ) -> Result<Self> {
        if !(lambda > 0.0 && zeta > 0.0) {
            return Err(param("lambda", "lambda and zeta must be > 0"));
        }
        check_dim("prior mean columns", feature.dim, mean.ncols())?;
        let d = feature.dim;
        Ok(Self::MatrixNormal {
            mean,
            precision: DMatrix::identity(d, d) * lambda,
            zeta,
            feature,
        })
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelPrior::Discrete { .. } => "discrete",
            ModelPrior::Dirichlet { .. } => "dirichlet",
            ModelPrior::MatrixNormal { .. } => "matrix_normal",
        }
    }
}

/// Posterior with the dataset size it conditions on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPosterior {
    pub belief: ModelPrior,
    pub n: usize,
    pub dataset_seed: Option<u64>,
}

/// Conjugate / exact Bayesian update for tabular datasets.
pub fn posterior_update(prior: &ModelPrior, dataset: &OfflineDataset) -> Result<ModelPosterior> {
    let belief = match prior {
        ModelPrior::Discrete { class, weights } => {
            check_dim(
                "dataset num_states",
                class.num_states(),
                dataset.num_states(),
            )?;
            check_dim(
                "dataset num_actions",
                class.num_actions(),
                dataset.num_actions(),
            )?;
            let counts = dataset.transition_counts();
            let logw: Vec<f64> = class
                .models
                .iter()
                .zip(weights)
                .map(|(m, &w)| {
                    if w > 0.0 {
                        w.ln() + log_likelihood(m, &counts)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                return Err(Error::InconsistentClass);
            }
            let mut w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= z);
            ModelPrior::Discrete {
                class: class.clone(),
                weights: w,
            }
        }
        ModelPrior::Dirichlet {
            num_states,
            num_actions,
            alpha,
        } => {
            check_dim("dataset num_states", *num_states, dataset.num_states())?;
            check_dim("dataset num_actions", *num_actions, dataset.num_actions())?;
            let counts = dataset.transition_counts();
            ModelPrior::Dirichlet {
                num_states: *num_states,
                num_actions: *num_actions,
                alpha: alpha.iter().zip(&counts).map(|(a, c)| a + c).collect(),
            }
        }
        ModelPrior::MatrixNormal { .. } => {
            return Err(Error::Unsupported(
                "matrix-normal priors update from KNR datasets".into(),
            ))
        }
    };
    Ok(ModelPosterior {
        belief,
        n: dataset.n(),
        dataset_seed: Some(dataset.provenance.seed),
    })
}

/// Gaussian update per output coordinate: `Λ ← Λ + Σφφᵀ`,
/// `mean ← (mean·Λ₀ + Σ s'φᵀ) Λ⁻¹`.
pub fn posterior_update_knr(prior: &ModelPrior, dataset: &KnrDataset) -> Result<ModelPosterior> {
    let ModelPrior::MatrixNormal {
        mean,
        precision,
        zeta,
        feature,
    } = prior
    else {
        return Err(Error::Unsupported(
            "KNR datasets need a matrix-normal prior".into(),
        ));
    };
    let d = feature.dim;
    let mut lam = precision.clone();
    let mut cross = mean * precision;
    for t in &dataset.records {
        check_dim("next-state dim", mean.nrows(), t.sp.len())?;
        let phi = DMatrix::from_row_slice(d, 1, feature.phi(&t.s, t.a));
        lam += &phi * phi.transpose();
        cross += DMatrix::from_row_slice(t.sp.len(), 1, &t.sp) * phi.transpose();
    }
    let chol = lam.clone().cholesky().ok_or(Error::NotPsd(0.0))?;
    let new_mean = chol.solve(&cross.transpose()).transpose();
    Ok(ModelPosterior {
        belief: ModelPrior::MatrixNormal {
            mean: new_mean,
            precision: lam,
            zeta: *zeta,
            feature: feature.clone(),
        },
        n: dataset.n(),
        dataset_seed: Some(dataset.provenance.seed),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampledModel {
    Member(usize),
    Table(TransitionTable),
    Knr(DMatrix<f64>),
}

impl SampledModel {
    pub fn id(&self) -> Option<usize> {
        match self {
            SampledModel::Member(i) => Some(*i),
            _ => None,
        }
    }
}

/// Row-wise sampler, precomputed once per posterior.
pub struct PosteriorSampler<'a> {
    posterior: &'a ModelPosterior,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> PosteriorSampler<'a> {
    pub fn new(posterior: &'a ModelPosterior) -> Result<Self> {
        let chol = match &posterior.belief {
            ModelPrior::MatrixNormal { precision, .. } => {
                Some(precision.clone().cholesky().ok_or(Error::NotPsd(0.0))?)
            }
            _ => None,
        };
        Ok(Self { posterior, chol })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampledModel {
        match &self.posterior.belief {
            ModelPrior::Discrete { weights, .. } => SampledModel::Member(categorical(rng, weights)),
            ModelPrior::Dirichlet {
                num_states,
                num_actions,
                alpha,
            } => {
                let mut flat = Vec::with_capacity(alpha.len());
                for row in alpha.chunks(*num_states) {
                    flat.extend(crate::models::normalized_exact(dirichlet(rng, row)));
                }
                SampledModel::Table(
                    TransitionTable::from_flat_tol(*num_states, *num_actions, flat, 1e-12)
                        .expect("dirichlet rows are distributions"),
                )
            }
            ModelPrior::MatrixNormal { mean, zeta, .. } => {
                // x = L⁻ᵀ z has covariance Λ⁻¹ when Λ = L Lᵀ
                let chol = self.chol.as_ref().expect("built in new");
                let (ds, d) = mean.shape();
                let z = DMatrix::from_fn(d, ds, |_, _| std_normal(rng));
                let x = chol
                    .l()
                    .transpose()
                    .solve_upper_triangular(&z)
                    .expect("triangular");
                SampledModel::Knr(mean + x.transpose() * *zeta)
            }
        }
    }
}

/// One fresh draw seeded by `seed`.
pub fn posterior_sample(posterior: &ModelPosterior, seed: u64) -> Result<SampledModel> {
    let sampler = PosteriorSampler::new(posterior)?;
    Ok(sampler.sample(&mut stream(seed, 0x5a3)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PspoResult {
    /// `π_0 … π_T`.
    pub policies: Vec<TimePolicy>,
    /// Sampled class index per iteration (discrete posteriors only).
    pub sampled_models: Vec<Option<usize>>,
    /// `V^{π_t}_{P*}` when the harness supplies the truth.
    pub values_under_truth: Option<Vec<f64>>,
    pub eta: f64,
    pub iterations: usize,
}

impl PspoResult {
    pub fn final_policy(&self) -> &TimePolicy {
        self.policies.last().expect("pi_0 always present")
    }

    /// Best iterate under the truth; harness-only.
    pub fn best_value_under_truth(&self) -> Option<f64> {
        self.values_under_truth
            .as_ref()
            .map(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    /// `iteration,sampled_model_id,value_under_truth` rows; row `t` is `π_t`
    /// and the model sampled to produce `π_{t+1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,sampled_model_id,value_under_truth\n");
        for t in 0..self.policies.len() {
            let id = match self.sampled_models.get(t) {
                Some(Some(i)) => i.to_string(),
                Some(None) => format!("draw{t}"),
                None => String::new(),
            };
            let v = self
                .values_under_truth
                .as_ref()
                .map(|v| format!("{:.12}", v[t]))
                .unwrap_or_default();
            out.push_str(&format!("{t},{id},{v}\n"));
        }
        out
    }
}

/// Iteration `t` draws from `stream(seed, t)`, so runs with the same seed
/// share their prefix across `T`.
pub fn pspo_run(
    posterior: &ModelPosterior,
    task: &Task,
    iterations: usize,
    eta: f64,
    seed: u64,
    truth: Option<&TransitionTable>,
) -> Result<PspoResult> {
    check_eta(eta, task.horizon())?;
    if matches!(posterior.belief, ModelPrior::MatrixNormal { .. }) {
        return Err(Error::Unsupported(
            "tabular PS-PO needs a discrete or Dirichlet posterior; use knr_pspo".into(),
        ));
    }
    let sampler = PosteriorSampler::new(posterior)?;
    let mut pi = TimePolicy::uniform(task.num_states(), task.num_actions(), task.horizon());
    let mut policies = Vec::with_capacity(iterations + 1);
    let mut sampled_models = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let mut rng: StreamRng = stream(seed, t as u64);
        let model = sampler.sample(&mut rng);
        let vt = match (&model, &posterior.belief) {
            (SampledModel::Member(i), ModelPrior::Discrete { class, .. }) => {
                task.evaluate(&class.models[*i], &pi)?
            }
            (SampledModel::Table(p), _) => task.evaluate(p, &pi)?,
            _ => unreachable!("family checked above"),
        };
        sampled_models.push(model.id());
        let next = npg_step(&pi, &vt, eta)?;
        policies.push(std::mem::replace(&mut pi, next));
    }
    policies.push(pi);
    let values_under_truth = truth
        .map(|p| {
            policies
                .iter()
                .map(|pi| task.value(p, pi))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(PspoResult {
        policies,
        sampled_models,
        values_under_truth,
        eta,
        iterations,
    })
}

/// `V^{π*}_{P*} − min_{P ∈ M_D} V^{π*}_P`.
pub fn lcb_gap_term(
    class: &FiniteModelClass,
    version_space: &VersionSpace,
    comparator: &TimePolicy,
    mdp_true: &TabularMdp,
) -> Result<f64> {
    let truth = mdp_true.task.value(&mdp_true.transition, comparator)?;
    let (lcb, _) = pessimistic_value(
        class,
        &version_space.member_indices,
        &mdp_true.task,
        comparator,
    )?;
    Ok(truth - lcb)
}

/// Rectangular ℓ1 radius per pair: `√(2(|S| ln 2 + ln(|S||A|/δ))/N)`, capped at
/// 2; unvisited pairs get 2 (the whole simplex).
pub fn l1_radii(dataset: &OfflineDataset, delta: f64) -> Vec<f64> {
    let (ns, na) = (dataset.num_states() as f64, dataset.num_actions() as f64);
    let log_term = ns * 2f64.ln() + (ns * na / delta).ln();
    dataset
        .pair_counts()
        .iter()
        .map(|&n| {
            if n == 0.0 {
                2.0
            } else {
                (2.0 * log_term / n).sqrt().min(2.0)
            }
        })
        .collect()
}

/// `min_{P: ‖P(·|s,a) − P̂(·|s,a)‖₁ ≤ r(s,a)} V^π_P` by robust backward induction.
pub fn robust_l1_value(
    task: &Task,
    p_hat: &TransitionTable,
    radii: &[f64],
    policy: &TimePolicy,
) -> Result<f64> {
    let (ns, na, hz) = (task.num_states(), task.num_actions(), task.horizon());
    check_dim("radii", ns * na, radii.len())?;
    let mut v_next = vec![0.0f64; ns];
    let mut order: Vec<usize> = (0..ns).collect();
    for h in (0..hz).rev() {
        order.sort_by(|&x, &y| v_next[x].total_cmp(&v_next[y]));
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = policy.prob(h, s, a);
                if w == 0.0 {
                    continue;
                }
                let worst =
                    worst_case_expectation(p_hat.row(s, a), &v_next, &order, radii[s * na + a]);
                v[s] += w * (task.reward(s, a) + worst);
            }
        }
        v_next = v;
    }
    Ok(task
        .initial_dist()
        .iter()
        .zip(&v_next)
        .map(|(d, v)| d * v)
        .sum())
}

/// Moves up to `r/2` mass from the highest-value states onto the lowest one.
fn worst_case_expectation(p: &[f64], v: &[f64], order: &[usize], r: f64) -> f64 {
    let mut q = p.to_vec();
    let lowest = order[0];
    let mut budget = (r / 2.0).min(1.0 - q[lowest]);
    q[lowest] += budget;
    for &s in order.iter().rev() {
        if budget <= 0.0 || s == lowest {
            break;
        }
        let take = q[s].min(budget);
        q[s] -= take;
        budget -= take;
    }
    q.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BayesTrial {
    pub trial: usize,
    pub gap: f64,
    /// `V^{π(P*)}_{P*} − L(π(P*); D)` under the rectangular ℓ1 LCB.
    pub s1: f64,
    pub concentrability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BayesGapReport {
    pub n: usize,
    pub iterations: usize,
    pub mean_gap: f64,
    pub se_gap: f64,
    pub mean_s1: f64,
    /// `4H²√(ln|A|/T)`.
    pub s2: f64,
    pub delta: f64,
    pub mean_concentrability: f64,
    pub trials: Vec<BayesTrial>,
}

/// Outer loop over `P* ∼ prior`; trial `k` uses `derive_seed(seed, k)` for
/// the truth, the data and the algorithm. `δ = 1/n` in the LCB.
#[allow(clippy::too_many_arguments)]
pub fn bayesian_gap_estimate(
    prior: &ModelPrior,
    task: &Task,
    rho: &OfflineDistribution,
    n: usize,
    iterations: usize,
    eta: f64,
    num_trials: usize,
    seed: u64,
) -> Result<BayesGapReport> {
    if num_trials < 10 {
        return Err(param(
            "trials",
            format!("need at least 10, got {num_trials}"),
        ));
    }
    check_eta(eta, task.horizon())?;
    let delta = 1.0 / (n.max(2)) as f64;
    let trials = (0..num_trials)
        .into_par_iter()
        .map(|k| -> Result<BayesTrial> {
            let ts = derive_seed(seed, k as u64);
            let truth = match PosteriorSampler::new(&ModelPosterior {
                belief: prior.clone(),
                n: 0,
                dataset_seed: None,
            })?
            .sample(&mut stream(ts, 1))
            {
                SampledModel::Member(i) => match prior {
                    ModelPrior::Discrete { class, .. } => class.models[i].clone(),
                    _ => unreachable!(),
                },
                SampledModel::Table(p) => p,
                SampledModel::Knr(_) => {
                    return Err(Error::Unsupported(
                        "Bayesian gap needs a tabular prior".into(),
                    ))
                }
            };
            let mdp = TabularMdp::new(task.clone(), truth)?;
            let data = sample_dataset(&mdp, rho, n, derive_seed(ts, 2))?;
            let post = posterior_update(prior, &data)?;
            let run = pspo_run(
                &post,
                task,
                iterations,
                eta,
                derive_seed(ts, 3),
                Some(&mdp.transition),
            )?;
            let (star, v_star) = task.plan(&mdp.transition)?;
            let gap = v_star - run.best_value_under_truth().expect("truth supplied");
            let p_hat =
                crate::estimation::mle_tabular(&data, task.num_states(), task.num_actions())?;
            let lcb = if n == 0 {
                0.0
            } else {
                robust_l1_value(task, &p_hat, &l1_radii(&data, delta), &star)?
            };
            let c = crate::coverage::concentrability(&star, &mdp, rho)?;
            Ok(BayesTrial {
                trial: k,
                gap,
                s1: v_star - lcb,
                concentrability: c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = trials.iter().map(|t| t.gap).collect();
    let s1: Vec<f64> = trials.iter().map(|t| t.s1).collect();
    let cs: Vec<f64> = trials.iter().map(|t| t.concentrability).collect();
    let h = task.horizon() as f64;
    Ok(BayesGapReport {
        n,
        iterations,
        mean_gap: mean(&gaps),
        se_gap: std_error(&gaps),
        mean_s1: mean(&s1),
        s2: if iterations == 0 {
            f64::INFINITY
        } else {
            4.0 * h * h * ((task.num_actions() as f64).ln() / iterations as f64).sqrt()
        },
        delta,
        mean_concentrability: mean(&cs),
        trials,
    })
}

/// Exponential weights over the scenario's candidate policies, driven by
/// Monte Carlo values under posterior draws `W_t`. Returns the weight
/// trajectory (`T + 1` rows).
pub fn knr_pspo(
    posterior: &ModelPosterior,
    scenario: &crate::models::KnrScenario,
    iterations: usize,
    eta: f64,
    rollouts: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    check_eta(eta, scenario.horizon)?;
    let sampler = PosteriorSampler::new(posterior)?;
    let k = scenario.candidate_policies.len();
    let mut w = vec![1.0 / k as f64; k];
    let mut out = vec![w.clone()];
    for t in 0..iterations {
        let SampledModel::Knr(wt) = sampler.sample(&mut stream(seed, t as u64)) else {
            return Err(Error::Unsupported(
                "knr_pspo needs a matrix-normal posterior".into(),
            ));
        };
        let vals: Vec<f64> = (0..k)
            .map(|p| {
                crate::cppo::knr_rollout_value(
                    scenario,
                    p,
                    &wt,
                    rollouts,
                    derive_seed(seed, t as u64),
                )
            })
            .collect();
        let base: f64 = w.iter().zip(&vals).map(|(a, b)| a * b).sum();
        let top = vals
            .iter()
            .map(|v| eta * (v - base))
            .fold(f64::NEG_INFINITY, f64::max);
        w.iter_mut()
            .zip(&vals)
            .for_each(|(x, v)| *x *= (eta * (v - base) - top).exp());
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        out.push(w.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Transition};

    fn data(recs: &[(usize, usize, usize)]) -> OfflineDataset {
        OfflineDataset::new(
            2,
            1,
            recs.iter()
                .map(|&(s, a, sp)| Transition { s, a, r: 0.0, sp })
                .collect(),
            Provenance {
                seed: 0,
                source: "hand".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn dirichlet_conjugacy() {
        let prior = ModelPrior::symmetric_dirichlet(2, 1, 1.0).unwrap();
        let post =
            posterior_update(&prior, &data(&[(0, 0, 0), (0, 0, 0), (0, 0, 0), (0, 0, 1)])).unwrap();
        let ModelPrior::Dirichlet { alpha, .. } = post.belief else {
            panic!()
        };
        assert_eq!(&alpha[..2], &[4.0, 2.0]);
        let empty = posterior_update(&prior, &data(&[])).unwrap();
        assert_eq!(empty.belief, prior);
    }

    #[test]
    fn zero_likelihood_member_gets_zero_weight() {
        let a = TransitionTable::from_flat(2, 1, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let b = TransitionTable::from_flat(2, 1, vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let class = FiniteModelClass::new(vec![a, b], 0).unwrap();
        let prior = ModelPrior::discrete(class, vec![0.5, 0.5]).unwrap();
        let post = posterior_update(&prior, &data(&[(0, 0, 1)])).unwrap();
        let ModelPrior::Discrete { weights, .. } = post.belief else {
            panic!()
        };
        assert_eq!(weights, vec![1.0, 0.0]);
    }

    #[test]
    fn eta_and_t_zero() {
        let task = Task::new(2, 1, 2, vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let prior = ModelPrior::symmetric_dirichlet(2, 1, 1.0).unwrap();
        let post = posterior_update(&prior, &data(&[])).unwrap();
        assert!(pspo_run(&post, &task, 3, 0.25, 0, None).is_err());
        let r = pspo_run(&post, &task, 0, 0.2, 0, None).unwrap();
        assert_eq!(r.policies, vec![TimePolicy::uniform(2, 1, 2)]);
    }

    #[test]
    fn robust_value_with_zero_radius_is_nominal() {
        let task = Task::new(2, 2, 3, vec![0.1, 0.9, 0.4, 0.6], vec![0.3, 0.7]).unwrap();
        let p = crate::models::random_transition(&mut stream(1, 1), 2, 2, 1.0);
        let pi = TimePolicy::uniform(2, 2, 3);
        let nominal = task.value(&p, &pi).unwrap();
        assert!((robust_l1_value(&task, &p, &[0.0; 4], &pi).unwrap() - nominal).abs() < 1e-12);
        assert!(robust_l1_value(&task, &p, &[0.5; 4], &pi).unwrap() <= nominal);
    }
}
