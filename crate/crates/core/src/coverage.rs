//! Concentrability coefficients and related coverage quantities.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{weighted_l1sq, OfflineDistribution};
use crate::error::{check_dim, param, Error, Result};
use crate::mdp::{occupancy, TabularMdp, Task, TimePolicy, TransitionTable};
use crate::models::FiniteModelClass;
use crate::pspo::{ModelPosterior, ModelPrior, PosteriorSampler, SampledModel};
use crate::rng::{derive_seed, stream};

/// `d(s,a)/ρ(s,a)` per pair: `+∞` for `d > 0 = ρ`, `0` for `0/0`.
pub fn ratio_table(d: &[f64], rho: &[f64]) -> Vec<f64> {
    d.iter()
        .zip(rho)
        .map(|(&d, &r)| {
            if d == 0.0 {
                0.0
            } else if r == 0.0 {
                f64::INFINITY
            } else {
                d / r
            }
        })
        .collect()
}

/// `max_{s,a} d^{π}_{P*}(s,a) / ρ(s,a)`.
pub fn concentrability(
    comparator: &TimePolicy,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
) -> Result<f64> {
    check_dim("rho num_states", mdp_true.num_states(), rho.num_states())?;
    check_dim("rho num_actions", mdp_true.num_actions(), rho.num_actions())?;
    let d = occupancy(mdp_true, comparator)?;
    Ok(ratio_table(&d.average, rho.table())
        .into_iter()
        .fold(0.0, f64::max))
}

/// `sup_{P ∈ M} E_num‖P − P*‖²₁ / E_den‖P − P*‖²₁` over members with a
/// nonzero denominator; members at distance zero from the truth are skipped
/// and an all-skipped class gives 0.
pub fn class_ratio_sup(
    class: &FiniteModelClass,
    truth: &TransitionTable,
    num: &[f64],
    den: &[f64],
) -> f64 {
    let mut sup: f64 = 0.0;
    for m in &class.models {
        let top = weighted_l1sq(num, m, truth);
        let bottom = weighted_l1sq(den, m, truth);
        if bottom > 0.0 {
            sup = sup.max(top / bottom);
        } else if top > 0.0 {
            return f64::INFINITY;
        }
    }
    sup
}

/// Partial concentrability `C†` of `comparator` over `class`.
pub fn refined_concentrability(
    class: &FiniteModelClass,
    comparator: &TimePolicy,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
) -> Result<f64> {
    let d = occupancy(mdp_true, comparator)?;
    Ok(class_ratio_sup(
        class,
        &mdp_true.transition,
        &d.average,
        rho.table(),
    ))
}

/// `C_{d0}`: numerator under `s ∼ d0, a ∼ U(A)`.
pub fn initial_dist_concentrability(
    class: &FiniteModelClass,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
) -> Result<f64> {
    let na = mdp_true.num_actions();
    let num: Vec<f64> = mdp_true
        .task
        .initial_dist()
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / na as f64, na))
        .collect();
    Ok(class_ratio_sup(
        class,
        &mdp_true.transition,
        &num,
        rho.table(),
    ))
}

/// `E_dist[φφᵀ]` for features enumerated per pair.
pub fn second_moment(features: &[Vec<f64>], dist: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("distribution", features.len(), dist.len())?;
    let d = features.first().map_or(0, |f| f.len());
    let mut m = DMatrix::zeros(d, d);
    for (f, &w) in features.iter().zip(dist) {
        if w == 0.0 {
            continue;
        }
        check_dim("feature dim", d, f.len())?;
        for i in 0..d {
            if f[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                m[(i, j)] += w * f[i] * f[j];
            }
        }
    }
    Ok(m)
}

/// Largest generalized eigenvalue of `(Σ_num, Σ_den + ridge·I)`. At
/// `ridge = 0` the problem is solved on `range(Σ_den)` and `+∞` is returned
/// when `Σ_num` has mass outside it.
pub fn relative_condition_number(
    features: &[Vec<f64>],
    dist_num: &[f64],
    dist_den: &[f64],
    ridge: f64,
) -> Result<f64> {
    if !(ridge >= 0.0) {
        return Err(param("ridge", "must be >= 0"));
    }
    let num = second_moment(features, dist_num)?;
    let mut den = second_moment(features, dist_den)?;
    let d = den.nrows();
    if ridge > 0.0 {
        den += DMatrix::identity(d, d) * ridge;
    }
    let e = SymmetricEigen::new(den);
    let top = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        let mass = num.trace();
        return Ok(if mass > 0.0 { f64::INFINITY } else { 0.0 });
    }
    let keep: Vec<usize> = (0..d).filter(|&i| e.eigenvalues[i] > 1e-12 * top).collect();
    let basis = e.eigenvectors.select_columns(&keep);
    // mass of Σ_num outside the kept subspace
    let proj = &basis * basis.transpose();
    let resid = (DMatrix::identity(d, d) - &proj) * &num * (DMatrix::identity(d, d) - &proj);
    if resid.trace() > 1e-12 * num.trace().max(1e-300) {
        return Ok(f64::INFINITY);
    }
    let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        keep.len(),
        keep.iter().map(|&i| 1.0 / e.eigenvalues[i].sqrt()),
    ));
    let whitened = &scale * basis.transpose() * &num * &basis * &scale;
    let sym = (&whitened + whitened.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max))
}

/// Singular values above `tol · σ_max`; rejects matrices with an eigenvalue
/// below `−1e-10`.
pub fn numerical_rank(matrix: &DMatrix<f64>, tol: f64) -> Result<usize> {
    if matrix.nrows() != matrix.ncols() {
        return Err(Error::Dimension {
            axis: "square matrix",
            expected: matrix.nrows(),
            actual: matrix.ncols(),
        });
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    if let Some(&low) = eig.iter().find(|&&x| x < -1e-10) {
        return Err(Error::NotPsd(low));
    }
    let top = eig.iter().cloned().fold(0.0, f64::max);
    Ok(eig.iter().filter(|&&x| x > tol * top && x > 0.0).count())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub density_ratio_c: f64,
    pub refined_c_dagger: f64,
    pub rel_cond_number: f64,
    pub c_d0: f64,
    pub rank_sigma_rho: usize,
    /// Per-pair `d/ρ`, row-major `(s,a)`.
    pub ratios: Vec<f64>,
}

impl CoverageReport {
    pub fn ratio_csv(&self, num_actions: usize) -> String {
        let mut out = String::from("s,a,ratio\n");
        for (i, r) in self.ratios.iter().enumerate() {
            out.push_str(&format!("{},{},{r}\n", i / num_actions, i % num_actions));
        }
        out
    }
}

/// All quantities for a finite class; `features` defaults to one-hot.
pub fn coverage_report(
    class: &FiniteModelClass,
    comparator: &TimePolicy,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
    features: Option<&[Vec<f64>]>,
) -> Result<CoverageReport> {
    let d = occupancy(mdp_true, comparator)?;
    let one_hot;
    let features = match features {
        Some(f) => f,
        None => {
            one_hot =
                crate::models::knr_one_hot_embedding(mdp_true.num_states(), mdp_true.num_actions())
                    .table;
            &one_hot
        }
    };
    let ratios = ratio_table(&d.average, rho.table());
    Ok(CoverageReport {
        density_ratio_c: ratios.iter().cloned().fold(0.0, f64::max),
        refined_c_dagger: class_ratio_sup(class, &mdp_true.transition, &d.average, rho.table()),
        rel_cond_number: relative_condition_number(features, &d.average, rho.table(), 0.0)?,
        c_d0: initial_dist_concentrability(class, mdp_true, rho)?,
        rank_sigma_rho: numerical_rank(&second_moment(features, rho.table())?, 1e-9)?,
        ratios,
    })
}

/// Running mean that reproduces a constant sequence exactly.
fn running_mean(xs: &[f64]) -> f64 {
    if xs.iter().any(|x| x.is_infinite()) {
        return f64::INFINITY;
    }
    let mut m = 0.0;
    for (k, x) in xs.iter().enumerate() {
        m += (x - m) / (k + 1) as f64;
    }
    m
}

fn finite_se(xs: &[f64]) -> f64 {
    if xs.iter().any(|x| x.is_infinite()) {
        f64::INFINITY
    } else {
        crate::stats::std_error(xs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageDraw {
    pub c: f64,
    pub c_dagger: f64,
    pub rel_cond: f64,
    pub c_d0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BayesCoverage {
    pub c_bayes: f64,
    pub c_bayes_se: f64,
    pub c_dagger_bayes: f64,
    pub c_dagger_bayes_se: f64,
    pub rel_cond_bayes: f64,
    pub rel_cond_bayes_se: f64,
    pub c_d0_bayes: f64,
    pub c_d0_bayes_se: f64,
    pub draws: Vec<CoverageDraw>,
}

/// Coverage of `π(P*)` averaged over `P* ∼ prior`. For a discrete prior `C†`
/// and `C_{d0}` are sups over its class; for a Dirichlet prior the class is
/// every tabular model, where both sups reduce to pairwise density ratios.
pub fn bayesian_coverage(
    prior: &ModelPrior,
    task: &Task,
    rho: &OfflineDistribution,
    num_samples: usize,
    seed: u64,
) -> Result<BayesCoverage> {
    if num_samples < 10 {
        return Err(param(
            "num_samples",
            format!("need at least 10, got {num_samples}"),
        ));
    }
    let post = ModelPosterior {
        belief: prior.clone(),
        n: 0,
        dataset_seed: None,
    };
    let sampler = PosteriorSampler::new(&post)?;
    let one_hot = crate::models::knr_one_hot_embedding(task.num_states(), task.num_actions()).table;
    let na = task.num_actions();
    let draws = (0..num_samples)
        .into_par_iter()
        .map(|k| -> Result<CoverageDraw> {
            let drawn = sampler.sample(&mut stream(derive_seed(seed, k as u64), 7));
            let (mdp, class) = match (drawn, prior) {
                (SampledModel::Member(i), ModelPrior::Discrete { class, .. }) => {
                    let mut c = class.clone();
                    c.truth_index = i;
                    (
                        TabularMdp::new(task.clone(), class.models[i].clone())?,
                        Some(c),
                    )
                }
                (SampledModel::Table(p), _) => (TabularMdp::new(task.clone(), p)?, None),
                _ => return Err(Error::Unsupported("coverage needs a tabular prior".into())),
            };
            let (star, _) = task.plan(&mdp.transition)?;
            let d = occupancy(&mdp, &star)?;
            let c = ratio_table(&d.average, rho.table())
                .into_iter()
                .fold(0.0, f64::max);
            let rel_cond = relative_condition_number(&one_hot, &d.average, rho.table(), 0.0)?;
            let (c_dagger, c_d0) = match class {
                Some(class) => (
                    class_ratio_sup(&class, &mdp.transition, &d.average, rho.table()),
                    initial_dist_concentrability(&class, &mdp, rho)?,
                ),
                None => {
                    let d0: Vec<f64> = task
                        .initial_dist()
                        .iter()
                        .flat_map(|&x| std::iter::repeat_n(x / na as f64, na))
                        .collect();
                    (
                        c,
                        ratio_table(&d0, rho.table())
                            .into_iter()
                            .fold(0.0, f64::max),
                    )
                }
            };
            Ok(CoverageDraw {
                c,
                c_dagger,
                rel_cond,
                c_d0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&CoverageDraw) -> f64| draws.iter().map(f).collect::<Vec<f64>>();
    let (c, cd, rc, c0) = (
        col(|d| d.c),
        col(|d| d.c_dagger),
        col(|d| d.rel_cond),
        col(|d| d.c_d0),
    );
    Ok(BayesCoverage {
        c_bayes: running_mean(&c),
        c_bayes_se: finite_se(&c),
        c_dagger_bayes: running_mean(&cd),
        c_dagger_bayes_se: finite_se(&cd),
        rel_cond_bayes: running_mean(&rc),
        rel_cond_bayes_se: finite_se(&rc),
        c_d0_bayes: running_mean(&c0),
        c_d0_bayes_se: finite_se(&c0),
        draws,
    })
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(a, m, fa, flm, fm);
        let right = simpson(m, b, fm, frm, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    // split up front so a narrow peak cannot hide between the first samples
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            let whole = simpson(x0, x1, f0, fm, f1);
            rec(f, x0, x1, f0, fm, f1, whole, tol / pieces as f64, 40)
        })
        .sum()
}

fn normal_pdf(x: f64, mu: f64, zeta: f64) -> f64 {
    let z = (x - mu) / zeta;
    (-0.5 * z * z).exp() / (zeta * (2.0 * std::f64::consts::PI).sqrt())
}

/// `(‖N(μ₁,ζ²I) − N(μ₂,ζ²I)‖₁` by quadrature, `‖μ₁ − μ₂‖₂/ζ)` for 1-D or 2-D means.
pub fn gaussian_l1_bound_check(mu1: &[f64], mu2: &[f64], zeta: f64) -> Result<(f64, f64)> {
    check_dim("mean dim", mu1.len(), mu2.len())?;
    if !(zeta > 0.0) {
        return Err(param("zeta", "must be > 0"));
    }
    let bound = mu1
        .iter()
        .zip(mu2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
        / zeta;
    let lo = |k: usize| mu1[k].min(mu2[k]) - 8.0 * zeta;
    let hi = |k: usize| mu1[k].max(mu2[k]) + 8.0 * zeta;
    let tol = 1e-7;
    let l1 = match mu1.len() {
        1 => {
            let f = |x: f64| (normal_pdf(x, mu1[0], zeta) - normal_pdf(x, mu2[0], zeta)).abs();
            adaptive_simpson(&f, lo(0), hi(0), tol)
        }
        2 => {
            let outer = |x: f64| {
                let (p1, p2) = (normal_pdf(x, mu1[0], zeta), normal_pdf(x, mu2[0], zeta));
                let inner = |y: f64| {
                    (p1 * normal_pdf(y, mu1[1], zeta) - p2 * normal_pdf(y, mu2[1], zeta)).abs()
                };
                adaptive_simpson(&inner, lo(1), hi(1), tol / (hi(0) - lo(0)))
            };
            adaptive_simpson(&outer, lo(0), hi(0), tol)
        }
        k => return Err(Error::Unsupported(format!("quadrature in {k} dimensions"))),
    };
    Ok((l1, bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&DMatrix::identity(4, 4), 1e-9).unwrap(), 4);
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(numerical_rank(&(&v * v.transpose()), 1e-9).unwrap(), 1);
        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(numerical_rank(&bad, 1e-9), Err(Error::NotPsd(_))));
    }

    #[test]
    fn diagonal_relative_condition() {
        let f = crate::models::knr_one_hot_embedding(3, 1).table;
        let num = [0.5, 0.3, 0.2];
        let den = [0.25, 0.25, 0.5];
        let k = relative_condition_number(&f, &num, &den, 0.0).unwrap();
        assert!((k - 2.0).abs() < 1e-12);
        assert!((relative_condition_number(&f, &num, &num, 0.0).unwrap() - 1.0).abs() < 1e-12);
        let partial = [0.5, 0.5, 0.0];
        assert_eq!(
            relative_condition_number(&f, &num, &partial, 0.0).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn gaussian_l1_one_sigma() {
        let (l1, bound) = gaussian_l1_bound_check(&[0.0], &[1.0], 1.0).unwrap();
        // 2(2Φ(1/2) − 1)
        assert!((l1 - 0.765_849_845_2).abs() < 1e-6, "{l1}");
        assert_eq!(bound, 1.0);
        let (l1, _) = gaussian_l1_bound_check(&[0.0, 0.0], &[0.6, 0.8], 1.0).unwrap();
        assert!((l1 - 0.765_849_845_2).abs() < 1e-5, "{l1}");
        assert!(gaussian_l1_bound_check(&[0.0; 3], &[0.0; 3], 1.0).is_err());
    }

    #[test]
    fn ratio_conventions() {
        assert_eq!(
            ratio_table(&[0.0, 0.5, 0.5], &[0.0, 0.0, 0.25]),
            vec![0.0, f64::INFINITY, 2.0]
        );
    }
}
