//! Maximum-likelihood estimators, version spaces and threshold calibration.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    empirical_l1sq, sample_dataset, weighted_l1sq, KnrDataset, OfflineDataset, OfflineDistribution,
};
use crate::error::{check_dim, param, Error, Result};
use crate::mdp::{TabularMdp, TransitionTable};
use crate::models::{FiniteModelClass, KnrFeatureTable};
use crate::rng::derive_seed;
use crate::stats::{confident_quantile, log_log_slope, median, upper_quantile};

/// Which confidence-radius formula applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    Finite,
    Tabular,
    Knr,
    LowRank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub rule: ThresholdRule,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    pub delta: f64,
    /// Ridge parameter; only read by the KNR rule.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_c1() -> f64 {
    2.0
}
fn default_c2() -> f64 {
    std::f64::consts::E
}
fn default_lambda() -> f64 {
    1.0
}

impl ThresholdPolicy {
    pub fn new(rule: ThresholdRule, delta: f64) -> Result<Self> {
        let p = Self {
            rule,
            c1: default_c1(),
            c2: default_c2(),
            delta,
            lambda: default_lambda(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_c1(mut self, c1: f64) -> Self {
        self.c1 = c1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(param("delta", format!("{} not in (0,1)", self.delta)));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.lambda > 0.0) {
            return Err(param("c1", "c1, c2 and lambda must be > 0"));
        }
        Ok(())
    }

    /// `c1 ln(c2|M|/δ)/n`.
    pub fn xi_finite(&self, class_size: usize, n: usize) -> f64 {
        self.c1 * (self.c2 * class_size as f64 / self.delta).ln() / n as f64
    }

    /// `c1 |S|²|A| ln(n|S||A|c2/δ)/n`.
    pub fn xi_tabular(&self, num_states: usize, num_actions: usize, n: usize) -> f64 {
        let (s, a) = (num_states as f64, num_actions as f64);
        self.c1 * s * s * a * (n as f64 * s * a * self.c2 / self.delta).ln() / n as f64
    }

    /// `c1 ln(|Φ||Ψ|/δ)/n`.
    pub fn xi_low_rank(&self, num_phi: usize, num_mu: usize, n: usize) -> f64 {
        self.c1 * ((num_phi * num_mu) as f64 / self.delta).ln() / n as f64
    }

    /// `√(2λ‖W*‖²₂ + 8ζ²(d_S ln 5 + ln(1/δ) + Ī_n))`; `c1` is not used.
    pub fn xi_knr(
        &self,
        w_star_sq: f64,
        zeta: f64,
        state_dim: usize,
        sigma_n: &DMatrix<f64>,
    ) -> f64 {
        let info = information_gain(sigma_n, self.lambda);
        (2.0 * self.lambda * w_star_sq
            + 8.0 * zeta * zeta * (state_dim as f64 * 5f64.ln() + (1.0 / self.delta).ln() + info))
            .sqrt()
    }

    /// Formula base for the finite-family rules, i.e. `ξ / c1`.
    pub fn base(
        &self,
        class_size: usize,
        num_states: usize,
        num_actions: usize,
        n: usize,
    ) -> Result<f64> {
        let unit = Self { c1: 1.0, ..*self };
        match self.rule {
            ThresholdRule::Finite => Ok(unit.xi_finite(class_size, n)),
            ThresholdRule::Tabular => Ok(unit.xi_tabular(num_states, num_actions, n)),
            ThresholdRule::LowRank => Err(param(
                "rule",
                "low-rank base needs |Φ|,|Ψ|; use xi_low_rank",
            )),
            ThresholdRule::Knr => Err(param("rule", "KNR radius is not a multiple of a base")),
        }
    }
}

/// `ln det(Σ_n + λI) / det(λI)`.
pub fn information_gain(sigma_n: &DMatrix<f64>, lambda: f64) -> f64 {
    SymmetricEigen::new(sigma_n.clone())
        .eigenvalues
        .iter()
        .map(|e| (1.0 + e.max(0.0) / lambda).ln())
        .sum()
}

/// `Σ N(s,a,s') ln P(s'|s,a)`; `−∞` when an observed transition has zero probability.
pub fn log_likelihood(table: &TransitionTable, counts: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (c, p) in counts.iter().zip(table.as_flat()) {
        if *c > 0.0 {
            if *p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += c * p.ln();
        }
    }
    ll
}

/// Argmax of the log-likelihood, lowest index on ties.
pub fn mle_finite(class: &FiniteModelClass, dataset: &OfflineDataset) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("MLE needs at least one record"));
    }
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
    argmax_ll(class.models.iter().map(|m| log_likelihood(m, &counts)))
}

pub(crate) fn argmax_ll(scores: impl Iterator<Item = f64>) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, ll) in scores.enumerate() {
        if ll > f64::NEG_INFINITY && best.is_none_or(|(_, b)| ll > b) {
            best = Some((i, ll));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::InconsistentClass)
}

/// Empirical transition frequencies; unvisited rows are uniform.
pub fn mle_tabular(
    dataset: &OfflineDataset,
    num_states: usize,
    num_actions: usize,
) -> Result<TransitionTable> {
    check_dim("dataset num_states", num_states, dataset.num_states())?;
    check_dim("dataset num_actions", num_actions, dataset.num_actions())?;
    let mut counts = dataset.transition_counts();
    for row in counts.chunks_mut(num_states) {
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            row.iter_mut().for_each(|x| *x = 1.0);
        }
    }
    TransitionTable::from_weights(num_states, num_actions, counts)
}

/// Ridge estimate `Ŵ = (Σ s'φᵀ)(Σ_n + λI)⁻¹` and the unregularized `Σ_n`.
pub fn ridge_mle_knr(
    dataset: &KnrDataset,
    feature: &KnrFeatureTable,
    lambda: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(lambda > 0.0) {
        return Err(param("lambda", format!("must be > 0, got {lambda}")));
    }
    if dataset.n() == 0 {
        return Err(Error::EmptyDataset(
            "ridge regression needs at least one record",
        ));
    }
    let d = feature.dim;
    let ds = dataset.records[0].sp.len();
    let mut sigma = DMatrix::zeros(d, d);
    let mut cross = DMatrix::zeros(ds, d);
    for t in &dataset.records {
        check_dim("next-state dim", ds, t.sp.len())?;
        let phi = feature.phi(&t.s, t.a);
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                sigma[(i, j)] += phi[i] * phi[j];
            }
            for k in 0..ds {
                cross[(k, i)] += t.sp[k] * phi[i];
            }
        }
    }
    let reg = &sigma + DMatrix::identity(d, d) * lambda;
    let chol = reg.cholesky().ok_or(Error::NotPsd(lambda))?;
    // W (Σ+λI) = C  ⇔  (Σ+λI) Wᵀ = Cᵀ
    let w = chol.solve(&cross.transpose()).transpose();
    Ok((w, sigma))
}

/// Members of a finite class within `xi` of the MLE in empirical squared ℓ1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VersionSpace {
    pub member_indices: Vec<usize>,
    pub xi: f64,
    pub mle_index: usize,
    /// `empirical_l1sq(D, m, MLE)` for every class member.
    pub distances: Vec<f64>,
}

impl VersionSpace {
    pub fn contains(&self, index: usize) -> bool {
        self.member_indices.binary_search(&index).is_ok()
    }
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }

    /// Same distances, different radius.
    pub fn with_xi(&self, xi: f64) -> Self {
        Self {
            member_indices: (0..self.distances.len())
                .filter(|&i| self.distances[i] <= xi)
                .collect(),
            xi,
            ..self.clone()
        }
    }
}

pub fn build_version_space(
    class: &FiniteModelClass,
    mle_index: usize,
    dataset: &OfflineDataset,
    xi: f64,
) -> Result<VersionSpace> {
    if !(xi >= 0.0) {
        return Err(param("xi", format!("must be >= 0, got {xi}")));
    }
    if mle_index >= class.len() {
        return Err(param("mle_index", "out of range"));
    }
    let mle = &class.models[mle_index];
    let distances = class
        .models
        .iter()
        .map(|m| empirical_l1sq(dataset, m, mle))
        .collect::<Result<Vec<_>>>()?;
    let member_indices = (0..class.len()).filter(|&i| distances[i] <= xi).collect();
    Ok(VersionSpace {
        member_indices,
        xi,
        mle_index,
        distances,
    })
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

/// Symmetric PSD square root by eigen-decomposition.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let root = e.eigenvalues.map(|x| x.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `{W : ‖(Ŵ − W) Σ_n^{1/2}‖₂ ≤ ξ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnrBall {
    pub w_hat: DMatrix<f64>,
    pub sigma_n: DMatrix<f64>,
    pub sigma_sqrt: DMatrix<f64>,
    pub xi: f64,
}

impl KnrBall {
    pub fn new(w_hat: DMatrix<f64>, sigma_n: DMatrix<f64>, xi: f64) -> Self {
        let sigma_sqrt = psd_sqrt(&sigma_n);
        Self {
            w_hat,
            sigma_n,
            sigma_sqrt,
            xi,
        }
    }

    pub fn distance(&self, w: &DMatrix<f64>) -> f64 {
        spectral_norm(&((&self.w_hat - w) * &self.sigma_sqrt))
    }

    pub fn contains(&self, w: &DMatrix<f64>) -> bool {
        self.distance(w) <= self.xi * (1.0 + 1e-10)
    }
}

/// Calibrated multiplier on a rule's base radius.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub multiplier: f64,
    pub base: f64,
    pub coverage: f64,
    pub trials: usize,
    /// Per-trial multiplier needed to capture `P*`.
    pub required: Vec<f64>,
}

impl Calibration {
    pub fn xi(&self) -> f64 {
        self.multiplier * self.base
    }
}

/// Per-trial `empirical_l1sq(D, P*, MLE)`; trial `i` uses seed `derive_seed(seed, i)`.
pub fn truth_distances(
    class: &FiniteModelClass,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let data = sample_dataset(mdp_true, rho, n, derive_seed(seed, t as u64))?;
            let mle = mle_finite(class, &data)?;
            empirical_l1sq(&data, class.truth(), &class.models[mle])
        })
        .collect()
}

/// One-sided 95% normal quantile used for the calibration lower bound.
pub const CALIBRATION_Z: f64 = 1.645;

/// Smallest multiplier `c` such that `P* ∈ M_D` at `ξ = c·base` with a
/// Wilson lower bound on the empirical capture rate of at least `1−δ`.
/// Errors when that needs more than `max_multiplier`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_threshold(
    class: &FiniteModelClass,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
    n: usize,
    base: f64,
    delta: f64,
    trials: usize,
    max_multiplier: f64,
    seed: u64,
) -> Result<Calibration> {
    if trials < 100 {
        return Err(param("trials", format!("need at least 100, got {trials}")));
    }
    if !(delta > 0.0 && delta < 1.0) || !(base > 0.0) {
        return Err(param(
            "delta",
            "need delta in (0,1) and a positive base radius",
        ));
    }
    let dist = truth_distances(class, mdp_true, rho, n, trials, seed)?;
    let required: Vec<f64> = dist.iter().map(|d| d / base).collect();
    let multiplier = confident_quantile(&required, 1.0 - delta, CALIBRATION_Z);
    let coverage_at = |c: f64| required.iter().filter(|&&r| r <= c).count() as f64 / trials as f64;
    if multiplier > max_multiplier {
        return Err(Error::UnattainableCoverage {
            target: 1.0 - delta,
            achieved: coverage_at(max_multiplier),
        });
    }
    Ok(Calibration {
        multiplier,
        base,
        coverage: coverage_at(multiplier),
        trials,
        required,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MleRateRow {
    pub n: usize,
    pub median: f64,
    pub quantile: f64,
    /// `quantile / (ln(|M|/δ)/n)`.
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MleReport {
    pub rows: Vec<MleRateRow>,
    /// `(n, trial, E_ρ‖P̂ − P*‖²₁)`.
    pub samples: Vec<(usize, usize, f64)>,
    pub slope: f64,
    /// Largest per-`n` multiplier: the quantile is bounded by it times the rate at every `n`.
    pub fitted_multiplier: f64,
    pub decay_ok: bool,
}

impl MleReport {
    /// `n,trial,quantity,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,trial,quantity,value\n");
        for (n, t, v) in &self.samples {
            out.push_str(&format!("{n},{t},rho_l1sq,{v:e}\n"));
        }
        out
    }
}

/// `E_ρ‖P̂_MLE − P*‖²₁` across `trials` datasets for each `n`.
pub fn verify_mle_guarantee(
    class: &FiniteModelClass,
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
    n_grid: &[usize],
    trials: usize,
    delta: f64,
    seed: u64,
) -> Result<MleReport> {
    if n_grid.is_empty() || trials == 0 {
        return Err(param("n_grid", "grid and trials must be non-empty"));
    }
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for (k, &n) in n_grid.iter().enumerate() {
        let cell = derive_seed(seed, k as u64);
        let errs = (0..trials)
            .into_par_iter()
            .map(|t| {
                let data = sample_dataset(mdp_true, rho, n, derive_seed(cell, t as u64))?;
                let mle = mle_finite(class, &data)?;
                Ok(weighted_l1sq(
                    rho.table(),
                    &class.models[mle],
                    class.truth(),
                ))
            })
            .collect::<Result<Vec<f64>>>()?;
        let rate = (class.len() as f64 / delta).ln() / n as f64;
        let quantile = upper_quantile(&errs, 1.0 - delta);
        rows.push(MleRateRow {
            n,
            median: median(&errs),
            quantile,
            multiplier: quantile / rate,
        });
        samples.extend(errs.iter().enumerate().map(|(t, &e)| (n, t, e)));
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let meds: Vec<f64> = rows.iter().map(|r| r.median).collect();
    let slope = if rows.len() >= 2 && meds.iter().all(|&m| m > 0.0) {
        log_log_slope(&ns, &meds)
    } else {
        f64::NAN
    };
    let fitted_multiplier = rows.iter().map(|r| r.multiplier).fold(0.0, f64::max);
    Ok(MleReport {
        decay_ok: meds.iter().all(|&m| m == 0.0) || slope <= -0.8,
        rows,
        samples,
        slope,
        fitted_multiplier,
    })
}
