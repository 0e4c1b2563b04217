//! Model families and scenario generators.
//!
//! Finite classes are lists of transition tables over one shared [`Task`].
//! The partial-coverage generator builds a small "decision bank" MDP: every
//! start state picks between a safe action, risky actions, and an action that
//! the offline data never visits.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::OfflineDistribution;
use crate::error::{check_dim, param, Error, Result};
use crate::mdp::{plan_optimal, TabularMdp, Task, TimePolicy, TransitionTable};
use crate::rng::{dirichlet, stream};

/// Finite hypothesis class with the ground truth at `truth_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteModelClass {
    pub models: Vec<TransitionTable>,
    pub truth_index: usize,
}

impl FiniteModelClass {
    pub fn new(models: Vec<TransitionTable>, truth_index: usize) -> Result<Self> {
        let first = models.first().ok_or_else(|| param("class", "no models"))?;
        if truth_index >= models.len() {
            return Err(param("truth_index", format!("{truth_index} out of range")));
        }
        for m in &models {
            check_dim("class num_states", first.num_states(), m.num_states())?;
            check_dim("class num_actions", first.num_actions(), m.num_actions())?;
        }
        Ok(Self {
            models,
            truth_index,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn truth(&self) -> &TransitionTable {
        &self.models[self.truth_index]
    }

    pub fn num_states(&self) -> usize {
        self.models[0].num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.models[0].num_actions()
    }
}

pub fn random_transition<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
    alpha: f64,
) -> TransitionTable {
    let mut flat = Vec::with_capacity(num_states * num_actions * num_states);
    let conc = vec![alpha; num_states];
    for _ in 0..num_states * num_actions {
        flat.extend(dirichlet(rng, &conc));
    }
    TransitionTable::from_flat_tol(num_states, num_actions, flat, 1e-10)
        .expect("dirichlet rows are distributions")
}

/// Random task: rewards uniform in `[0,1]`, `d0` drawn from a flat Dirichlet.
/// Every `π_h(·|s)` drawn from a flat Dirichlet.
pub fn random_policy<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
) -> TimePolicy {
    let mut flat = Vec::with_capacity(horizon * num_states * num_actions);
    for _ in 0..horizon * num_states {
        flat.extend(normalized_exact(dirichlet(rng, &vec![1.0; num_actions])));
    }
    TimePolicy::from_flat(num_states, num_actions, horizon, flat).expect("rows sum to one")
}

pub fn random_task<R: Rng + ?Sized>(
    rng: &mut R,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
) -> Task {
    let reward = (0..num_states * num_actions)
        .map(|_| rng.random::<f64>())
        .collect();
    let d0 = normalized_exact(dirichlet(rng, &vec![1.0; num_states]));
    Task::new(num_states, num_actions, horizon, reward, d0).expect("valid random task")
}

/// Renormalizes and pushes the rounding residue into the largest entry.
pub fn normalized_exact(mut v: Vec<f64>) -> Vec<f64> {
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    let resid = 1.0 - v.iter().sum::<f64>();
    if let Some(m) = v
        .iter_mut()
        .max_by(|a, b| a.partial_cmp(b).expect("finite"))
    {
        *m += resid;
    }
    v
}

/// `P*` is a random table; the other members are `P* + perturbation·U(0,1)`
/// renormalized row by row. `P*` sits at a seeded position.
pub fn make_finite_class(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    class_size: usize,
    perturbation: f64,
) -> Result<FiniteModelClass> {
    if class_size == 0 || num_states == 0 || num_actions == 0 {
        return Err(param("class_size", "sizes must be positive"));
    }
    if !(perturbation > 0.0 && perturbation <= 1.0) {
        return Err(param(
            "perturbation",
            format!("{perturbation} not in (0,1]"),
        ));
    }
    let mut rng = stream(seed, 0);
    let truth = random_transition(&mut rng, num_states, num_actions, 1.0);
    let truth_index = rng.random_range(0..class_size);
    let mut models = Vec::with_capacity(class_size);
    for i in 0..class_size {
        if i == truth_index {
            models.push(truth.clone());
            continue;
        }
        let w = truth
            .as_flat()
            .iter()
            .map(|p| p + perturbation * rng.random::<f64>())
            .collect();
        models.push(TransitionTable::from_weights(num_states, num_actions, w)?);
    }
    FiniteModelClass::new(models, truth_index)
}

/// Truth, class, task and a full-support offline distribution.
#[derive(Clone, Debug)]
pub struct FiniteScenario {
    pub task: Task,
    pub class: FiniteModelClass,
    pub rho: OfflineDistribution,
}

impl FiniteScenario {
    pub fn truth_mdp(&self) -> TabularMdp {
        TabularMdp::new(self.task.clone(), self.class.truth().clone()).expect("matching dims")
    }
}

pub fn make_finite_scenario(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    class_size: usize,
    perturbation: f64,
) -> Result<FiniteScenario> {
    let class = make_finite_class(seed, num_states, num_actions, class_size, perturbation)?;
    let mut rng = stream(seed, 1);
    let task = random_task(&mut rng, num_states, num_actions, horizon);
    let rho = OfflineDistribution::from_table(
        num_states,
        num_actions,
        normalized_exact(dirichlet(&mut rng, &vec![2.0; num_states * num_actions])),
    )?;
    Ok(FiniteScenario { task, class, rho })
}

/// One-parameter segment `P_θ = (1−θ)A + θB`, `θ` on a uniform grid over
/// `[0,1]` with the truth at the middle point. The MLE over this class
/// behaves like a smooth parametric MLE until the grid resolution binds.
pub fn make_segment_class(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    class_size: usize,
) -> Result<FiniteModelClass> {
    if class_size < 3 || class_size.is_multiple_of(2) {
        return Err(param("class_size", "segment classes need an odd size >= 3"));
    }
    let mut rng = stream(seed, 2);
    let a = random_transition(&mut rng, num_states, num_actions, 1.0);
    let b = random_transition(&mut rng, num_states, num_actions, 1.0);
    let models = (0..class_size)
        .map(|i| {
            let t = i as f64 / (class_size - 1) as f64;
            let w = a
                .as_flat()
                .iter()
                .zip(b.as_flat())
                .map(|(x, y)| (1.0 - t) * x + t * y)
                .collect();
            TransitionTable::from_weights(num_states, num_actions, w)
        })
        .collect::<Result<Vec<_>>>()?;
    FiniteModelClass::new(models, class_size / 2)
}

/// Partial-coverage decision bank.
#[derive(Clone, Debug)]
pub struct PartialCoverageInstance {
    pub mdp: TabularMdp,
    pub rho: OfflineDistribution,
    pub comparator: TimePolicy,
    /// Decision states are `0..num_decision`; then goal, then pit.
    pub num_decision: usize,
    /// The action never visited by `rho` at decision states.
    pub trap_action: usize,
    /// The comparator's action at decision states.
    pub best_action: usize,
}

impl PartialCoverageInstance {
    pub fn goal(&self) -> usize {
        self.num_decision
    }
    pub fn pit(&self) -> usize {
        self.num_decision + 1
    }
}

/// Decision states `0..K` (`K = num_states − 2`) each choose once at `h = 0`
/// between a safe action 0, risky actions `1..A−1` and the trap `A−1`; then
/// the episode sits in the goal (reward 1) or the pit (reward 0). Action 1 is
/// optimal by a margin that varies geometrically across decision states.
/// `rho` covers every non-trap pair at decision states plus the absorbing
/// states under action 0; the trap is never visited.
pub fn make_partial_coverage_instance(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
) -> Result<PartialCoverageInstance> {
    if num_states < 3 {
        return Err(param("num_states", "need at least 3 states"));
    }
    if num_actions < 2 || horizon < 2 {
        return Err(param(
            "num_actions",
            "need at least 2 actions and horizon 2",
        ));
    }
    let k = num_states - 2;
    let (goal, pit) = (k, k + 1);
    let trap = num_actions - 1;
    let best = if num_actions >= 3 { 1 } else { 0 };
    let mut rng = stream(seed, 3);
    let mut margins: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                0.1
            } else {
                0.01 * 25f64.powf(i as f64 / (k - 1) as f64)
            }
        })
        .collect();
    // seeded assignment of margins to states
    for i in (1..k).rev() {
        let j = rng.random_range(0..=i);
        margins.swap(i, j);
    }
    let mut p = vec![0.0; num_states * num_actions * num_states];
    let mut set_row = |s: usize, a: usize, goal_prob: f64| {
        let base = (s * num_actions + a) * num_states;
        p[base + goal] = goal_prob;
        p[base + pit] = 1.0 - goal_prob;
    };
    for (s, &m) in margins.iter().enumerate() {
        let safe = rng.random_range(0.35..0.45);
        for a in 0..num_actions {
            let g = if a == trap {
                0.0
            } else if a == 0 {
                safe
            } else if a == 1 {
                safe + m
            } else {
                safe - 0.1
            };
            set_row(s, a, if a == 0 && best == 0 { safe } else { g });
        }
    }
    for a in 0..num_actions {
        let gb = (goal * num_actions + a) * num_states;
        p[gb + goal] = 1.0;
        let pb = (pit * num_actions + a) * num_states;
        p[pb + pit] = 1.0;
    }
    let transition = TransitionTable::from_flat_tol(num_states, num_actions, p, 1e-12)?;
    let mut reward = vec![0.0; num_states * num_actions];
    for a in 0..num_actions {
        reward[goal * num_actions + a] = 1.0;
    }
    let mut d0 = vec![0.0; num_states];
    d0[..k].iter_mut().for_each(|x| *x = 1.0 / k as f64);
    let d0 = normalized_exact(d0);
    let task = Task::new(num_states, num_actions, horizon, reward, d0)?;
    let mdp = TabularMdp::new(task, transition)?;

    let mut table = vec![0.0; num_states * num_actions];
    let covered = (num_actions - 1).max(1);
    for s in 0..k {
        for a in 0..num_actions {
            if a != trap {
                table[s * num_actions + a] = 0.6 / (k * covered) as f64;
            }
        }
    }
    table[goal * num_actions] = 0.2;
    table[pit * num_actions] = 0.2;
    let rho = OfflineDistribution::from_table(num_states, num_actions, normalized_exact(table))?;
    let (comparator, _) = plan_optimal(&mdp)?;
    Ok(PartialCoverageInstance {
        mdp,
        rho,
        comparator,
        num_decision: k,
        trap_action: trap,
        best_action: best,
    })
}

/// Class for a partial-coverage instance: members shift the goal probability
/// of the comparator's action at every decision state by `−ε` for `ε` on a
/// symmetric grid. Every member other than the truth (`ε = 0`) believes the
/// trap leads to the goal, which no offline sample can refute.
pub fn make_trap_class(
    instance: &PartialCoverageInstance,
    eps_max: f64,
    eps_step: f64,
) -> Result<FiniteModelClass> {
    if !(eps_step > 0.0) || !(eps_max >= eps_step) {
        return Err(param("eps_step", "need 0 < eps_step <= eps_max"));
    }
    let truth = &instance.mdp.transition;
    let (goal, pit) = (instance.goal(), instance.pit());
    let half = (eps_max / eps_step).round() as i64;
    let mut models = Vec::with_capacity((2 * half + 1) as usize);
    for j in -half..=half {
        if j == 0 {
            models.push(truth.clone());
            continue;
        }
        let eps = j as f64 * eps_step;
        let mut m = truth.clone();
        for s in 0..instance.num_decision {
            let mut row = truth.row(s, instance.best_action).to_vec();
            let g = (row[goal] - eps).clamp(0.0, 1.0);
            row[goal] = g;
            row[pit] = 1.0 - g;
            m = m.with_row(s, instance.best_action, &row)?;
            let mut trap_row = vec![0.0; truth.num_states()];
            trap_row[goal] = 1.0;
            m = m.with_row(s, instance.trap_action, &trap_row)?;
        }
        models.push(m);
    }
    FiniteModelClass::new(models, half as usize)
}

/// Factored class `P(s'|s,a) = μ(s')ᵀφ(s,a)` over finite candidate sets.
#[derive(Clone, Debug)]
pub struct LowRankModelClass {
    pub dim: usize,
    pub num_states: usize,
    pub num_actions: usize,
    /// `phi_set[i][(s*A + a)*d + z]`.
    pub phi_set: Vec<Vec<f64>>,
    /// `mu_set[j][s'*d + z]`.
    pub mu_set: Vec<Vec<f64>>,
    /// `(mu, phi)` index pairs whose product is a valid kernel, lexicographic.
    pub valid_pairs: Vec<(usize, usize)>,
    pub tables: Vec<TransitionTable>,
    pub truth_pair: (usize, usize),
}

impl LowRankModelClass {
    /// Builds the class, keeping only products that are valid transition tables.
    pub fn from_factors(
        num_states: usize,
        num_actions: usize,
        dim: usize,
        phi_set: Vec<Vec<f64>>,
        mu_set: Vec<Vec<f64>>,
        truth_pair: (usize, usize),
    ) -> Result<Self> {
        for phi in &phi_set {
            check_dim("phi", num_states * num_actions * dim, phi.len())?;
            for f in phi.chunks(dim) {
                let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1.0 + 1e-12 {
                    return Err(param("phi", format!("feature norm {norm} > 1")));
                }
            }
        }
        for mu in &mu_set {
            check_dim("mu", num_states * dim, mu.len())?;
        }
        let mut valid_pairs = Vec::new();
        let mut tables = Vec::new();
        for (j, mu) in mu_set.iter().enumerate() {
            for (i, phi) in phi_set.iter().enumerate() {
                if let Some(t) = factored_product(num_states, num_actions, dim, mu, phi) {
                    valid_pairs.push((j, i));
                    tables.push(t);
                }
            }
        }
        if !valid_pairs.contains(&truth_pair) {
            return Err(param("truth_pair", "truth product is not a valid kernel"));
        }
        Ok(Self {
            dim,
            num_states,
            num_actions,
            phi_set,
            mu_set,
            valid_pairs,
            tables,
            truth_pair,
        })
    }

    pub fn truth_position(&self) -> usize {
        self.valid_pairs
            .iter()
            .position(|&p| p == self.truth_pair)
            .expect("truth retained")
    }

    pub fn truth(&self) -> &TransitionTable {
        &self.tables[self.truth_position()]
    }

    /// The valid products as a finite class.
    pub fn as_finite_class(&self) -> FiniteModelClass {
        FiniteModelClass::new(self.tables.clone(), self.truth_position()).expect("non-empty")
    }

    pub fn true_feature(&self) -> &[f64] {
        &self.phi_set[self.truth_pair.1]
    }
}

fn factored_product(
    ns: usize,
    na: usize,
    d: usize,
    mu: &[f64],
    phi: &[f64],
) -> Option<TransitionTable> {
    let mut flat = Vec::with_capacity(ns * na * ns);
    for sa in 0..ns * na {
        let f = &phi[sa * d..(sa + 1) * d];
        let mut sum = 0.0;
        for sp in 0..ns {
            let p: f64 = mu[sp * d..(sp + 1) * d]
                .iter()
                .zip(f)
                .map(|(m, x)| m * x)
                .sum();
            if p < -1e-12 {
                return None;
            }
            let p = p.max(0.0);
            sum += p;
            flat.push(p);
        }
        if (sum - 1.0).abs() > 1e-9 {
            return None;
        }
    }
    TransitionTable::from_flat_tol(ns, na, flat, 1e-9).ok()
}

/// Latent-variable candidates: `φ(s,a) ∈ Δ(d)` and emission columns
/// `μ(·)_z ∈ Δ(S)`, plus `num_signed` emission candidates with zero-sum
/// signed perturbations that make some products invalid.
pub fn make_low_rank_class(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    dim: usize,
    num_phi: usize,
    num_mu: usize,
    num_signed: usize,
) -> Result<LowRankModelClass> {
    if num_phi == 0 || num_mu == 0 || dim == 0 {
        return Err(param("low rank", "candidate sets must be non-empty"));
    }
    let mut rng = stream(seed, 4);
    let phi_set: Vec<Vec<f64>> = (0..num_phi)
        .map(|_| {
            (0..num_states * num_actions)
                .flat_map(|_| dirichlet(&mut rng, &vec![0.3; dim]))
                .collect()
        })
        .collect();
    let mut mu_set: Vec<Vec<f64>> = (0..num_mu)
        .map(|_| {
            let cols: Vec<Vec<f64>> = (0..dim)
                .map(|_| dirichlet(&mut rng, &vec![0.5; num_states]))
                .collect();
            let mut mu = vec![0.0; num_states * dim];
            for (z, col) in cols.iter().enumerate() {
                for (sp, &v) in col.iter().enumerate() {
                    mu[sp * dim + z] = v;
                }
            }
            mu
        })
        .collect();
    for k in 0..num_signed {
        let base = mu_set[k % num_mu].clone();
        let mut mu = base;
        for z in 0..dim {
            let noise: Vec<f64> = (0..num_states)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            let mean = noise.iter().sum::<f64>() / num_states as f64;
            for sp in 0..num_states {
                mu[sp * dim + z] += noise[sp] - mean;
            }
        }
        mu_set.push(mu);
    }
    let truth_pair = (rng.random_range(0..num_mu), rng.random_range(0..num_phi));
    LowRankModelClass::from_factors(num_states, num_actions, dim, phi_set, mu_set, truth_pair)
}

/// Feature table over enumerated `(anchor, action)` pairs. A continuous state
/// is mapped to its nearest anchor (ties to the lower index).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnrFeatureTable {
    pub anchors: Vec<Vec<f64>>,
    pub num_actions: usize,
    pub dim: usize,
    /// `table[anchor * num_actions + a]`.
    pub table: Vec<Vec<f64>>,
}

impl KnrFeatureTable {
    pub fn new(
        anchors: Vec<Vec<f64>>,
        num_actions: usize,
        dim: usize,
        table: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dim("feature table", anchors.len() * num_actions, table.len())?;
        for (i, f) in table.iter().enumerate() {
            check_dim("feature dim", dim, f.len())?;
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 + 1e-12 {
                return Err(param("feature", format!("‖φ‖ = {norm} > 1 at pair {i}")));
            }
        }
        Ok(Self {
            anchors,
            num_actions,
            dim,
            table,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.table.len()
    }

    pub fn state_dim(&self) -> usize {
        self.anchors.first().map_or(0, |a| a.len())
    }

    pub fn nearest_anchor(&self, state: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, x) in self.anchors.iter().enumerate() {
            let d: f64 = x.iter().zip(state).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    pub fn pair_index(&self, state: &[f64], action: usize) -> usize {
        self.nearest_anchor(state) * self.num_actions + action
    }

    pub fn phi(&self, state: &[f64], action: usize) -> &[f64] {
        &self.table[self.pair_index(state, action)]
    }
}

/// One-hot features over `|S|·|A|` pairs; anchors are the integers `0..|S|`.
pub fn knr_one_hot_embedding(num_states: usize, num_actions: usize) -> KnrFeatureTable {
    let dim = num_states * num_actions;
    let table = (0..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            e
        })
        .collect();
    KnrFeatureTable {
        anchors: (0..num_states).map(|s| vec![s as f64]).collect(),
        num_actions,
        dim,
        table,
    }
}

/// `s' = Wφ(s,a) + ε`, `ε ∼ N(0, ζ²I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnrModel {
    pub w: DMatrix<f64>,
    pub feature: KnrFeatureTable,
    pub noise_sigma: f64,
}

impl KnrModel {
    pub fn new(w: DMatrix<f64>, feature: KnrFeatureTable, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma > 0.0) {
            return Err(param("noise_sigma", "must be > 0"));
        }
        check_dim("W columns", feature.dim, w.ncols())?;
        check_dim("W rows", feature.state_dim(), w.nrows())?;
        Ok(Self {
            w,
            feature,
            noise_sigma,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn mean_next(&self, w: &DMatrix<f64>, state: &[f64], action: usize) -> Vec<f64> {
        let phi = self.feature.phi(state, action);
        (0..w.nrows())
            .map(|i| (0..w.ncols()).map(|j| w[(i, j)] * phi[j]).sum())
            .collect()
    }
}

/// State-feedback rules for the navigation KNR (actions: 0 left, 1 stay, 2 right).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackPolicy {
    Constant(usize),
    /// Move toward `target` unless within `deadband`.
    Toward {
        target: f64,
        deadband: f64,
    },
    Away {
        target: f64,
    },
}

impl FeedbackPolicy {
    pub fn act(&self, state: &[f64]) -> usize {
        let x = state[0];
        match *self {
            FeedbackPolicy::Constant(a) => a,
            FeedbackPolicy::Toward { target, deadband } => {
                if (x - target).abs() <= deadband {
                    1
                } else if x < target {
                    2
                } else {
                    0
                }
            }
            FeedbackPolicy::Away { target } => {
                if x < target {
                    0
                } else {
                    2
                }
            }
        }
    }
}

/// Continuous-state KNR planning problem at desk scale.
#[derive(Clone, Debug)]
pub struct KnrScenario {
    pub model: KnrModel,
    pub candidate_policies: Vec<FeedbackPolicy>,
    pub horizon: usize,
    pub initial_states: Vec<Vec<f64>>,
    /// Offline distribution over enumerated feature pairs.
    pub rho: Vec<f64>,
    pub reward_width: f64,
}

impl KnrScenario {
    /// `exp(−‖s‖²/w²)`, in `(0, 1]`.
    pub fn reward(&self, state: &[f64], _action: usize) -> f64 {
        let r2: f64 = state.iter().map(|x| x * x).sum();
        (-r2 / (self.reward_width * self.reward_width)).exp()
    }
}

/// 1-D navigation: anchors on `[−2, 2]`, one-hot `(anchor, action)` features,
/// `W*` moves the state by `−step, 0, +step`. `rho` covers anchors left of
/// `coverage_edge` only.
pub fn make_navigation_knr(
    num_anchors: usize,
    step: f64,
    zeta: f64,
    horizon: usize,
    coverage_edge: f64,
) -> Result<KnrScenario> {
    if num_anchors < 2 {
        return Err(param("num_anchors", "need at least 2 anchors"));
    }
    let na = 3;
    let anchors: Vec<Vec<f64>> = (0..num_anchors)
        .map(|i| vec![-2.0 + 4.0 * i as f64 / (num_anchors - 1) as f64])
        .collect();
    let mut feature = knr_one_hot_embedding(num_anchors, na);
    feature.anchors = anchors.clone();
    let mut w = DMatrix::zeros(1, num_anchors * na);
    for (i, x) in anchors.iter().enumerate() {
        for a in 0..na {
            w[(0, i * na + a)] = x[0] + step * (a as f64 - 1.0);
        }
    }
    let model = KnrModel::new(w, feature, zeta)?;
    let mut rho = vec![0.0; num_anchors * na];
    for (i, x) in anchors.iter().enumerate() {
        if x[0] <= coverage_edge {
            for a in 0..na {
                rho[i * na + a] = 1.0;
            }
        }
    }
    if rho.iter().all(|&r| r == 0.0) {
        return Err(Error::InvalidParameter {
            name: "coverage_edge",
            detail: "no anchor covered".into(),
        });
    }
    let rho = normalized_exact(rho);
    Ok(KnrScenario {
        model,
        candidate_policies: vec![
            FeedbackPolicy::Constant(0),
            FeedbackPolicy::Constant(1),
            FeedbackPolicy::Constant(2),
            FeedbackPolicy::Toward {
                target: 0.0,
                deadband: step / 2.0,
            },
            FeedbackPolicy::Away { target: 0.0 },
        ],
        horizon,
        initial_states: vec![vec![-1.5]],
        rho,
        reward_width: 0.75,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::concentrability;
    use crate::mdp::occupancy;

    #[test]
    fn finite_class_contracts() {
        let c = make_finite_class(3, 4, 2, 1, 0.5).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.truth_index, 0);
        assert!(make_finite_class(3, 4, 2, 5, 0.0).is_err());
        let a = make_finite_class(11, 4, 2, 8, 0.3).unwrap();
        let b = make_finite_class(11, 4, 2, 8, 0.3).unwrap();
        assert_eq!(a, b);
        for m in &a.models {
            TransitionTable::from_flat(4, 2, m.as_flat().to_vec()).unwrap();
        }
    }

    #[test]
    fn segment_class_truth_is_midpoint() {
        let c = make_segment_class(1, 3, 2, 11).unwrap();
        assert_eq!(c.truth_index, 5);
        assert!(make_segment_class(1, 3, 2, 10).is_err());
    }

    #[test]
    fn partial_coverage_contract() {
        for seed in 0..5 {
            let inst = make_partial_coverage_instance(seed, 6, 3, 4).unwrap();
            let c = concentrability(&inst.comparator, &inst.mdp, &inst.rho).unwrap();
            assert!(c.is_finite());
            // some policy reaches an unvisited pair
            let (ns, na) = (6, 3);
            let trap = TimePolicy::deterministic(ns, na, 4, &vec![inst.trap_action; 4 * ns]);
            let d = occupancy(&inst.mdp, &trap).unwrap();
            let uncovered = (0..ns * na).any(|i| inst.rho.table()[i] == 0.0 && d.average[i] > 0.0);
            assert!(uncovered);
            // brute-force ratio scan
            let dc = occupancy(&inst.mdp, &inst.comparator).unwrap();
            let mut brute: f64 = 0.0;
            for i in 0..ns * na {
                if dc.average[i] > 0.0 {
                    brute = brute.max(dc.average[i] / inst.rho.table()[i]);
                }
            }
            assert_eq!(brute, c);
        }
    }

    #[test]
    fn trap_class_shapes() {
        let inst = make_partial_coverage_instance(0, 5, 3, 4).unwrap();
        let c = make_trap_class(&inst, 0.3, 0.01).unwrap();
        assert_eq!(c.len(), 61);
        assert_eq!(c.truth(), &inst.mdp.transition);
    }

    #[test]
    fn low_rank_filtering() {
        let c = make_low_rank_class(5, 4, 2, 2, 3, 3, 3).unwrap();
        assert!(c.valid_pairs.contains(&c.truth_pair));
        assert!(
            c.valid_pairs.len() < 3 * 6,
            "signed candidates should drop some products"
        );
        for t in &c.tables {
            for s in 0..4 {
                for a in 0..2 {
                    assert!(t.row(s, a).iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn one_hot_embedding() {
        let f = knr_one_hot_embedding(3, 2);
        assert_eq!(f.phi(&[0.0], 0)[0], 1.0);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = f.table[i].iter().zip(&f.table[j]).map(|(a, b)| a * b).sum();
                assert_eq!(dot, if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
