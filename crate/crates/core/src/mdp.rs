//! Exact finite-horizon tabular MDP machinery.
//!
//! Everything here is backward/forward dynamic programming over dense tables.
//! Transition tables are stored flat in `(s, a, s')` row-major order, policies
//! in `(h, s, a)` order. A [`Task`] carries what is shared between a ground
//! truth model and the candidate models built from data: rewards, the initial
//! distribution and the horizon. A [`TabularMdp`] is a task plus a transition
//! table.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};

const SIMPLEX_TOL: f64 = 1e-12;

fn check_simplex(what: impl FnOnce() -> String, row: &[f64], tol: f64) -> Result<()> {
    let mut sum = 0.0;
    for (i, &p) in row.iter().enumerate() {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidDistribution {
                what: what(),
                detail: format!("entry {i} = {p}"),
            });
        }
        sum += p;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::InvalidDistribution {
            what: what(),
            detail: format!("sums to {sum}"),
        });
    }
    Ok(())
}

/// Transition kernel `P(s'|s,a)`. Serialized as nested `[s][a][s']` arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct TransitionTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TransitionTable {
    /// Builds a table from flat `(s, a, s')` data, validating every row.
    pub fn from_flat(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        Self::from_flat_tol(num_states, num_actions, probs, SIMPLEX_TOL)
    }

    pub fn from_flat_tol(
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
        tol: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(param("dims", "num_states and num_actions must be positive"));
        }
        check_dim(
            "transition",
            num_states * num_actions * num_states,
            probs.len(),
        )?;
        let t = Self {
            num_states,
            num_actions,
            probs,
        };
        for s in 0..num_states {
            for a in 0..num_actions {
                check_simplex(|| format!("P(.|s={s},a={a})"), t.row(s, a), tol)?;
            }
        }
        Ok(t)
    }

    pub fn from_nested(rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        let ns = rows.len();
        let na = rows.first().map_or(0, |r| r.len());
        let mut flat = Vec::with_capacity(ns * na * ns);
        for (s, per_a) in rows.iter().enumerate() {
            if per_a.len() != na {
                return Err(Error::InvalidDistribution {
                    what: format!("transition[{s}]"),
                    detail: format!("{} actions, expected {na}", per_a.len()),
                });
            }
            for row in per_a {
                check_dim("transition next-state", ns, row.len())?;
                flat.extend_from_slice(row);
            }
        }
        Self::from_flat(ns, na, flat)
    }

    /// Rows renormalized from arbitrary nonnegative weights.
    pub fn from_weights(num_states: usize, num_actions: usize, mut w: Vec<f64>) -> Result<Self> {
        check_dim("transition", num_states * num_actions * num_states, w.len())?;
        for row in w.chunks_mut(num_states) {
            let z: f64 = row.iter().sum();
            if !(z > 0.0) {
                return Err(param("weights", "row with zero total weight"));
            }
            row.iter_mut().for_each(|p| *p /= z);
        }
        Self::from_flat_tol(num_states, num_actions, w, 1e-10)
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_states as f64; num_states * num_actions * num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let k = (s * self.num_actions + a) * self.num_states;
        &self.probs[k..k + self.num_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.probs[(s * self.num_actions + a) * self.num_states + sp]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.probs
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_states)
            .map(|s| {
                (0..self.num_actions)
                    .map(|a| self.row(s, a).to_vec())
                    .collect()
            })
            .collect()
    }

    /// Copy with one row replaced; the new row is validated.
    pub fn with_row(&self, s: usize, a: usize, row: &[f64]) -> Result<Self> {
        check_dim("row", self.num_states, row.len())?;
        check_simplex(|| format!("P(.|s={s},a={a})"), row, 1e-10)?;
        let mut t = self.clone();
        let k = (s * self.num_actions + a) * self.num_states;
        t.probs[k..k + self.num_states].copy_from_slice(row);
        Ok(t)
    }
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for TransitionTable {
    type Error = Error;
    fn try_from(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Self::from_nested(&rows)
    }
}

impl From<TransitionTable> for Vec<Vec<Vec<f64>>> {
    fn from(t: TransitionTable) -> Self {
        t.to_nested()
    }
}

/// Shared part of a family of MDPs: reward `r(s,a)`, `d0`, horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl Task {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(param(
                "dims",
                "num_states, num_actions and horizon must be positive",
            ));
        }
        check_dim("reward", num_states * num_actions, reward.len())?;
        check_dim("initial_dist", num_states, initial_dist.len())?;
        if let Some((i, r)) = reward
            .iter()
            .enumerate()
            .find(|(_, r)| !(0.0..=1.0).contains(*r))
        {
            return Err(param(
                "reward",
                format!(
                    "r(s={},a={}) = {r} outside [0,1]",
                    i / num_actions,
                    i % num_actions
                ),
            ));
        }
        check_simplex(|| "initial_dist".into(), &initial_dist, SIMPLEX_TOL)?;
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            reward,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }
    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    fn check_transition(&self, p: &TransitionTable) -> Result<()> {
        check_dim("num_states", self.num_states, p.num_states)?;
        check_dim("num_actions", self.num_actions, p.num_actions)
    }

    fn check_policy(&self, pi: &TimePolicy) -> Result<()> {
        check_dim("horizon", self.horizon, pi.horizon)?;
        check_dim("num_states", self.num_states, pi.num_states)?;
        check_dim("num_actions", self.num_actions, pi.num_actions)
    }

    /// Exact policy evaluation under transition `p`.
    pub fn evaluate(&self, p: &TransitionTable, pi: &TimePolicy) -> Result<ValueTriple> {
        self.check_transition(p)?;
        self.check_policy(pi)?;
        Ok(self.evaluate_unchecked(p, pi))
    }

    pub(crate) fn evaluate_unchecked(&self, p: &TransitionTable, pi: &TimePolicy) -> ValueTriple {
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut v = vec![0.0; (hz + 1) * ns];
        let mut q = vec![0.0; hz * ns * na];
        for h in (0..hz).rev() {
            let (cur, next) = v.split_at_mut((h + 1) * ns);
            let next = &next[..ns];
            for s in 0..ns {
                let mut vs = 0.0;
                for a in 0..na {
                    let ev: f64 = p.row(s, a).iter().zip(next).map(|(p, v)| p * v).sum();
                    let qsa = self.reward(s, a) + ev;
                    q[(h * ns + s) * na + a] = qsa;
                    vs += pi.prob(h, s, a) * qsa;
                }
                cur[h * ns + s] = vs;
            }
        }
        v.truncate(hz * ns);
        let adv = q.iter().enumerate().map(|(i, qv)| qv - v[i / na]).collect();
        let value = self
            .initial_dist
            .iter()
            .zip(&v[..ns])
            .map(|(d, v)| d * v)
            .sum();
        ValueTriple {
            num_states: ns,
            num_actions: na,
            horizon: hz,
            v,
            q,
            adv,
            value,
        }
    }

    /// Scalar value only; skips the Q/advantage tables.
    pub(crate) fn value_unchecked(&self, p: &TransitionTable, pi: &TimePolicy) -> f64 {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut next = vec![0.0; ns];
        let mut cur = vec![0.0; ns];
        for h in (0..self.horizon).rev() {
            for (s, c) in cur.iter_mut().enumerate() {
                let mut vs = 0.0;
                for a in 0..na {
                    let w = pi.prob(h, s, a);
                    if w == 0.0 {
                        continue;
                    }
                    let ev: f64 = p.row(s, a).iter().zip(&next).map(|(p, v)| p * v).sum();
                    vs += w * (self.reward(s, a) + ev);
                }
                *c = vs;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        self.initial_dist
            .iter()
            .zip(&next)
            .map(|(d, v)| d * v)
            .sum()
    }

    pub fn value(&self, p: &TransitionTable, pi: &TimePolicy) -> Result<f64> {
        self.check_transition(p)?;
        self.check_policy(pi)?;
        Ok(self.value_unchecked(p, pi))
    }

    /// Per-step and average state-action occupancy.
    pub fn occupancy(&self, p: &TransitionTable, pi: &TimePolicy) -> Result<OccupancyMeasure> {
        self.check_transition(p)?;
        self.check_policy(pi)?;
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut per_step = vec![0.0; hz * ns * na];
        let mut state = self.initial_dist.clone();
        for h in 0..hz {
            let mut next = vec![0.0; ns];
            for s in 0..ns {
                if state[s] == 0.0 {
                    continue;
                }
                for a in 0..na {
                    let m = state[s] * pi.prob(h, s, a);
                    per_step[(h * ns + s) * na + a] = m;
                    if m != 0.0 {
                        for (n, pr) in next.iter_mut().zip(p.row(s, a)) {
                            *n += m * pr;
                        }
                    }
                }
            }
            state = next;
        }
        let mut average = vec![0.0; ns * na];
        for step in per_step.chunks(ns * na) {
            for (avg, d) in average.iter_mut().zip(step) {
                *avg += d / hz as f64;
            }
        }
        Ok(OccupancyMeasure {
            num_states: ns,
            num_actions: na,
            horizon: hz,
            per_step,
            average,
        })
    }

    /// Backward induction; deterministic policy, ties to the lowest action.
    pub fn plan(&self, p: &TransitionTable) -> Result<(TimePolicy, f64)> {
        self.check_transition(p)?;
        let (ns, na, hz) = (self.num_states, self.num_actions, self.horizon);
        let mut choice = vec![0usize; hz * ns];
        let mut next = vec![0.0; ns];
        for h in (0..hz).rev() {
            let mut cur = vec![0.0; ns];
            for s in 0..ns {
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0;
                for a in 0..na {
                    let ev: f64 = p.row(s, a).iter().zip(&next).map(|(p, v)| p * v).sum();
                    let q = self.reward(s, a) + ev;
                    if q > best + 1e-12 {
                        best = q;
                        best_a = a;
                    }
                }
                cur[s] = best;
                choice[h * ns + s] = best_a;
            }
            next = cur;
        }
        let value = self
            .initial_dist
            .iter()
            .zip(&next)
            .map(|(d, v)| d * v)
            .sum();
        Ok((TimePolicy::deterministic(ns, na, hz, &choice), value))
    }

    pub fn with_transition(&self, p: TransitionTable) -> Result<TabularMdp> {
        self.check_transition(&p)?;
        Ok(TabularMdp {
            task: self.clone(),
            transition: p,
        })
    }
}

/// Horizon-indexed stochastic policy `π_h(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDoc", into = "PolicyDoc")]
pub struct TimePolicy {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDoc {
    action_probs: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<PolicyDoc> for TimePolicy {
    type Error = Error;
    fn try_from(doc: PolicyDoc) -> Result<Self> {
        let hz = doc.action_probs.len();
        let ns = doc.action_probs.first().map_or(0, |x| x.len());
        let na = doc
            .action_probs
            .first()
            .and_then(|x| x.first())
            .map_or(0, |x| x.len());
        let mut flat = Vec::with_capacity(hz * ns * na);
        for step in &doc.action_probs {
            check_dim("policy states", ns, step.len())?;
            for row in step {
                check_dim("policy actions", na, row.len())?;
                flat.extend_from_slice(row);
            }
        }
        TimePolicy::from_flat(ns, na, hz, flat)
    }
}

impl From<TimePolicy> for PolicyDoc {
    fn from(p: TimePolicy) -> Self {
        let action_probs = (0..p.horizon)
            .map(|h| (0..p.num_states).map(|s| p.row(h, s).to_vec()).collect())
            .collect();
        PolicyDoc { action_probs }
    }
}

impl TimePolicy {
    pub fn from_flat(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        probs: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(param("dims", "policy dimensions must be positive"));
        }
        check_dim("policy", horizon * num_states * num_actions, probs.len())?;
        let pi = Self {
            num_states,
            num_actions,
            horizon,
            probs,
        };
        for h in 0..horizon {
            for s in 0..num_states {
                check_simplex(|| format!("pi_{h}(.|s={s})"), pi.row(h, s), SIMPLEX_TOL)?;
            }
        }
        Ok(pi)
    }

    pub fn uniform(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            probs: vec![1.0 / num_actions as f64; horizon * num_states * num_actions],
        }
    }

    /// `choice[h * num_states + s]` is the action taken.
    pub fn deterministic(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        choice: &[usize],
    ) -> Self {
        assert_eq!(choice.len(), horizon * num_states);
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (i, &a) in choice.iter().enumerate() {
            probs[i * num_actions + a] = 1.0;
        }
        Self {
            num_states,
            num_actions,
            horizon,
            probs,
        }
    }

    /// Argmax rounding per `(h, s)`, lowest action on ties.
    pub fn greedy(&self) -> Self {
        let na = self.num_actions;
        let choice: Vec<usize> = self
            .probs
            .chunks(na)
            .map(|row| {
                let mut best = 0;
                for a in 1..na {
                    if row[a] > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
        Self::deterministic(self.num_states, na, self.horizon, &choice)
    }

    /// Same stationary rule at every step.
    pub fn stationary(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        rule: &[f64],
    ) -> Result<Self> {
        check_dim("stationary policy", num_states * num_actions, rule.len())?;
        Self::from_flat(num_states, num_actions, horizon, rule.repeat(horizon))
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.probs[(h * self.num_states + s) * self.num_actions + a]
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let k = (h * self.num_states + s) * self.num_actions;
        &self.probs[k..k + self.num_actions]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.probs
    }

    /// Smallest action probability anywhere.
    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_stationary(&self) -> bool {
        let block = self.num_states * self.num_actions;
        self.probs.chunks(block).all(|c| c == &self.probs[..block])
    }
}

/// `d_t(s,a)` for each step and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    pub per_step: Vec<f64>,
    pub average: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn step(&self, h: usize) -> &[f64] {
        let k = self.num_states * self.num_actions;
        &self.per_step[h * k..(h + 1) * k]
    }

    #[inline]
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.average[s * self.num_actions + a]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// State marginal of the average occupancy.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.average
            .chunks(self.num_actions)
            .map(|c| c.iter().sum())
            .collect()
    }
}

/// `V_h(s)`, `Q_h(s,a)`, `A_h(s,a)` and the scalar value.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTriple {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    v: Vec<f64>,
    q: Vec<f64>,
    adv: Vec<f64>,
    pub value: f64,
}

impl ValueTriple {
    /// Advantage-only triple (`V = Q = 0`), for driving [`npg_step`] directly.
    pub fn from_advantage(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        adv: Vec<f64>,
    ) -> Result<Self> {
        check_dim("advantage", horizon * num_states * num_actions, adv.len())?;
        if adv.iter().any(|a| !a.is_finite()) {
            return Err(param("advantage", "entries must be finite"));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            v: vec![0.0; horizon * num_states],
            q: vec![0.0; adv.len()],
            adv,
            value: 0.0,
        })
    }

    #[inline]
    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.num_states + s]
    }
    #[inline]
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[(h * self.num_states + s) * self.num_actions + a]
    }
    #[inline]
    pub fn advantage(&self, h: usize, s: usize, a: usize) -> f64 {
        self.adv[(h * self.num_states + s) * self.num_actions + a]
    }
    pub fn advantage_row(&self, h: usize, s: usize) -> &[f64] {
        let k = (h * self.num_states + s) * self.num_actions;
        &self.adv[k..k + self.num_actions]
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// A task with its transition model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDoc", into = "MdpDoc")]
pub struct TabularMdp {
    pub task: Task,
    pub transition: TransitionTable,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct MdpDoc {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub initial_dist: Vec<f64>,
}

impl TryFrom<MdpDoc> for TabularMdp {
    type Error = Error;
    fn try_from(d: MdpDoc) -> Result<Self> {
        let transition = TransitionTable::from_nested(&d.transition)?;
        check_dim("num_states", d.num_states, transition.num_states())?;
        check_dim("num_actions", d.num_actions, transition.num_actions())?;
        check_dim("reward rows", d.num_states, d.reward.len())?;
        let mut reward = Vec::with_capacity(d.num_states * d.num_actions);
        for row in &d.reward {
            check_dim("reward actions", d.num_actions, row.len())?;
            reward.extend_from_slice(row);
        }
        let task = Task::new(
            d.num_states,
            d.num_actions,
            d.horizon,
            reward,
            d.initial_dist,
        )?;
        task.with_transition(transition)
    }
}

impl From<TabularMdp> for MdpDoc {
    fn from(m: TabularMdp) -> Self {
        MdpDoc {
            num_states: m.task.num_states,
            num_actions: m.task.num_actions,
            horizon: m.task.horizon,
            transition: m.transition.to_nested(),
            reward: m
                .task
                .reward
                .chunks(m.task.num_actions)
                .map(|c| c.to_vec())
                .collect(),
            initial_dist: m.task.initial_dist.clone(),
        }
    }
}

impl TabularMdp {
    pub fn new(task: Task, transition: TransitionTable) -> Result<Self> {
        task.with_transition(transition)
    }
    pub fn num_states(&self) -> usize {
        self.task.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.task.num_actions
    }
    pub fn horizon(&self) -> usize {
        self.task.horizon
    }
}

pub fn evaluate_policy(mdp: &TabularMdp, policy: &TimePolicy) -> Result<ValueTriple> {
    mdp.task.evaluate(&mdp.transition, policy)
}

pub fn occupancy(mdp: &TabularMdp, policy: &TimePolicy) -> Result<OccupancyMeasure> {
    mdp.task.occupancy(&mdp.transition, policy)
}

pub fn plan_optimal(mdp: &TabularMdp) -> Result<(TimePolicy, f64)> {
    mdp.task.plan(&mdp.transition)
}

/// `Σ |p − q|`, in `[0, 2]` for distributions.
pub fn l1_model_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dim("distribution", p.len(), q.len())?;
    check_simplex(|| "p".into(), p, 1e-9)?;
    check_simplex(|| "q".into(), q, 1e-9)?;
    Ok(l1(p, q))
}

#[inline]
pub(crate) fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// `(|V_P − V_P̂|, H² E_{d^π_P} ‖P − P̂‖₁)` for two models sharing reward and `d0`.
pub fn simulation_gap_bound(
    mdp_true: &TabularMdp,
    mdp_alt: &TabularMdp,
    policy: &TimePolicy,
) -> Result<(f64, f64)> {
    if mdp_true.task != mdp_alt.task {
        return Err(Error::SharedTaskMismatch);
    }
    let task = &mdp_true.task;
    let gap = (task.value(&mdp_true.transition, policy)?
        - task.value(&mdp_alt.transition, policy)?)
    .abs();
    let d = task.occupancy(&mdp_true.transition, policy)?;
    let mut expected = 0.0;
    for s in 0..task.num_states {
        for a in 0..task.num_actions {
            let w = d.at(s, a);
            if w > 0.0 {
                expected += w * l1(mdp_true.transition.row(s, a), mdp_alt.transition.row(s, a));
            }
        }
    }
    let h = task.horizon as f64;
    Ok((gap, h * h * expected))
}

/// Whether the multiplicative update uses the step's own advantage or the
/// step-averaged one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpgForm {
    #[default]
    PerStep,
    Shared,
}

/// `π'_h(a|s) ∝ π_h(a|s) exp(η A_h(s,a))`.
pub fn npg_step(policy: &TimePolicy, advantage: &ValueTriple, eta: f64) -> Result<TimePolicy> {
    npg_step_with(policy, advantage, eta, NpgForm::PerStep)
}

pub fn npg_step_with(
    policy: &TimePolicy,
    advantage: &ValueTriple,
    eta: f64,
    form: NpgForm,
) -> Result<TimePolicy> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(param("eta", format!("must be finite and >= 0, got {eta}")));
    }
    check_dim("horizon", policy.horizon, advantage.horizon)?;
    check_dim("num_states", policy.num_states, advantage.num_states)?;
    check_dim("num_actions", policy.num_actions, advantage.num_actions)?;
    let (ns, na, hz) = (policy.num_states, policy.num_actions, policy.horizon);
    let mut out = policy.probs.clone();
    let mut step_adv = vec![0.0; na];
    for h in 0..hz {
        for s in 0..ns {
            match form {
                NpgForm::PerStep => step_adv.copy_from_slice(advantage.advantage_row(h, s)),
                NpgForm::Shared => {
                    step_adv.iter_mut().for_each(|x| *x = 0.0);
                    for k in 0..hz {
                        for (x, a) in step_adv.iter_mut().zip(advantage.advantage_row(k, s)) {
                            *x += a / hz as f64;
                        }
                    }
                }
            }
            let row = &mut out[(h * ns + s) * na..(h * ns + s + 1) * na];
            // subtract the max exponent so exp never overflows
            let shift = step_adv
                .iter()
                .zip(row.iter())
                .filter(|(_, p)| **p > 0.0)
                .map(|(a, _)| eta * a)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, a) in row.iter_mut().zip(&step_adv) {
                if *p > 0.0 {
                    *p *= (eta * a - shift).exp();
                    z += *p;
                }
            }
            row.iter_mut().for_each(|p| *p /= z);
        }
    }
    Ok(TimePolicy {
        num_states: ns,
        num_actions: na,
        horizon: hz,
        probs: out,
    })
}

/// Both sides of the performance difference identity:
/// `V^{π'} − V^{π}` and `Σ_h E_{d^{π'}_h}[A^{π}_h]`.
pub fn performance_difference(
    mdp: &TabularMdp,
    pi_new: &TimePolicy,
    pi_old: &TimePolicy,
) -> Result<(f64, f64)> {
    let old = evaluate_policy(mdp, pi_old)?;
    let new_value = mdp.task.value(&mdp.transition, pi_new)?;
    let d = occupancy(mdp, pi_new)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut rhs = 0.0;
    for h in 0..mdp.horizon() {
        let step = d.step(h);
        for s in 0..ns {
            for a in 0..na {
                rhs += step[s * na + a] * old.advantage(h, s, a);
            }
        }
    }
    Ok((new_value - old.value, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(horizon: usize) -> TabularMdp {
        // 0 -> 1 -> 2 -> 2 deterministic, single action
        let mut p = vec![0.0; 3 * 3];
        p[1] = 1.0;
        p[3 + 2] = 1.0;
        p[6 + 2] = 1.0;
        let t = TransitionTable::from_flat(3, 1, p).unwrap();
        let task = Task::new(3, 1, horizon, vec![0.5, 0.25, 1.0], vec![1.0, 0.0, 0.0]).unwrap();
        task.with_transition(t).unwrap()
    }

    #[test]
    fn reward_saturation() {
        let t = TransitionTable::uniform(2, 2);
        let one = Task::new(2, 2, 3, vec![1.0; 4], vec![0.5, 0.5]).unwrap();
        let zero = Task::new(2, 2, 3, vec![0.0; 4], vec![0.5, 0.5]).unwrap();
        let pi = TimePolicy::uniform(2, 2, 3);
        assert!((one.value(&t, &pi).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(zero.value(&t, &pi).unwrap(), 0.0);
    }

    #[test]
    fn chain_occupancy_puts_one_over_h_on_visited_pairs() {
        let m = chain(3);
        let pi = TimePolicy::uniform(3, 1, 3);
        let d = occupancy(&m, &pi).unwrap();
        for s in 0..3 {
            assert!((d.at(s, 0) - 1.0 / 3.0).abs() < 1e-12);
        }
        let v = evaluate_policy(&m, &pi).unwrap();
        assert!((v.value - 1.75).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors_name_the_axis() {
        let m = chain(3);
        let pi = TimePolicy::uniform(3, 1, 2);
        match evaluate_policy(&m, &pi) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "horizon"),
            other => panic!("unexpected {other:?}"),
        }
        let pi = TimePolicy::uniform(2, 1, 3);
        assert!(matches!(
            occupancy(&m, &pi),
            Err(Error::Dimension {
                axis: "num_states",
                ..
            })
        ));
    }

    #[test]
    fn planning_ties_and_bandit() {
        let t = TransitionTable::uniform(2, 3);
        let zero = Task::new(2, 3, 2, vec![0.0; 6], vec![0.5, 0.5]).unwrap();
        let (pi, v) = zero.plan(&t).unwrap();
        assert_eq!(v, 0.0);
        for h in 0..2 {
            for s in 0..2 {
                assert_eq!(pi.row(h, s), &[1.0, 0.0, 0.0]);
            }
        }
        let bandit =
            Task::new(2, 3, 1, vec![0.2, 0.9, 0.5, 0.2, 0.9, 0.5], vec![0.3, 0.7]).unwrap();
        let (pi, v) = bandit.plan(&t).unwrap();
        assert!((v - 0.9).abs() < 1e-12);
        assert_eq!(pi.row(0, 0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_model_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(l1_model_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!((l1_model_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap() - 0.5).abs() < 1e-15);
        assert!(l1_model_distance(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn npg_closed_form() {
        // single state, two actions, uniform, A = (+1, -1)
        let t = TransitionTable::from_flat(1, 2, vec![1.0, 1.0]).unwrap();
        let task = Task::new(1, 2, 1, vec![1.0, 0.0], vec![1.0]).unwrap();
        let pi = TimePolicy::uniform(1, 2, 1);
        let vt = task.evaluate(&t, &pi).unwrap();
        assert!((vt.advantage(0, 0, 0) - 0.5).abs() < 1e-15);
        // rewards (1,0) give A = (0.5,-0.5); eta=0.2 gives the same exponent as A=(1,-1), eta=0.1
        let next = npg_step(&pi, &vt, 0.2).unwrap();
        let e = 0.1f64.exp();
        let expected = e / (e + (-0.1f64).exp());
        assert!((next.prob(0, 0, 0) - expected).abs() < 1e-14);
        assert_eq!(npg_step(&pi, &vt, 0.0).unwrap(), pi);
        assert!(npg_step(&pi, &vt, -0.1).is_err());
    }

    #[test]
    fn simulation_lemma_requires_shared_task() {
        let a = chain(3);
        let mut b = a.clone();
        b.task = Task::new(3, 1, 3, vec![0.0; 3], vec![1.0, 0.0, 0.0]).unwrap();
        let pi = TimePolicy::uniform(3, 1, 3);
        assert_eq!(
            simulation_gap_bound(&a, &b, &pi),
            Err(Error::SharedTaskMismatch)
        );
        assert_eq!(simulation_gap_bound(&a, &a, &pi).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn mdp_document_roundtrip_and_validation() {
        let m = chain(2);
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"num_states\"") && s.contains("\"initial_dist\""));
        let back: TabularMdp = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = s.replacen("[0.0,1.0,0.0]", "[0.0,0.9,0.0]", 1);
        let err = serde_json::from_str::<TabularMdp>(&bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("s=0,a=0"), "{err}");
    }
}
