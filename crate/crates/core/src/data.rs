//! Offline distributions, dataset sampling and persistence.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::mdp::{l1, occupancy, TabularMdp, TimePolicy, TransitionTable};
use crate::models::{KnrModel, KnrScenario};
use crate::rng::stream;

const TABLE_TOL: f64 = 1e-12;
pub const STATIONARITY_TOL: f64 = 1e-6;

/// Explicit `ρ(s,a)`, optionally remembering the behavior policy it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDistribution {
    num_states: usize,
    num_actions: usize,
    table: Vec<f64>,
    behavior: Option<TimePolicy>,
    /// `‖ρ − ρP π_b‖₁`, set for behavior-form distributions.
    stationarity_residual: Option<f64>,
}

impl OfflineDistribution {
    pub fn from_table(num_states: usize, num_actions: usize, table: Vec<f64>) -> Result<Self> {
        check_dim("rho", num_states * num_actions, table.len())?;
        let sum: f64 = table.iter().sum();
        if table.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > TABLE_TOL {
            return Err(Error::InvalidDistribution {
                what: "rho".into(),
                detail: format!("sum {sum}, entries must be >= 0"),
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            table,
            behavior: None,
            stationarity_residual: None,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let k = num_states * num_actions;
        let table = crate::models::normalized_exact(vec![1.0; k]);
        Self::from_table(num_states, num_actions, table).expect("uniform table")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
    pub fn table(&self) -> &[f64] {
        &self.table
    }
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.table[s * self.num_actions + a]
    }
    pub fn behavior(&self) -> Option<&TimePolicy> {
        self.behavior.as_ref()
    }
    pub fn stationarity_residual(&self) -> Option<f64> {
        self.stationarity_residual
    }
    /// Warning flag only: desk-scale instances may be approximately stationary.
    pub fn is_stationary(&self) -> Option<bool> {
        self.stationarity_residual.map(|r| r <= STATIONARITY_TOL)
    }

    /// `E_ρ[f(s,a)]`.
    pub fn expect(&self, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
        let na = self.num_actions;
        self.table
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, w)| w * f(i / na, i % na))
            .sum()
    }
}

/// Average occupancy of `behavior` under the true model, as an explicit `ρ`.
pub fn occupancy_as_offline(
    mdp_true: &TabularMdp,
    behavior: &TimePolicy,
) -> Result<OfflineDistribution> {
    let d = occupancy(mdp_true, behavior)?;
    let table = crate::models::normalized_exact(d.average.clone());
    let mut rho =
        OfflineDistribution::from_table(mdp_true.num_states(), mdp_true.num_actions(), table)?;
    if behavior.is_stationary() {
        rho.stationarity_residual = Some(stationarity_residual(
            &mdp_true.transition,
            &behavior.as_flat()[..mdp_true.num_states() * mdp_true.num_actions()],
            &rho.table,
        ));
    }
    rho.behavior = Some(behavior.clone());
    Ok(rho)
}

/// Stationary `ρ(s)π_b(a|s)` of a stationary behavior rule, by power
/// iteration from the uniform state distribution.
pub fn stationary_offline(
    transition: &TransitionTable,
    rule: &[f64],
    horizon: usize,
    max_iter: usize,
) -> Result<OfflineDistribution> {
    let (ns, na) = (transition.num_states(), transition.num_actions());
    check_dim("behavior rule", ns * na, rule.len())?;
    let behavior = TimePolicy::stationary(ns, na, horizon, rule)?;
    let mut mu = vec![1.0 / ns as f64; ns];
    for _ in 0..max_iter {
        let next = step_state_marginal(transition, rule, &mu);
        let diff = l1(&next, &mu);
        mu = next;
        if diff < 1e-14 {
            break;
        }
    }
    let mut table = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            table[s * na + a] = mu[s] * rule[s * na + a];
        }
    }
    let table = crate::models::normalized_exact(table);
    let mut rho = OfflineDistribution::from_table(ns, na, table)?;
    rho.stationarity_residual = Some(stationarity_residual(transition, rule, &rho.table));
    rho.behavior = Some(behavior);
    Ok(rho)
}

fn step_state_marginal(p: &TransitionTable, rule: &[f64], mu: &[f64]) -> Vec<f64> {
    let (ns, na) = (p.num_states(), p.num_actions());
    let mut out = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let w = mu[s] * rule[s * na + a];
            if w > 0.0 {
                for (o, q) in out.iter_mut().zip(p.row(s, a)) {
                    *o += w * q;
                }
            }
        }
    }
    out
}

/// `‖ρ − ρ'‖₁` where `ρ'` is `ρ` pushed one step through `P` and `π_b`.
pub fn stationarity_residual(p: &TransitionTable, rule: &[f64], rho: &[f64]) -> f64 {
    let (ns, na) = (p.num_states(), p.num_actions());
    let mut next = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let w = rho[s * na + a];
            for (o, q) in next.iter_mut().zip(p.row(s, a)) {
                *o += w * q;
            }
        }
    }
    let mut pushed = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            pushed[s * na + a] = next[s] * rule[s * na + a];
        }
    }
    l1(&pushed, rho)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub sp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    num_states: usize,
    num_actions: usize,
    pub records: Vec<Transition>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    seed: u64,
    source: String,
    num_states: usize,
    num_actions: usize,
}

impl OfflineDataset {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        records: Vec<Transition>,
        provenance: Provenance,
    ) -> Result<Self> {
        for (i, t) in records.iter().enumerate() {
            if t.s >= num_states || t.sp >= num_states || t.a >= num_actions {
                return Err(param("record", format!("ids out of range at record {i}")));
            }
            if !(0.0..=1.0).contains(&t.r) {
                return Err(param(
                    "record",
                    format!("reward {} outside [0,1] at record {i}", t.r),
                ));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            records,
            provenance,
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn num_states(&self) -> usize {
        self.num_states
    }
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `N(s,a,s')`, flat in `(s,a,s')` order.
    pub fn transition_counts(&self) -> Vec<f64> {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut c = vec![0.0; ns * na * ns];
        for t in &self.records {
            c[(t.s * na + t.a) * ns + t.sp] += 1.0;
        }
        c
    }

    /// `N(s,a)`.
    pub fn pair_counts(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.num_states * self.num_actions];
        for t in &self.records {
            c[t.s * self.num_actions + t.a] += 1.0;
        }
        c
    }

    pub fn prefix(&self, n: usize) -> Self {
        Self {
            records: self.records[..n.min(self.records.len())].to_vec(),
            ..self.clone()
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            n: self.n(),
            seed: self.provenance.seed,
            source: self.provenance.source.clone(),
            num_states: self.num_states,
            num_actions: self.num_actions,
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for t in &self.records {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let head = lines
            .next()
            .ok_or(Error::EmptyDataset("missing header line"))??;
        let header: Header = serde_json::from_str(&head)?;
        let mut records = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<Transition>(&line)?);
        }
        check_dim("dataset n", header.n, records.len())?;
        Self::new(
            header.num_states,
            header.num_actions,
            records,
            Provenance {
                seed: header.seed,
                source: header.source,
            },
        )
    }
}

/// Cumulative-table sampler for a fixed discrete distribution.
pub(crate) struct Cdf(Vec<f64>);

impl Cdf {
    pub fn new(weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut c: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc / total
            })
            .collect();
        // rounding must never leave the last positive entry short of 1
        if let Some(last) = weights.iter().rposition(|&w| w > 0.0) {
            c[last..].iter_mut().for_each(|x| *x = f64::INFINITY);
        }
        Self(c)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.0.partition_point(|&c| c <= u)
    }
}

/// `n` i.i.d. records `(s,a) ∼ ρ`, `s' ∼ P*(·|s,a)`, `r = r(s,a)`.
pub fn sample_dataset(
    mdp_true: &TabularMdp,
    rho: &OfflineDistribution,
    n: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let (ns, na) = (mdp_true.num_states(), mdp_true.num_actions());
    check_dim("rho num_states", ns, rho.num_states)?;
    check_dim("rho num_actions", na, rho.num_actions)?;
    let mut rng = stream(seed, 0x0da7a);
    let pair = Cdf::new(&rho.table);
    let rows: Vec<Cdf> = (0..ns * na)
        .map(|i| Cdf::new(mdp_true.transition.row(i / na, i % na)))
        .collect();
    let records = (0..n)
        .map(|_| {
            let i = pair.sample(&mut rng);
            let (s, a) = (i / na, i % na);
            Transition {
                s,
                a,
                r: mdp_true.task.reward(s, a),
                sp: rows[i].sample(&mut rng),
            }
        })
        .collect();
    Ok(OfflineDataset {
        num_states: ns,
        num_actions: na,
        records,
        provenance: Provenance {
            seed,
            source: if rho.behavior.is_some() {
                "behavior_occupancy".into()
            } else {
                "explicit_rho".into()
            },
        },
    })
}

/// `(1/n) Σ_{(s,a)∈D} ‖p(·|s,a) − q(·|s,a)‖²₁`.
pub fn empirical_l1sq(
    dataset: &OfflineDataset,
    p: &TransitionTable,
    q: &TransitionTable,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("empirical average over no records"));
    }
    check_dim("num_states", p.num_states(), q.num_states())?;
    check_dim("num_actions", p.num_actions(), q.num_actions())?;
    check_dim("dataset num_states", p.num_states(), dataset.num_states)?;
    check_dim("dataset num_actions", p.num_actions(), dataset.num_actions)?;
    Ok(weighted_l1sq(&dataset.pair_counts(), p, q) / dataset.n() as f64)
}

/// `Σ_{s,a} w(s,a) ‖p(·|s,a) − q(·|s,a)‖²₁`.
pub fn weighted_l1sq(weights: &[f64], p: &TransitionTable, q: &TransitionTable) -> f64 {
    let na = p.num_actions();
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| {
            let d = l1(p.row(i / na, i % na), q.row(i / na, i % na));
            w * d * d
        })
        .sum()
}

/// Continuous-state record for KNR datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnrTransition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub sp: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnrDataset {
    pub records: Vec<KnrTransition>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnrHeader {
    n: usize,
    seed: u64,
    source: String,
}

impl KnrDataset {
    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &KnrHeader {
                n: self.n(),
                seed: self.provenance.seed,
                source: self.provenance.source.clone(),
            },
        )?;
        writeln!(w)?;
        for t in &self.records {
            serde_json::to_writer(&mut w, t)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let head = lines
            .next()
            .ok_or(Error::EmptyDataset("missing header line"))??;
        let header: KnrHeader = serde_json::from_str(&head)?;
        let mut records = Vec::with_capacity(header.n);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        check_dim("dataset n", header.n, records.len())?;
        Ok(Self {
            records,
            provenance: Provenance {
                seed: header.seed,
                source: header.source,
            },
        })
    }
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Offline KNR data: anchor pairs drawn from the scenario's `ρ`, states placed
/// at the anchors, `s' = W*φ + ζε`.
pub fn sample_knr_dataset(scenario: &KnrScenario, n: usize, seed: u64) -> KnrDataset {
    let mut rng = stream(seed, 0x0c4b);
    let model: &KnrModel = &scenario.model;
    let na = model.feature.num_actions;
    let cdf = Cdf::new(&scenario.rho);
    let records = (0..n)
        .map(|_| {
            let i = cdf.sample(&mut rng);
            let s = model.feature.anchors[i / na].clone();
            let a = i % na;
            let mean = model.mean_next(&model.w, &s, a);
            let sp = mean
                .iter()
                .map(|m| m + model.noise_sigma * std_normal(&mut rng))
                .collect();
            KnrTransition {
                r: scenario.reward(&s, a),
                s,
                a,
                sp,
            }
        })
        .collect();
    KnrDataset {
        records,
        provenance: Provenance {
            seed,
            source: "knr_anchor_rho".into(),
        },
    }
}
