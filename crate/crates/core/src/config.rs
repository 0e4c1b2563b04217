//! Experiment configuration documents and scenario construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{stationary_offline, OfflineDistribution};
use crate::error::{Error, Result};
use crate::estimation::{ThresholdPolicy, ThresholdRule};
use crate::mdp::{NpgForm, TabularMdp, Task, TimePolicy, TransitionTable};
use crate::models::{
    make_finite_scenario, make_low_rank_class, make_partial_coverage_instance, make_segment_class,
    make_trap_class, random_task, FiniteModelClass, LowRankModelClass,
};
use crate::pspo::{ModelPosterior, ModelPrior, PosteriorSampler, SampledModel};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Gap,
    Separation,
    PspoTSweep,
    BayesGap,
    MleRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Cppo,
    Pspo,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteScenarioConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub class_size: usize,
    pub perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentScenarioConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub class_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialCoverageConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    #[serde(default = "default_eps_max")]
    pub eps_max: f64,
    #[serde(default = "default_eps_step")]
    pub eps_step: f64,
    /// Replace `ρ` by the uniform table (global coverage).
    #[serde(default)]
    pub full_coverage: bool,
}

fn default_eps_max() -> f64 {
    0.3
}
fn default_eps_step() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirichletScenarioConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowRankScenarioConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub dim: usize,
    pub num_phi: usize,
    pub num_mu: usize,
    #[serde(default)]
    pub num_signed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScenarioConfig {
    Finite(FiniteScenarioConfig),
    Segment(SegmentScenarioConfig),
    PartialCoverage(PartialCoverageConfig),
    Dirichlet(DirichletScenarioConfig),
    LowRank(LowRankScenarioConfig),
    /// Discrete prior with all mass on the finite scenario's truth.
    DegenerateFinite(FiniteScenarioConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub trials: usize,
    #[serde(default = "default_max_multiplier")]
    pub max_multiplier: f64,
}

fn default_max_multiplier() -> f64 {
    1e6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    pub iterations: usize,
    pub eta: f64,
    pub threshold: ThresholdPolicy,
    #[serde(default)]
    pub calibrate: Option<CalibrationConfig>,
    #[serde(default)]
    pub npg_form: NpgForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub t_grid: Vec<usize>,
    pub trials: usize,
    /// Inclusive index range of `n_grid` used for slope fits.
    #[serde(default)]
    pub slope_window: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub experiment: ExperimentKind,
    pub scenario: ScenarioConfig,
    pub algorithm: AlgorithmConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn config_err(path: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        detail: detail.into(),
    }
}

impl ExperimentConfig {
    /// TOML for `.toml` files, JSON otherwise. Errors carry the key path.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let cfg = if is_toml {
            Self::from_toml(&text)?
        } else {
            Self::from_json(&text)?
        };
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(text)
            .map_err(|e| config_err("<document>", e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| config_err(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| config_err(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sweep;
        if s.n_grid.is_empty() {
            return Err(config_err("sweep.n_grid", "must be non-empty"));
        }
        if s.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("sweep.n_grid", "must be strictly increasing"));
        }
        if s.t_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("sweep.t_grid", "must be strictly increasing"));
        }
        if self.experiment == ExperimentKind::PspoTSweep && s.t_grid.is_empty() {
            return Err(config_err("sweep.t_grid", "required for pspo_t_sweep"));
        }
        if s.trials == 0 {
            return Err(config_err("sweep.trials", "must be positive"));
        }
        if let Some((a, b)) = s.slope_window {
            if a >= b || b >= s.n_grid.len() {
                return Err(config_err(
                    "sweep.slope_window",
                    "need lo < hi < n_grid length",
                ));
            }
        }
        let h = self.scenario.horizon() as f64;
        let eta = self.algorithm.eta;
        if self.algorithm.kind != AlgorithmKind::Naive && !(eta > 0.0 && eta < 1.0 / (2.0 * h)) {
            return Err(config_err(
                "algorithm.eta",
                format!("{eta} must lie in (0, 1/(2H)) with H = {h}"),
            ));
        }
        self.algorithm
            .threshold
            .validate()
            .map_err(|e| config_err("algorithm.threshold", e.to_string()))?;
        if let Some(dir) = &self.output.dir {
            if let Some(parent) = dir.parent() {
                if !parent.as_os_str().is_empty() && !parent.exists() {
                    return Err(config_err(
                        "output.dir",
                        format!("parent {} does not exist", parent.display()),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl ScenarioConfig {
    pub fn horizon(&self) -> usize {
        match self {
            ScenarioConfig::Finite(c) | ScenarioConfig::DegenerateFinite(c) => c.horizon,
            ScenarioConfig::Segment(c) => c.horizon,
            ScenarioConfig::PartialCoverage(c) => c.horizon,
            ScenarioConfig::Dirichlet(c) => c.horizon,
            ScenarioConfig::LowRank(c) => c.horizon,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Scenario> {
        match self {
            ScenarioConfig::Finite(c) | ScenarioConfig::DegenerateFinite(c) => {
                let f = make_finite_scenario(
                    seed,
                    c.num_states,
                    c.num_actions,
                    c.horizon,
                    c.class_size,
                    c.perturbation,
                )?;
                let prior = matches!(self, ScenarioConfig::DegenerateFinite(_))
                    .then(|| ModelPrior::degenerate(f.class.clone()));
                Scenario::from_parts(f.truth_mdp(), Some(f.class), f.rho, None, prior, None)
            }
            ScenarioConfig::Segment(c) => {
                let class = make_segment_class(seed, c.num_states, c.num_actions, c.class_size)?;
                let mut rng = stream(seed, 11);
                let task = random_task(&mut rng, c.num_states, c.num_actions, c.horizon);
                let rho = OfflineDistribution::from_table(
                    c.num_states,
                    c.num_actions,
                    crate::models::normalized_exact(crate::rng::dirichlet(
                        &mut rng,
                        &vec![2.0; c.num_states * c.num_actions],
                    )),
                )?;
                let mdp = TabularMdp::new(task, class.truth().clone())?;
                Scenario::from_parts(mdp, Some(class), rho, None, None, None)
            }
            ScenarioConfig::PartialCoverage(c) => {
                let inst =
                    make_partial_coverage_instance(seed, c.num_states, c.num_actions, c.horizon)?;
                let class = make_trap_class(&inst, c.eps_max, c.eps_step)?;
                let rho = if c.full_coverage {
                    OfflineDistribution::uniform(c.num_states, c.num_actions)
                } else {
                    inst.rho.clone()
                };
                Scenario::from_parts(
                    inst.mdp.clone(),
                    Some(class),
                    rho,
                    Some(inst.comparator.clone()),
                    None,
                    None,
                )
            }
            ScenarioConfig::Dirichlet(c) => {
                let prior = ModelPrior::symmetric_dirichlet(c.num_states, c.num_actions, c.alpha)?;
                let mut rng = stream(seed, 12);
                let task = random_task(&mut rng, c.num_states, c.num_actions, c.horizon);
                let post = ModelPosterior {
                    belief: prior.clone(),
                    n: 0,
                    dataset_seed: None,
                };
                let SampledModel::Table(p) = PosteriorSampler::new(&post)?.sample(&mut rng) else {
                    unreachable!("dirichlet draws are tables")
                };
                let rho = OfflineDistribution::uniform(c.num_states, c.num_actions);
                Scenario::from_parts(
                    TabularMdp::new(task, p)?,
                    None,
                    rho,
                    None,
                    Some(prior),
                    None,
                )
            }
            ScenarioConfig::LowRank(c) => {
                let lr = make_low_rank_class(
                    seed,
                    c.num_states,
                    c.num_actions,
                    c.dim,
                    c.num_phi,
                    c.num_mu,
                    c.num_signed,
                )?;
                let mut rng = stream(seed, 13);
                let task = random_task(&mut rng, c.num_states, c.num_actions, c.horizon);
                let mdp = TabularMdp::new(task, lr.truth().clone())?;
                let rule = vec![1.0 / c.num_actions as f64; c.num_states * c.num_actions];
                let rho = stationary_offline(&mdp.transition, &rule, c.horizon, 100_000)?;
                Scenario::from_parts(mdp, Some(lr.as_finite_class()), rho, None, None, Some(lr))
            }
        }
    }
}

/// Everything the harness knows about a problem, truth included.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub truth: TabularMdp,
    pub class: Option<FiniteModelClass>,
    pub rho: OfflineDistribution,
    pub comparator: TimePolicy,
    pub comparator_value: f64,
    pub prior: Option<ModelPrior>,
    pub low_rank: Option<LowRankModelClass>,
}

impl Scenario {
    fn from_parts(
        truth: TabularMdp,
        class: Option<FiniteModelClass>,
        rho: OfflineDistribution,
        comparator: Option<TimePolicy>,
        prior: Option<ModelPrior>,
        low_rank: Option<LowRankModelClass>,
    ) -> Result<Self> {
        let comparator = match comparator {
            Some(c) => c,
            None => truth.task.plan(&truth.transition)?.0,
        };
        let comparator_value = truth.task.value(&truth.transition, &comparator)?;
        Ok(Self {
            truth,
            class,
            rho,
            comparator,
            comparator_value,
            prior,
            low_rank,
        })
    }

    pub fn task(&self) -> &Task {
        &self.truth.task
    }

    pub fn class(&self) -> Result<&FiniteModelClass> {
        self.class
            .as_ref()
            .ok_or_else(|| Error::Unsupported("scenario has no finite model class".into()))
    }

    /// Radius from the threshold rule at sample size `n`.
    pub fn xi(&self, policy: &ThresholdPolicy, n: usize) -> Result<f64> {
        let t = self.task();
        match policy.rule {
            ThresholdRule::Finite => Ok(policy.xi_finite(self.class()?.len(), n)),
            ThresholdRule::Tabular => Ok(policy.xi_tabular(t.num_states(), t.num_actions(), n)),
            ThresholdRule::LowRank => {
                let lr = self.low_rank.as_ref().ok_or_else(|| {
                    Error::Unsupported("low-rank rule needs a low-rank scenario".into())
                })?;
                Ok(policy.xi_low_rank(lr.phi_set.len(), lr.mu_set.len(), n))
            }
            ThresholdRule::Knr => Err(Error::Unsupported(
                "KNR rule applies to KNR scenarios only".into(),
            )),
        }
    }
}

/// On-disk form of a [`Scenario`] (the prior and low-rank factors are not kept).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub mdp: TabularMdp,
    /// `ρ(s,a)` flat in `(s, a)` order.
    pub rho: Vec<f64>,
    pub comparator: TimePolicy,
    #[serde(default)]
    pub class: Option<Vec<TransitionTable>>,
    #[serde(default)]
    pub truth_index: Option<usize>,
}

impl Scenario {
    pub fn to_doc(&self) -> ScenarioDoc {
        ScenarioDoc {
            mdp: self.truth.clone(),
            rho: self.rho.table().to_vec(),
            comparator: self.comparator.clone(),
            class: self.class.as_ref().map(|c| c.models.clone()),
            truth_index: self.class.as_ref().map(|c| c.truth_index),
        }
    }

    pub fn from_doc(doc: ScenarioDoc) -> Result<Self> {
        let (ns, na) = (doc.mdp.num_states(), doc.mdp.num_actions());
        let rho = OfflineDistribution::from_table(ns, na, doc.rho)?;
        let class = match (doc.class, doc.truth_index) {
            (Some(models), Some(t)) => Some(FiniteModelClass::new(models, t)?),
            (None, None) => None,
            _ => return Err(config_err("class", "class and truth_index go together")),
        };
        Self::from_parts(doc.mdp, class, rho, Some(doc.comparator), None, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
seed = 3
experiment = "gap"
[scenario]
family = "finite"
num_states = 3
num_actions = 2
horizon = 3
class_size = 4
perturbation = 0.5
[algorithm]
kind = "cppo"
iterations = 10
eta = 0.1
threshold = { rule = "finite", delta = 0.1 }
[sweep]
n_grid = [10, 20]
trials = 2
"#;

    #[test]
    fn parses_and_defaults() {
        let c = ExperimentConfig::from_toml(GOOD).unwrap();
        assert_eq!(c.algorithm.threshold.c1, 2.0);
        assert_eq!(c.algorithm.threshold.c2, std::f64::consts::E);
    }

    #[test]
    fn unknown_key_reports_path() {
        let bad = GOOD.replace("trials = 2", "trials = 2\nbogus = 1");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err();
        let Error::Config { path, detail } = err else {
            panic!("{err:?}")
        };
        assert!(path.contains("sweep"), "{path}: {detail}");
        let bad = GOOD.replace("eta = 0.1", "eta = 0.5");
        assert!(
            matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { path, .. }) if path == "algorithm.eta")
        );
        let bad = GOOD.replace("[10, 20]", "[20, 10]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn scenario_doc_roundtrip() {
        let c = ExperimentConfig::from_toml(GOOD).unwrap();
        let sc = c.scenario.build(1).unwrap();
        let text = serde_json::to_string(&sc.to_doc()).unwrap();
        let back = Scenario::from_doc(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.to_doc(), sc.to_doc());
        assert_eq!(back.comparator_value, sc.comparator_value);
    }

    #[test]
    fn json_too() {
        let c = ExperimentConfig::from_toml(GOOD).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }
}
