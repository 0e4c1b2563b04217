use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use offline_rl::config::{ExperimentConfig, Scenario, ScenarioDoc};
use offline_rl::coverage::coverage_report;
use offline_rl::cppo::cppo_optimize;
use offline_rl::data::{sample_dataset, OfflineDataset};
use offline_rl::estimation::{build_version_space, mle_finite};
use offline_rl::experiments::run_experiment;
use offline_rl::pspo::{posterior_update, pspo_run, ModelPrior};
use offline_rl::verify::verify_all;

#[derive(Parser, Debug)]
#[command(
    name = "offline-rl",
    version,
    about = "Pessimistic offline RL on tabular MDPs"
)]
struct Cli {
    /// Experiment / scenario config (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the config's scenario and write `scenario.json`.
    GenMdp,
    /// Sample an offline dataset from a scenario file.
    GenData {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// MLE, version space and max-min policy search on one dataset.
    RunCppo {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Version-space radius; defaults to the config threshold rule.
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Posterior sampling policy optimization on one dataset.
    RunPspo {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `uniform`, `degenerate` or `dirichlet:<alpha>`.
        #[arg(long, default_value = "uniform")]
        prior: String,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Coverage coefficients of a scenario's comparator.
    Coverage {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run the experiment described by `--config`.
    Experiment,
    /// Run the invariant suite; exit code 1 on any failure.
    Verify,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this subcommand")?;
    let mut cfg =
        ExperimentConfig::from_path(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let doc: ScenarioDoc = serde_json::from_reader(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
    .with_context(|| format!("parsing {}", path.display()))?;
    Ok(Scenario::from_doc(doc)?)
}

fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(OfflineDataset::read_jsonl(BufReader::new(f))?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Largest step below the `1/(2H)` limit used when `--eta` is absent.
fn default_eta(horizon: usize) -> f64 {
    0.9 / (2.0 * horizon as f64)
}

fn run(cli: &Cli) -> Result<bool> {
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::GenMdp => {
            let cfg = load_config(cli)?;
            let scenario = cfg.scenario.build(cfg.seed)?;
            write_json(&cli.out.join("scenario.json"), &scenario.to_doc())?;
        }
        Command::GenData { scenario, n } => {
            let sc = load_scenario(scenario)?;
            let seed = cli.seed.unwrap_or(0);
            let data = sample_dataset(&sc.truth, &sc.rho, *n, seed)?;
            let path = cli.out.join("dataset.jsonl");
            data.write_jsonl(BufWriter::new(File::create(&path)?))?;
            info!("wrote {} records to {}", data.n(), path.display());
        }
        Command::RunCppo {
            scenario,
            dataset,
            xi,
            iterations,
            eta,
        } => {
            let sc = load_scenario(scenario)?;
            let data = load_dataset(dataset)?;
            let class = sc.class()?;
            let xi = match xi {
                Some(x) => *x,
                None => sc.xi(&load_config(cli)?.algorithm.threshold, data.n())?,
            };
            let mle = mle_finite(class, &data)?;
            let vs = build_version_space(class, mle, &data, xi)?;
            let task = sc.task();
            let res = cppo_optimize(
                class,
                &vs.member_indices,
                task,
                *iterations,
                eta.unwrap_or(default_eta(task.horizon())),
            )?;
            let v_true = task.value(&sc.truth.transition, &res.policy)?;
            std::fs::write(cli.out.join("cppo_trajectory.csv"), res.trajectory_csv())?;
            write_json(
                &cli.out.join("cppo.json"),
                &serde_json::json!({
                    "policy": res.policy,
                    "pessimistic_value": res.pessimistic_value,
                    "worst_model_index": res.worst_model_index,
                    "best_iteration": res.best_iteration,
                    "version_space": vs,
                    "value_under_truth": v_true,
                    "gap": sc.comparator_value - v_true,
                }),
            )?;
            println!(
                "pessimistic value {:.6}, true value {v_true:.6}, |M_D| = {}",
                res.pessimistic_value,
                vs.len()
            );
        }
        Command::RunPspo {
            scenario,
            dataset,
            prior,
            iterations,
            eta,
        } => {
            let sc = load_scenario(scenario)?;
            let data = load_dataset(dataset)?;
            let task = sc.task();
            let prior = match prior.as_str() {
                "uniform" => {
                    let class = sc.class()?.clone();
                    let k = class.len();
                    ModelPrior::discrete(class, vec![1.0 / k as f64; k])?
                }
                "degenerate" => ModelPrior::degenerate(sc.class()?.clone()),
                other => match other.strip_prefix("dirichlet:") {
                    Some(a) => ModelPrior::symmetric_dirichlet(
                        task.num_states(),
                        task.num_actions(),
                        a.parse().with_context(|| format!("bad dirichlet alpha {a:?}"))?,
                    )?,
                    None => bail!("unknown prior {other:?}; expected uniform, degenerate or dirichlet:<alpha>"),
                },
            };
            let post = posterior_update(&prior, &data)?;
            let seed = cli.seed.unwrap_or(0);
            let run = pspo_run(
                &post,
                task,
                *iterations,
                eta.unwrap_or(default_eta(task.horizon())),
                seed,
                Some(&sc.truth.transition),
            )?;
            std::fs::write(cli.out.join("pspo.csv"), run.to_csv())?;
            let best = run.best_value_under_truth().unwrap_or(f64::NAN);
            write_json(
                &cli.out.join("pspo.json"),
                &serde_json::json!({
                    "final_policy": run.final_policy(),
                    "sampled_models": run.sampled_models,
                    "best_iterate_gap": sc.comparator_value - best,
                }),
            )?;
            println!("best-iterate gap {:.6}", sc.comparator_value - best);
        }
        Command::Coverage { scenario } => {
            let sc = load_scenario(scenario)?;
            let report = coverage_report(sc.class()?, &sc.comparator, &sc.truth, &sc.rho, None)?;
            std::fs::write(
                cli.out.join("coverage_ratios.csv"),
                report.ratio_csv(sc.task().num_actions()),
            )?;
            write_json(&cli.out.join("coverage.json"), &report)?;
            println!(
                "C = {:.4}, C† = {:.4}, C̄ = {:.4}, C_d0 = {:.4}",
                report.density_ratio_c,
                report.refined_c_dagger,
                report.rel_cond_number,
                report.c_d0
            );
        }
        Command::Experiment => {
            let mut cfg = load_config(cli)?;
            cfg.output.dir = Some(cli.out.clone());
            let out = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Command::Verify => {
            let report = verify_all(cli.seed.unwrap_or(0));
            print!("{}", report.to_text());
            write_json(&cli.out.join("verify.json"), &report)?;
            return Ok(report.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OFFLINE_RL_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
