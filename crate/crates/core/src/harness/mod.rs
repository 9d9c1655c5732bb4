//! Environments, sampled evaluation, experiment orchestration and reports.

pub mod envs;
pub mod noise;
pub mod plot;
pub mod verify;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bellman::MpiConfig;
use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp, ValueFunction};
use crate::robust::{
    run_dr_mpi_with, sample_index, write_records_csv_file, BackupEstimator, RobustConfig, RunTrace,
};
use crate::soft::{run_soft_dr_mpi_with, SoftConfig};

pub use envs::{generate_cliff_grid, generate_garnet, CliffGridSpec, GarnetSpec};
pub use noise::{sampled_bellman, BatchGrowth, NoiseMode, NoiseSpec, SampledBackup};
pub use plot::emit_svg_curves;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Garnet(GarnetSpec),
    CliffGrid(CliffGridSpec),
}

impl EnvSpec {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvSpec::Garnet(spec) => {
                let mdp = generate_garnet(spec)?;
                let n = mdp.n_states();
                Ok(Environment {
                    mdp,
                    start: None,
                    terminal: vec![false; n],
                    cliff: None,
                })
            }
            EnvSpec::CliffGrid(spec) => {
                let mdp = generate_cliff_grid(spec)?;
                Ok(Environment {
                    terminal: (0..mdp.n_states()).map(|s| spec.is_terminal(s)).collect(),
                    start: Some(spec.start()),
                    mdp,
                    cliff: Some(spec.clone()),
                })
            }
        }
    }
}

/// A generated MDP with the episode structure used by rollouts.
#[derive(Clone, Debug)]
pub struct Environment {
    pub mdp: TabularMdp,
    /// Fixed start state; `None` draws it uniformly.
    pub start: Option<usize>,
    pub terminal: Vec<bool>,
    cliff: Option<CliffGridSpec>,
}

impl Environment {
    pub fn is_trap(&self, s: usize) -> bool {
        self.cliff.as_ref().is_some_and(|c| c.is_trap(s))
    }

    /// Reward of an observed transition. The model's reward for the cliff
    /// grid is its expectation over the slip.
    pub fn realized_reward(&self, s: usize, a: usize, next: usize) -> f64 {
        match &self.cliff {
            Some(c) if !c.is_terminal(s) => {
                c.step_reward + if c.is_trap(next) { c.trap_penalty } else { 0.0 }
            }
            Some(_) => 0.0,
            None => self.mdp.reward(s, a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Mpi,
    DrMpi,
    SoftDrMpi,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialValue {
    Zero,
    /// `-R_max / (1 - gamma)` everywhere.
    #[default]
    Pessimistic,
}

fn default_rollouts() -> usize {
    100
}

fn default_horizon() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvSpec,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub mpi: MpiConfig,
    #[serde(default)]
    pub robust: RobustConfig,
    /// Temperature; required by `soft-dr-mpi` and rejected otherwise.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rollouts")]
    pub evaluation_rollouts: usize,
    #[serde(default = "default_horizon")]
    pub rollout_horizon: usize,
    #[serde(default)]
    pub initial_value: InitialValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.algorithm, self.alpha) {
            (Algorithm::SoftDrMpi, None) => {
                return Err(Error::InvalidConfig("soft-dr-mpi needs alpha".into()))
            }
            (Algorithm::Mpi | Algorithm::DrMpi, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "alpha is only used by soft-dr-mpi".into(),
                ))
            }
            _ => {}
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        self.mpi.validate()?;
        self.robust.validate()
    }

    /// SHA-256 of the canonical JSON form, without the output directory.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let bytes = serde_json::to_vec(&canonical)?;
        Ok(Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}

/// Return and length statistics of evaluation rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_length: f64,
    pub std_length: f64,
    /// Episodes that entered a trap state.
    pub trap_entries: usize,
}

impl RolloutStats {
    pub fn trap_frequency(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.trap_entries as f64 / self.episodes as f64
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Undiscounted rollouts of `policy`, ending at terminal states or after
/// `horizon` steps.
pub fn evaluate_policy(
    env: &Environment,
    policy: &Policy,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> RolloutStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let ns = env.mdp.n_states();
    let mut returns = Vec::with_capacity(episodes);
    let mut lengths = Vec::with_capacity(episodes);
    let mut trap_entries = 0;
    for _ in 0..episodes {
        let mut state = env.start.unwrap_or_else(|| rng.random_range(0..ns));
        let (mut total, mut steps, mut trapped) = (0.0, 0usize, false);
        while steps < horizon && !env.terminal[state] {
            let a = sample_index(policy.row(state), &mut rng);
            let next = sample_index(env.mdp.next_states(state, a), &mut rng);
            total += env.realized_reward(state, a, next);
            trapped |= env.is_trap(next);
            state = next;
            steps += 1;
        }
        returns.push(total);
        lengths.push(steps as f64);
        trap_entries += usize::from(trapped);
    }
    let (mean_return, std_return) = mean_std(&returns);
    let (mean_length, std_length) = mean_std(&lengths);
    RolloutStats {
        episodes,
        mean_return,
        std_return,
        mean_length,
        std_length,
        trap_entries,
    }
}

/// Runs the configured scheme on `env` without writing anything.
pub fn run_algorithm(cfg: &ExperimentConfig, env: &Environment) -> Result<RunTrace> {
    cfg.validate()?;
    let mdp = &env.mdp;
    let v0 = match cfg.initial_value {
        InitialValue::Zero => ValueFunction::zeros(mdp.n_states()),
        InitialValue::Pessimistic => ValueFunction::constant(mdp.n_states(), -mdp.value_bound()),
    };
    let mut sampler = cfg.noise.clone().map(SampledBackup::new).transpose()?;
    let estimator = sampler.as_mut().map(|s| s as &mut dyn BackupEstimator);
    match cfg.algorithm {
        Algorithm::Mpi => {
            let robust = RobustConfig {
                big_c: 0.0,
                ..cfg.robust.clone()
            };
            run_dr_mpi_with(mdp, &robust, &cfg.mpi, &v0, cfg.seed, estimator)
        }
        Algorithm::DrMpi => run_dr_mpi_with(mdp, &cfg.robust, &cfg.mpi, &v0, cfg.seed, estimator),
        Algorithm::SoftDrMpi => {
            let soft = SoftConfig {
                alpha: cfg.alpha.expect("validated"),
                robust: cfg.robust.clone(),
                mpi: cfg.mpi.clone(),
            };
            run_soft_dr_mpi_with(mdp, &soft, &v0, cfg.seed, estimator)
        }
    }
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_sup_loss: f64,
    pub safety_margin_min: f64,
    #[serde(rename = "E_N")]
    pub e_n: f64,
    pub iterations: usize,
    pub wall_seconds: f64,
    pub config_digest: String,
    pub evaluation: RolloutStats,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub trace: RunTrace,
    pub summary: Summary,
    pub out_dir: PathBuf,
}

/// Runs the experiment and writes `run.csv`, `summary.json` and
/// `curves.svg` to `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let started = Instant::now();
    let env = cfg.environment.build()?;
    let trace = run_algorithm(cfg, &env)?;
    let evaluation = evaluate_policy(
        &env,
        &trace.final_policy,
        cfg.evaluation_rollouts,
        cfg.rollout_horizon,
        cfg.seed,
    );

    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("run.csv");
    write_records_csv_file(&trace.records, &csv_path)?;
    emit_svg_curves(
        &csv_path,
        &["sup_loss", "E_N"],
        &out_dir.join("curves.svg"),
        true,
    )?;

    let last = trace.records.last();
    let summary = Summary {
        final_sup_loss: last.map_or(f64::NAN, |r| r.sup_loss),
        safety_margin_min: trace
            .records
            .iter()
            .map(|r| r.safety_margin_min)
            .fold(f64::INFINITY, f64::min),
        e_n: last.map_or(0.0, |r| r.e_n),
        iterations: trace.records.len(),
        wall_seconds: started.elapsed().as_secs_f64(),
        config_digest: cfg.digest()?,
        evaluation,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(ExperimentOutcome {
        trace,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}
