//! Quick self-checks against the oracles, run from the command line.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{klreg_dual_logsumexp, klreg_dual_taylor, shaped_mdp, variance_potential};
use crate::bellman::{greedy_policy, optimal_value, EvalDepth, MpiConfig};
use crate::error::Result;
use crate::harness::envs::{generate_garnet, GarnetSpec};
use crate::mdp::{kl_divergence, q_from_v, Policy, ValueFunction};
use crate::oracles::{brute_force_worst_case, GridOracleConfig};
use crate::robust::{optimal_lambda, run_dr_mpi, CounterMode, RobustConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Dual,
    Safety,
    Taylor,
    Shaping,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "dual" => Ok(Suite::Dual),
            "safety" => Ok(Suite::Safety),
            "taylor" => Ok(Suite::Taylor),
            "shaping" => Ok(Suite::Shaping),
            other => Err(format!(
                "unknown suite {other:?}; expected dual, safety, taylor or shaping"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{status} {}: {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let checks = match suite {
        Suite::Dual => dual_checks(seed)?,
        Suite::Safety => safety_checks(seed)?,
        Suite::Taylor => taylor_checks()?,
        Suite::Shaping => shaping_checks(seed)?,
    };
    Ok(VerifyReport {
        suite,
        seed,
        checks,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// A random distribution with entries bounded away from zero.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn dual_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = GridOracleConfig::default();
    let cfg = RobustConfig::default();
    let (mut worst_gap, mut worst_excess) = (0.0f64, f64::NEG_INFINITY);
    let instances = 20;
    for i in 0..instances {
        let n = 2 + i % 2;
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pi = random_distribution(&mut rng, n);
        for eps in [0.01, 0.05, 0.1, 0.5] {
            let sol = optimal_lambda(&q, &pi, eps, &cfg)?;
            let (oracle, _) = brute_force_worst_case(&q, &pi, eps, &grid)?;
            worst_gap = worst_gap.max((sol.robust_value - oracle).abs());
            worst_excess = worst_excess.max(kl_divergence(&sol.adversary, &pi)? - eps);
        }
    }
    Ok(vec![
        Check {
            name: "dual matches direct search".into(),
            passed: worst_gap <= 1e-5,
            detail: format!("{} instances, max gap {worst_gap:.3e}", instances * 4),
        },
        Check {
            name: "adversary inside the ball".into(),
            passed: worst_excess <= 1e-6,
            detail: format!("max KL - eps = {worst_excess:.3e}"),
        },
    ])
}

fn garnet(seed: u64) -> GarnetSpec {
    GarnetSpec {
        n_states: 20,
        n_actions: 5,
        branching: 3,
        sparsity: 0.0,
        gamma: 0.9,
        seed,
    }
}

fn safety_checks(seed: u64) -> Result<Vec<Check>> {
    let mpi = MpiConfig {
        m: EvalDepth::Steps(3),
        max_iterations: 100,
        run_to_max: true,
        ..MpiConfig::default()
    };
    let cfg = RobustConfig {
        counter_mode: CounterMode::Trajectory,
        ..RobustConfig::default()
    };
    let mut worst = f64::NEG_INFINITY;
    let runs = 5;
    for k in 0..runs {
        let mdp = generate_garnet(&garnet(seed.wrapping_add(k)))?;
        let v0 = ValueFunction::constant(mdp.n_states(), -mdp.value_bound());
        let trace = run_dr_mpi(&mdp, &cfg, &mpi, &v0, seed.wrapping_add(k))?;
        for r in &trace.records {
            for s in 0..mdp.n_states() {
                worst = worst
                    .max(r.value[s] - r.comparison[s])
                    .max(r.comparison[s] - trace.optimal[s] - 1e-8);
            }
        }
    }
    Ok(vec![Check {
        name: "robust <= exact <= optimal".into(),
        passed: worst <= 0.0,
        detail: format!("{runs} runs x 100 iterations, max violation {worst:.3e}"),
    }])
}

/// `|logsumexp - taylor|` at `lambda = 10^1 .. 10^3` for an asymmetric prior.
pub fn taylor_errors() -> Result<(Vec<f64>, Vec<f64>)> {
    let (q, mu) = ([0.0, 1.0], [0.75, 0.25]);
    let lambdas: Vec<f64> = [1.0, 1.5, 2.0, 2.5, 3.0]
        .iter()
        .map(|e| 10f64.powf(*e))
        .collect();
    let errors = lambdas
        .iter()
        .map(|&l| Ok((klreg_dual_logsumexp(&q, &mu, l)? - klreg_dual_taylor(&q, &mu, l)?).abs()))
        .collect::<Result<Vec<f64>>>()?;
    Ok((lambdas, errors))
}

fn taylor_checks() -> Result<Vec<Check>> {
    let (lambdas, errors) = taylor_errors()?;
    let slope = loglog_slope(&lambdas, &errors);
    Ok(vec![Check {
        name: "second-order remainder".into(),
        passed: slope <= -1.9,
        detail: format!("log-log slope {slope:.4}"),
    }])
}

/// Whether the greedy optimal policies of `mdp` and its variance-shaped
/// version agree in every state.
pub fn shaping_preserves_greedy(spec: &GarnetSpec, lambda_shape: f64) -> Result<bool> {
    let mdp = generate_garnet(spec)?;
    let v_star = optimal_value(&mdp)?;
    let q = q_from_v(&mdp, &v_star)?;
    let phi = variance_potential(
        &q,
        &Policy::uniform(mdp.n_states(), mdp.n_actions()),
        lambda_shape,
    )?;
    let shaped = shaped_mdp(&mdp, &phi)?;
    let original = greedy_policy(&mdp, &v_star)?;
    let shaped_policy = greedy_policy(&shaped, &optimal_value(&shaped)?)?;
    Ok(original.modes() == shaped_policy.modes())
}

fn shaping_checks(seed: u64) -> Result<Vec<Check>> {
    let runs = 5;
    let mut agree = 0;
    for k in 0..runs {
        if shaping_preserves_greedy(&garnet(seed.wrapping_add(k)), -1.0)? {
            agree += 1;
        }
    }
    Ok(vec![Check {
        name: "shaping keeps the greedy policy".into(),
        passed: agree == runs,
        detail: format!("{agree}/{runs} MDPs agree"),
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let xs = [1.0, 10.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
        assert!((loglog_slope(&xs, &ys) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("taylor".parse::<Suite>().unwrap(), Suite::Taylor);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn taylor_suite_passes() {
        assert!(run_suite(Suite::Taylor, 0).unwrap().all_passed());
    }
}
