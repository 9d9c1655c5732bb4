//! Standard and entropy-regularized Bellman operators, greedy improvement,
//! and the exact modified policy iteration (MPI) loop.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mdp::{
    dot, entropy_unchecked, exact_policy_value, q_from_v_unchecked, Policy, QFunction, TabularMdp,
    ValueFunction,
};

/// Number of evaluation backups per MPI iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalDepth {
    Steps(usize),
    /// Exact evaluation (policy iteration).
    Infinite,
}

impl Serialize for EvalDepth {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            EvalDepth::Steps(m) => serializer.serialize_u64(*m as u64),
            EvalDepth::Infinite => serializer.serialize_str("infinity"),
        }
    }
}

impl<'de> Deserialize<'de> for EvalDepth {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Steps(usize),
            Symbol(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Steps(m) => Ok(EvalDepth::Steps(m)),
            Repr::Symbol(s) if s == "infinity" || s == "inf" => Ok(EvalDepth::Infinite),
            Repr::Symbol(s) => Err(D::Error::custom(format!("unknown evaluation depth `{s}`"))),
        }
    }
}

/// How `greedy_policy` resolves exact ties in `Q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestActionIndex,
    HighestActionIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpiConfig {
    pub m: EvalDepth,
    pub max_iterations: usize,
    /// Stop when the sup-norm change between iterates falls below this.
    pub convergence_tol: f64,
    pub tie_break: TieBreak,
    /// Ignore `convergence_tol` and always run `max_iterations` iterations.
    pub run_to_max: bool,
}

impl Default for MpiConfig {
    fn default() -> Self {
        Self {
            m: EvalDepth::Steps(1),
            max_iterations: 1000,
            convergence_tol: 1e-10,
            tie_break: TieBreak::LowestActionIndex,
            run_to_max: false,
        }
    }
}

impl MpiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be > 0".into()));
        }
        if self.m == EvalDepth::Steps(0) {
            return Err(Error::InvalidConfig("evaluation depth must be >= 1".into()));
        }
        Ok(())
    }

    pub(crate) fn should_stop(&self, change: f64) -> bool {
        !self.run_to_max && change < self.convergence_tol
    }
}

fn check_inputs(mdp: &TabularMdp, pi: Option<&Policy>, v: &ValueFunction) -> Result<()> {
    check_len("value function", mdp.n_states(), v.len())?;
    if let Some(pi) = pi {
        pi.check_against(mdp)?;
    }
    Ok(())
}

/// `[T^pi v](s) = <pi(.|s), Q_v(s,.)>`.
pub fn apply_bellman(mdp: &TabularMdp, pi: &Policy, v: &ValueFunction) -> Result<ValueFunction> {
    check_inputs(mdp, Some(pi), v)?;
    let q = q_from_v_unchecked(mdp, v);
    Ok(ValueFunction(
        (0..mdp.n_states())
            .map(|s| dot(pi.row(s), q.row(s)))
            .collect(),
    ))
}

/// `m` consecutive applications of `T^pi`.
pub fn apply_bellman_n(
    mdp: &TabularMdp,
    pi: &Policy,
    v: &ValueFunction,
    m: usize,
) -> Result<ValueFunction> {
    let mut out = v.clone();
    for _ in 0..m {
        out = apply_bellman(mdp, pi, &out)?;
    }
    Ok(out)
}

/// `[T* v](s) = max_a Q_v(s,a)`.
pub fn bellman_optimality(mdp: &TabularMdp, v: &ValueFunction) -> Result<ValueFunction> {
    check_inputs(mdp, None, v)?;
    let q = q_from_v_unchecked(mdp, v);
    Ok(ValueFunction(
        q.rows()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    ))
}

/// Deterministic member of the greedy set `G(v)`.
pub fn greedy_policy(mdp: &TabularMdp, v: &ValueFunction) -> Result<Policy> {
    greedy_policy_with(mdp, v, TieBreak::default())
}

pub fn greedy_policy_with(mdp: &TabularMdp, v: &ValueFunction, tie: TieBreak) -> Result<Policy> {
    check_inputs(mdp, None, v)?;
    let q = q_from_v_unchecked(mdp, v);
    Ok(greedy_from_q(&q, tie))
}

pub fn greedy_from_q(q: &QFunction, tie: TieBreak) -> Policy {
    let actions: Vec<usize> = q.rows().map(|row| argmax(row, tie)).collect();
    Policy::deterministic(&actions, q.n_actions())
}

fn argmax(row: &[f64], tie: TieBreak) -> usize {
    let mut best = 0;
    for (a, &x) in row.iter().enumerate().skip(1) {
        let better = match tie {
            TieBreak::LowestActionIndex => x > row[best],
            TieBreak::HighestActionIndex => x >= row[best],
        };
        if better {
            best = a;
        }
    }
    best
}

/// Entropy-bonus backup `<pi, Q_v> + alpha * H(pi)` per state.
///
/// The bonus is added (maximum-entropy convention) so that the maximizer
/// over `pi` is the Boltzmann policy `softmax(Q_v / alpha)`.
pub fn regularized_bellman(
    mdp: &TabularMdp,
    pi: &Policy,
    v: &ValueFunction,
    alpha: f64,
) -> Result<ValueFunction> {
    check_inputs(mdp, Some(pi), v)?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidParameter {
            requirement: ">= 0",
            value: alpha,
        });
    }
    let q = q_from_v_unchecked(mdp, v);
    Ok(ValueFunction(
        (0..mdp.n_states())
            .map(|s| regularized_backup(q.row(s), pi.row(s), alpha))
            .collect(),
    ))
}

#[inline]
pub(crate) fn regularized_backup(q_row: &[f64], pi_row: &[f64], alpha: f64) -> f64 {
    let base = dot(pi_row, q_row);
    if alpha == 0.0 {
        base
    } else {
        base + alpha * entropy_unchecked(pi_row)
    }
}

/// One iteration of MPI: the improved policy and the resulting value.
#[derive(Clone, Debug, PartialEq)]
pub struct MpiStep {
    pub policy: Policy,
    pub value: ValueFunction,
}

/// Exact MPI: `pi_{t+1} in G(V_t)`, `V_{t+1} = (T^{pi_{t+1}})^m V_t`.
/// Returns the iterates `t = 1..=N`.
pub fn run_mpi(mdp: &TabularMdp, config: &MpiConfig, v0: &ValueFunction) -> Result<Vec<MpiStep>> {
    mdp.ensure_valid()?;
    config.validate()?;
    check_len("initial value", mdp.n_states(), v0.len())?;
    let mut v = v0.clone();
    let mut steps = Vec::new();
    for _ in 0..config.max_iterations {
        let policy = greedy_policy_with(mdp, &v, config.tie_break)?;
        let next = evaluate(mdp, &policy, &v, config.m)?;
        let change = next.sup_distance(&v);
        v = next;
        steps.push(MpiStep {
            policy,
            value: v.clone(),
        });
        if config.should_stop(change) {
            break;
        }
    }
    Ok(steps)
}

/// `(T^pi)^m v`, or `V^pi` for infinite depth.
pub fn evaluate(
    mdp: &TabularMdp,
    pi: &Policy,
    v: &ValueFunction,
    depth: EvalDepth,
) -> Result<ValueFunction> {
    match depth {
        EvalDepth::Steps(m) => apply_bellman_n(mdp, pi, v, m),
        EvalDepth::Infinite => exact_policy_value(mdp, pi),
    }
}

/// `V*` by exact policy iteration.
pub fn optimal_value(mdp: &TabularMdp) -> Result<ValueFunction> {
    let config = MpiConfig {
        m: EvalDepth::Infinite,
        max_iterations: 10_000,
        convergence_tol: 1e-300,
        ..MpiConfig::default()
    };
    let v0 = ValueFunction::constant(mdp.n_states(), -mdp.value_bound());
    let steps = run_mpi(mdp, &config, &v0)?;
    let last = steps
        .last()
        .ok_or_else(|| Error::Numerical("policy iteration produced no iterate".into()))?;
    // Policy iteration can cycle between equal-value policies on exact
    // ties; finish with value-iteration sweeps from the last iterate.
    let mut v = last.value.clone();
    for _ in 0..10_000 {
        let next = bellman_optimality(mdp, &v)?;
        let change = next.sup_distance(&v);
        v = next;
        if change <= 1e-15 * v.sup_norm().max(1.0) {
            break;
        }
    }
    Ok(v)
}
