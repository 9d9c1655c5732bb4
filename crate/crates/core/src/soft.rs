//! Entropy-regularized (maximum-entropy) robust policy iteration.
//!
//! The soft adversarial backup in a state is
//!
//! ```text
//! min { <p, Q> + alpha * H(p) : D_KL(p || pi) <= eps }.
//! ```
//!
//! Writing `H(p) = -D_KL(p || pi) - <p, log pi>` turns the objective into
//! `<p, Q'> - alpha * D_KL(p || pi)` with `Q' = Q - alpha * log pi`. Since the
//! plain robust value `f(k)` of `Q'` at radius `k` is non-increasing, the
//! minimum sits on the boundary `D_KL = eps` and equals `f(eps) - alpha * eps`
//! whenever a minimizer of `<p, Q'>` with exactly that divergence exists. So
//! the soft backup reuses the 1-d dual of [`crate::robust`] on `Q'`; the
//! reported multiplier is `lambda' + alpha`, where `lambda'` is the
//! multiplier of the shifted problem.

use serde::{Deserialize, Serialize};

use crate::bellman::{self, EvalDepth, MpiConfig, MpiStep};
use crate::error::{check_len, Error, Result};
use crate::mdp::{
    check_distribution, entropy_unchecked, kl_unchecked, q_from_v_unchecked, Policy, QFunction,
    TabularMdp, ValueFunction,
};
use crate::robust::{
    drive, solve_dual, BackupEstimator, DualRegime, DualSolution, RobustConfig, RunTrace, Scheme,
    UncertaintyRadii,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftConfig {
    /// Exploration temperature `alpha > 0`.
    pub alpha: f64,
    pub robust: RobustConfig,
    pub mpi: MpiConfig,
}

impl Default for SoftConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            robust: RobustConfig::default(),
            mpi: MpiConfig::default(),
        }
    }
}

impl SoftConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        self.robust.validate()?;
        self.mpi.validate()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            requirement: "alpha > 0",
            value: alpha,
        })
    }
}

/// `softmax(c * q)` with a max shift.
fn tilted_softmax(q_row: &[f64], c: f64) -> Vec<f64> {
    let shift = q_row
        .iter()
        .map(|&q| c * q)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = q_row.iter().map(|&q| (c * q - shift).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// One row of the Boltzmann policy `softmax(Q / alpha)`.
pub fn boltzmann_row(q_row: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("Q row"));
    }
    Ok(tilted_softmax(q_row, 1.0 / alpha))
}

/// `pi(a|s) ∝ exp(Q(s, a) / alpha)`.
pub fn boltzmann_policy(q: &QFunction, alpha: f64) -> Result<Policy> {
    check_alpha(alpha)?;
    let probs = q
        .rows()
        .flat_map(|row| tilted_softmax(row, 1.0 / alpha))
        .collect();
    Ok(Policy::from_flat_unchecked(
        q.n_states(),
        q.n_actions(),
        probs,
    ))
}

/// `alpha * log sum_a exp(Q(a) / alpha)`, the maximum of
/// `<p, Q> + alpha * H(p)` over the simplex.
pub fn soft_value(q_row: &[f64], alpha: f64) -> f64 {
    let m = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = q_row.iter().map(|&q| ((q - m) / alpha).exp()).sum();
    m + alpha * s.ln()
}

/// Rows `∝ exp((1/alpha - 1/lambda(s)) Q(s, ·))`: the adversarial
/// re-weighting of the Boltzmann policy.
pub fn soft_adversarial_policy(q: &QFunction, alpha: f64, lambda: &[f64]) -> Result<Policy> {
    check_alpha(alpha)?;
    check_len("lambda", q.n_states(), lambda.len())?;
    if let Some(&bad) = lambda.iter().find(|l| !(**l > 0.0)) {
        return Err(Error::InvalidParameter {
            requirement: "lambda > 0",
            value: bad,
        });
    }
    let probs = q
        .rows()
        .zip(lambda)
        .flat_map(|(row, &l)| tilted_softmax(row, 1.0 / alpha - 1.0 / l))
        .collect();
    Ok(Policy::from_flat_unchecked(
        q.n_states(),
        q.n_actions(),
        probs,
    ))
}

/// Per-state soft adversarial backup.
pub fn soft_worst_case(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    alpha: f64,
    cfg: &RobustConfig,
) -> Result<DualSolution> {
    check_len("pi row", q_row.len(), pi_row.len())?;
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("Q row"));
    }
    check_distribution(pi_row)?;
    check_alpha(alpha)?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter {
            requirement: "eps >= 0",
            value: eps,
        });
    }
    Ok(solve_soft(q_row, pi_row, eps, alpha, cfg))
}

pub(crate) fn solve_soft(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    alpha: f64,
    cfg: &RobustConfig,
) -> DualSolution {
    if eps == 0.0 {
        let value = bellman::regularized_backup(q_row, pi_row, alpha);
        return DualSolution {
            lambda_star: cfg.lambda_max,
            dual_value: -value,
            robust_value: value,
            realized_kl: 0.0,
            adversary: pi_row.to_vec(),
            regime: DualRegime::NoAdversary,
        };
    }

    let shifted: Vec<f64> = q_row
        .iter()
        .zip(pi_row)
        .map(|(&q, &p)| if p > 0.0 { q - alpha * p.ln() } else { q })
        .collect();
    let c = shifted
        .iter()
        .zip(pi_row)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&q, _)| q)
        .fold(f64::INFINITY, f64::min);
    // Ties in Q' are detected with a tolerance: for a Boltzmann prior Q' is
    // constant up to rounding.
    let tie = 1e-12 * c.abs().max(1.0);
    let argmin: Vec<usize> = (0..q_row.len())
        .filter(|&a| pi_row[a] > 0.0 && shifted[a] <= c + tie)
        .collect();
    let mass: f64 = argmin.iter().map(|&a| pi_row[a]).sum();
    let kl_at_min = (-mass.ln()).max(0.0);

    if eps < kl_at_min {
        let sol = solve_dual(&shifted, pi_row, eps, cfg);
        let value = sol.robust_value - alpha * eps;
        return DualSolution {
            lambda_star: sol.lambda_star + alpha,
            dual_value: -value,
            robust_value: value,
            ..sol
        };
    }

    let vertex = *argmin
        .iter()
        .min_by(|&&a, &&b| pi_row[a].total_cmp(&pi_row[b]))
        .expect("argmin set is non-empty");
    let kl_at_vertex = -pi_row[vertex].ln();
    let one_hot: Vec<f64> = (0..q_row.len())
        .map(|a| if a == vertex { 1.0 } else { 0.0 })
        .collect();

    if eps <= kl_at_vertex {
        let adversary = blend_to_radius(pi_row, &argmin, eps);
        let value = c - alpha * eps;
        return DualSolution {
            lambda_star: alpha,
            dual_value: -value,
            robust_value: value,
            realized_kl: kl_unchecked(&adversary, pi_row),
            adversary,
            regime: DualRegime::SupportMinimum,
        };
    }

    let support: Vec<usize> = (0..q_row.len()).filter(|&a| pi_row[a] > 0.0).collect();
    if support.len() <= MAX_ENUMERATED_SUPPORT {
        return enumerate_faces(q_row, pi_row, &shifted, &support, eps, alpha, tie);
    }

    // Too many faces to enumerate. Weak duality with multipliers mu in
    // [0, alpha] gives min_a (Q(a) - mu log pi(a)) - mu eps, concave in mu.
    let bound_at = |mu: f64| -> f64 {
        q_row
            .iter()
            .zip(pi_row)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&q, &p)| q - mu * p.ln())
            .fold(f64::INFINITY, f64::min)
            - mu * eps
    };
    let (mut a, mut b) = (0.0, alpha);
    while b - a > 1e-12 * alpha.max(1.0) {
        let x1 = b - INV_PHI * (b - a);
        let x2 = a + INV_PHI * (b - a);
        if bound_at(x1) < bound_at(x2) {
            a = x1;
        } else {
            b = x2;
        }
    }
    let candidates = [
        (0.0, bound_at(0.0)),
        (a, bound_at(a)),
        (alpha, c - alpha * eps),
    ];
    let (mu, value) = candidates
        .into_iter()
        .fold((0.0, f64::NEG_INFINITY), |best, cand| {
            if cand.1 > best.1 {
                cand
            } else {
                best
            }
        });
    DualSolution {
        lambda_star: mu,
        dual_value: -value,
        robust_value: value,
        realized_kl: kl_at_vertex,
        adversary: one_hot,
        regime: DualRegime::LowerBound,
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Largest support for which [`enumerate_faces`] runs (`2^k` faces).
const MAX_ENUMERATED_SUPPORT: usize = 12;

/// Moves from `pi` restricted to `face` towards the least likely vertex of
/// `face` until the divergence from `pi` reaches `eps`.
fn blend_to_radius(pi_row: &[f64], face: &[usize], eps: f64) -> Vec<f64> {
    let mass: f64 = face.iter().map(|&a| pi_row[a]).sum();
    let vertex = *face
        .iter()
        .min_by(|&&a, &&b| pi_row[a].total_cmp(&pi_row[b]))
        .expect("face is non-empty");
    let blend = |t: f64| -> Vec<f64> {
        (0..pi_row.len())
            .map(|a| {
                let restricted = if face.contains(&a) {
                    pi_row[a] / mass
                } else {
                    0.0
                };
                let corner = if a == vertex { 1.0 } else { 0.0 };
                (1.0 - t) * restricted + t * corner
            })
            .collect()
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kl_unchecked(&blend(mid), pi_row) <= eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    blend(lo)
}

/// Exact minimum when the radius exceeds what the minimizers of `<p, Q'>`
/// can use. The objective is concave, so the minimum sits at a vertex in
/// the ball or on the sphere `D_KL = eps`; stationarity on the sphere
/// restricted to a face `B` gives `p ∝ pi_B exp(-t Q')` for some real `t`
/// (of either sign), or any point of `B` when `Q'` is constant there.
fn enumerate_faces(
    q_row: &[f64],
    pi_row: &[f64],
    shifted: &[f64],
    support: &[usize],
    eps: f64,
    alpha: f64,
    tie: f64,
) -> DualSolution {
    let n = q_row.len();
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut consider = |p: Vec<f64>, lambda: f64| {
        let value = bellman::regularized_backup(q_row, &p, alpha);
        if best.as_ref().is_none_or(|b| value < b.0) {
            best = Some((value, p, lambda));
        }
    };

    for mask in 1u32..(1 << support.len()) {
        let face: Vec<usize> = support
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, &a)| a)
            .collect();
        if face.len() == 1 {
            let a = face[0];
            if -pi_row[a].ln() <= eps {
                let mut vertex = vec![0.0; n];
                vertex[a] = 1.0;
                consider(vertex, alpha);
            }
            continue;
        }
        let mass: f64 = face.iter().map(|&a| pi_row[a]).sum();
        if -mass.ln() > eps {
            continue;
        }
        let (lo_q, hi_q) = face
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &a| {
                (l.min(shifted[a]), h.max(shifted[a]))
            });
        if hi_q - lo_q <= tie {
            let smallest = face.iter().map(|&a| pi_row[a]).fold(1.0, f64::min);
            if -smallest.ln() >= eps {
                consider(blend_to_radius(pi_row, &face, eps), alpha);
            }
            continue;
        }
        let tilt = |t: f64| -> Vec<f64> {
            let top = face
                .iter()
                .map(|&a| -t * shifted[a])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut p = vec![0.0; n];
            for &a in &face {
                p[a] = pi_row[a] * (-t * shifted[a] - top).exp();
            }
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            p
        };
        for sign in [1.0, -1.0] {
            let kl_at = |t: f64| kl_unchecked(&tilt(sign * t), pi_row);
            let mut hi = 1.0;
            while kl_at(hi) < eps && hi < 1e12 {
                hi *= 2.0;
            }
            if kl_at(hi) < eps {
                continue;
            }
            let mut lo = 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if kl_at(mid) <= eps {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let lambda = if lo > 0.0 {
                alpha + 1.0 / (sign * lo)
            } else {
                alpha
            };
            consider(tilt(sign * lo), lambda);
        }
    }

    let (value, adversary, lambda_star) = best.expect("pi itself is a candidate face");
    DualSolution {
        lambda_star,
        dual_value: -value,
        robust_value: value,
        realized_kl: kl_unchecked(&adversary, pi_row),
        adversary,
        regime: DualRegime::Enumerated,
    }
}

/// `min_{p in U_eps(pi)} <p, Q_v> + alpha * H(p)` per state.
pub fn soft_adversarial_bellman(
    mdp: &TabularMdp,
    pi: &Policy,
    v: &ValueFunction,
    radii: &UncertaintyRadii,
    soft_cfg: &SoftConfig,
) -> Result<(ValueFunction, Vec<DualSolution>)> {
    check_alpha(soft_cfg.alpha)?;
    pi.check_against(mdp)?;
    check_len("value function", mdp.n_states(), v.len())?;
    check_len("radii", mdp.n_states(), radii.0.len())?;
    radii.validate()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("value function"));
    }
    let q = q_from_v_unchecked(mdp, v);
    let solutions: Vec<DualSolution> = (0..mdp.n_states())
        .map(|s| {
            solve_soft(
                q.row(s),
                pi.row(s),
                radii.0[s],
                soft_cfg.alpha,
                &soft_cfg.robust,
            )
        })
        .collect();
    let values = solutions.iter().map(|d| d.robust_value).collect();
    Ok((ValueFunction(values), solutions))
}

fn binary_entropy(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        -t * t.ln() - (1.0 - t) * (1.0 - t).ln()
    }
}

/// Upper bound on `regularized_bellman - soft_adversarial_bellman` in a
/// state with radius `eps`: the Pinsker term for `<p, Q>` plus a continuity
/// bound on the entropy, `alpha * (T log(A - 1) + h(T))` with
/// `T = min(sqrt(eps / 2), 1 - 1/A)` the total-variation radius.
pub fn soft_gap_bound(mdp: &TabularMdp, v: &ValueFunction, eps_s: f64, alpha: f64) -> f64 {
    let na = mdp.n_actions() as f64;
    let tv = (0.5 * eps_s).sqrt().min(1.0 - 1.0 / na);
    let entropy_gap = if mdp.n_actions() > 1 {
        tv * (na - 1.0).ln() + binary_entropy(tv)
    } else {
        0.0
    };
    crate::robust::pinsker_gap_bound(mdp, v, eps_s) + alpha * entropy_gap
}

/// Exact value of `pi` under the entropy-bonus reward `r + alpha * H(pi)`.
pub fn regularized_policy_value(
    mdp: &TabularMdp,
    pi: &Policy,
    alpha: f64,
) -> Result<ValueFunction> {
    pi.check_against(mdp)?;
    let na = mdp.n_actions();
    let mut reward = Vec::with_capacity(mdp.n_states() * na);
    for s in 0..mdp.n_states() {
        let bonus = alpha * entropy_unchecked(pi.row(s));
        reward.extend(mdp.rewards(s).iter().map(|r| r + bonus));
    }
    crate::mdp::exact_policy_value(&mdp.with_rewards(reward)?, pi)
}

/// Fixed point of `V = alpha * log sum_a exp(Q_V / alpha)`.
pub fn soft_optimal_value(mdp: &TabularMdp, alpha: f64) -> Result<ValueFunction> {
    check_alpha(alpha)?;
    mdp.ensure_valid()?;
    let ns = mdp.n_states();
    let soft_backup = |v: &ValueFunction| -> ValueFunction {
        let q = q_from_v_unchecked(mdp, v);
        ValueFunction((0..ns).map(|s| soft_value(q.row(s), alpha)).collect())
    };
    // Soft policy iteration converges in few steps; plain sweeps then settle
    // the last bits.
    let mut v = ValueFunction::zeros(ns);
    for _ in 0..200 {
        let pi = boltzmann_policy(&q_from_v_unchecked(mdp, &v), alpha)?;
        let next = regularized_policy_value(mdp, &pi, alpha)?;
        let change = next.sup_distance(&v);
        v = next;
        if change <= 1e-13 * v.sup_norm().max(1.0) {
            break;
        }
    }
    for _ in 0..100_000 {
        let next = soft_backup(&v);
        let change = next.sup_distance(&v);
        v = next;
        if change <= 1e-15 * v.sup_norm().max(1.0) {
            return Ok(v);
        }
    }
    Ok(v)
}

struct Soft<'a> {
    cfg: &'a SoftConfig,
}

impl Scheme for Soft<'_> {
    fn improve(&self, mdp: &TabularMdp, v: &ValueFunction) -> Result<Policy> {
        boltzmann_policy(&q_from_v_unchecked(mdp, v), self.cfg.alpha)
    }

    fn robust_backup(
        &self,
        mdp: &TabularMdp,
        pi: &Policy,
        v: &ValueFunction,
        radii: &UncertaintyRadii,
    ) -> Result<(ValueFunction, Vec<DualSolution>)> {
        soft_adversarial_bellman(mdp, pi, v, radii, self.cfg)
    }

    fn exact_backup(
        &self,
        mdp: &TabularMdp,
        pi: &Policy,
        v: &ValueFunction,
    ) -> Result<ValueFunction> {
        bellman::regularized_bellman(mdp, pi, v, self.cfg.alpha)
    }

    fn exact_value(&self, mdp: &TabularMdp, pi: &Policy) -> Result<ValueFunction> {
        regularized_policy_value(mdp, pi, self.cfg.alpha)
    }

    fn bonus(&self, p: &[f64]) -> f64 {
        self.cfg.alpha * entropy_unchecked(p)
    }

    fn optimal(&self, mdp: &TabularMdp) -> Result<ValueFunction> {
        soft_optimal_value(mdp, self.cfg.alpha)
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.cfg.alpha)
    }
}

/// Soft DR-MPI: `pi_{t+1} = softmax(Q_{V~_t} / alpha)`, then `m` soft
/// adversarial backups. The comparison trajectory uses the entropy-bonus
/// operator and `V*` is the soft optimum.
pub fn run_soft_dr_mpi(
    mdp: &TabularMdp,
    soft_cfg: &SoftConfig,
    v0: &ValueFunction,
    seed: u64,
) -> Result<RunTrace> {
    run_soft_dr_mpi_with(mdp, soft_cfg, v0, seed, None)
}

/// [`run_soft_dr_mpi`] with the evaluation backups replaced by `estimator`;
/// the entropy bonus of the adversary is added to each estimate.
pub fn run_soft_dr_mpi_with(
    mdp: &TabularMdp,
    soft_cfg: &SoftConfig,
    v0: &ValueFunction,
    seed: u64,
    estimator: Option<&mut dyn BackupEstimator>,
) -> Result<RunTrace> {
    soft_cfg.validate()?;
    drive(
        &Soft { cfg: soft_cfg },
        mdp,
        &soft_cfg.robust,
        &soft_cfg.mpi,
        v0,
        seed,
        estimator,
    )
}

/// Regularized MPI without an adversary: Boltzmann improvement followed by
/// `m` entropy-bonus backups (or exact regularized evaluation).
pub fn run_regularized_mpi(
    mdp: &TabularMdp,
    alpha: f64,
    config: &MpiConfig,
    v0: &ValueFunction,
) -> Result<Vec<MpiStep>> {
    check_alpha(alpha)?;
    mdp.ensure_valid()?;
    config.validate()?;
    check_len("initial value", mdp.n_states(), v0.len())?;
    let mut v = v0.clone();
    let mut steps = Vec::new();
    for _ in 0..config.max_iterations {
        let policy = boltzmann_policy(&q_from_v_unchecked(mdp, &v), alpha)?;
        let next = match config.m {
            EvalDepth::Steps(m) => {
                let mut w = v.clone();
                for _ in 0..m {
                    w = bellman::regularized_bellman(mdp, &policy, &w, alpha)?;
                }
                w
            }
            EvalDepth::Infinite => regularized_policy_value(mdp, &policy, alpha)?,
        };
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boltzmann_examples() {
        let q = QFunction::from_rows(vec![vec![0.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let pi = boltzmann_policy(&q, 1.0).unwrap();
        assert!((pi.row(0)[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((pi.row(0)[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(pi.row(1), &[0.5, 0.5]);

        let cold = boltzmann_policy(&q, 1e-9).unwrap();
        assert!((cold.row(0)[1] - 1.0).abs() < 1e-8);
        assert!(boltzmann_policy(&q, 0.0).is_err());
    }

    #[test]
    fn soft_adversarial_policy_examples() {
        let q = QFunction::from_rows(vec![vec![0.0, 1.0]]).unwrap();
        let p = soft_adversarial_policy(&q, 1.0, &[0.5]).unwrap();
        assert!((p.row(0)[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        let p = soft_adversarial_policy(&q, 1.0, &[1.0]).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let far = soft_adversarial_policy(&q, 0.7, &[1e12]).unwrap();
        let boltz = boltzmann_policy(&q, 0.7).unwrap();
        assert!((far.row(0)[0] - boltz.row(0)[0]).abs() < 1e-12);
        assert!(soft_adversarial_policy(&q, 1.0, &[0.0]).is_err());
    }

    #[test]
    fn soft_value_is_the_entropy_bonus_maximum() {
        let q = [0.3, -0.2, 1.1];
        let alpha = 0.4;
        let pi = boltzmann_row(&q, alpha).unwrap();
        let attained = bellman::regularized_backup(&q, &pi, alpha);
        assert!((soft_value(&q, alpha) - attained).abs() < 1e-14);
    }

    #[test]
    fn zero_radius_is_the_regularized_backup() {
        let mdp = crate::mdp::tests::two_state();
        let pi = Policy::from_rows(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let v = ValueFunction(vec![0.5, -1.0]);
        let cfg = SoftConfig {
            alpha: 0.3,
            ..SoftConfig::default()
        };
        let (soft, _) =
            soft_adversarial_bellman(&mdp, &pi, &v, &UncertaintyRadii::zeros(2), &cfg).unwrap();
        assert_eq!(
            soft,
            bellman::regularized_bellman(&mdp, &pi, &v, 0.3).unwrap()
        );
    }

    #[test]
    fn boltzmann_prior_loses_alpha_eps() {
        let q = [0.2, 0.9, -0.4];
        let alpha = 0.5;
        let pi = boltzmann_row(&q, alpha).unwrap();
        let sol = solve_soft(&q, &pi, 0.05, alpha, &RobustConfig::default());
        assert!((sol.robust_value - (soft_value(&q, alpha) - alpha * 0.05)).abs() < 1e-12);
        assert!((sol.realized_kl - 0.05).abs() < 1e-9);
        let attained = bellman::regularized_backup(&q, &sol.adversary, alpha);
        assert!((attained - sol.robust_value).abs() < 1e-9);
    }

    #[test]
    fn huge_radius_reaches_the_best_vertex() {
        let q = [0.2, 0.9, -0.4];
        let pi = [0.2, 0.3, 0.5];
        let sol = solve_soft(&q, &pi, 20.0, 0.5, &RobustConfig::default());
        assert_eq!(sol.regime, DualRegime::Enumerated);
        // Every vertex is feasible, so the minimum is min Q.
        assert!((sol.robust_value + 0.4).abs() < 1e-9);
    }

    #[test]
    fn gap_bound_vanishes_with_one_action() {
        let mdp =
            TabularMdp::from_tables(0.5, 1.0, vec![vec![1.0]], vec![vec![vec![1.0]]]).unwrap();
        let v = ValueFunction(vec![2.0]);
        let g = soft_gap_bound(&mdp, &v, 0.3, 0.7);
        assert!((g - crate::robust::pinsker_gap_bound(&mdp, &v, 0.3)).abs() < 1e-15);
    }

    #[test]
    fn soft_optimum_is_a_fixed_point() {
        let mdp = crate::mdp::tests::two_state();
        let v = soft_optimal_value(&mdp, 0.2).unwrap();
        let q = q_from_v_unchecked(&mdp, &v);
        for s in 0..2 {
            assert!((soft_value(q.row(s), 0.2) - v[s]).abs() < 1e-12);
        }
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05f64..1.0, n).prop_map(|w| {
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
    }

    proptest! {
        #[test]
        fn boltzmann_is_shift_invariant(
            q in prop::collection::vec(-5.0f64..5.0, 4),
            shift in -100.0f64..100.0,
            alpha in 0.05f64..3.0,
        ) {
            let a = boltzmann_row(&q, alpha).unwrap();
            let shifted: Vec<f64> = q.iter().map(|x| x + shift).collect();
            let b = boltzmann_row(&shifted, alpha).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn soft_backup_is_feasible_and_below_nominal(
            q in prop::collection::vec(-2.0f64..2.0, 3),
            pi in dist(3),
            eps in 0.001f64..1.0,
            alpha in 0.05f64..1.0,
        ) {
            let sol = solve_soft(&q, &pi, eps, alpha, &RobustConfig::default());
            prop_assert!(sol.realized_kl <= eps + 1e-6);
            let nominal = bellman::regularized_backup(&q, &pi, alpha);
            prop_assert!(sol.robust_value <= nominal + 1e-12);
            let attained = bellman::regularized_backup(&q, &sol.adversary, alpha);
            prop_assert!(attained >= sol.robust_value - 1e-9);
        }
    }
}
