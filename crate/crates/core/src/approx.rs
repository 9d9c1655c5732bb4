//! Approximations for continuous settings: the log-sum-exp conjugate of the
//! KL regularizer, its second-order (mean plus variance) form, variance
//! based reward shaping, and the delta-method variance of a critic under a
//! Gaussian policy.

use serde::{Deserialize, Serialize};

use crate::bellman;
use crate::error::{check_len, Error, Result};
use crate::mdp::{check_distribution, dot, Policy, QFunction, TabularMdp, ValueFunction};

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda != 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            requirement: "finite and != 0",
            value: lambda,
        })
    }
}

fn check_rows(q_row: &[f64], mu_row: &[f64]) -> Result<()> {
    check_len("mu row", q_row.len(), mu_row.len())?;
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("Q row"));
    }
    check_distribution(mu_row)
}

/// `lambda * log sum_a mu(a) exp(Q(a) / lambda)`: a smoothed maximum of `Q`
/// for `lambda > 0` and a smoothed minimum for `lambda < 0`.
pub fn klreg_dual_logsumexp(q_row: &[f64], mu_row: &[f64], lambda: f64) -> Result<f64> {
    check_rows(q_row, mu_row)?;
    check_lambda(lambda)?;
    let shift = q_row
        .iter()
        .zip(mu_row)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&q, _)| q / lambda)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: f64 = q_row
        .iter()
        .zip(mu_row)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&q, &m)| m * (q / lambda - shift).exp_m1())
        .sum();
    if w > -0.5 {
        return Ok(lambda * (shift + w.ln_1p()));
    }
    // Little mass on the largest term: the expm1 sum cancels near -1.
    let total: f64 = q_row
        .iter()
        .zip(mu_row)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&q, &m)| (m.ln() + q / lambda - shift).exp())
        .sum();
    Ok(lambda * (shift + total.ln()))
}

fn mean_and_variance(q_row: &[f64], mu_row: &[f64]) -> (f64, f64) {
    let mean = dot(mu_row, q_row);
    let var = q_row
        .iter()
        .zip(mu_row)
        .map(|(&q, &m)| m * (q - mean) * (q - mean))
        .sum();
    (mean, var)
}

/// `E_mu[Q] + Var_mu(Q) / (2 lambda)`.
pub fn klreg_dual_taylor(q_row: &[f64], mu_row: &[f64], lambda: f64) -> Result<f64> {
    check_rows(q_row, mu_row)?;
    check_lambda(lambda)?;
    let (mean, var) = mean_and_variance(q_row, mu_row);
    Ok(mean + var / (2.0 * lambda))
}

/// Bound on `|logsumexp - taylor|`: the third cumulant of any distribution
/// on an interval of width `w` is at most `w^3` in magnitude, so the
/// remainder is at most `w^3 / (6 lambda^2)`.
pub fn taylor_error_bound(q_row: &[f64], mu_row: &[f64], lambda: f64) -> f64 {
    let support = q_row.iter().zip(mu_row).filter(|(_, &m)| m > 0.0);
    let (lo, hi) = support.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&q, _)| {
        (lo.min(q), hi.max(q))
    });
    let width = (hi - lo).max(0.0);
    width.powi(3) / (6.0 * lambda * lambda)
}

/// A state potential `phi` and the shaping multiplier it was built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingPotential {
    pub phi: Vec<f64>,
    pub lambda_shape: f64,
}

impl ShapingPotential {
    pub fn new(phi: Vec<f64>, lambda_shape: f64) -> Result<Self> {
        check_lambda(lambda_shape)?;
        if phi.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("potential"));
        }
        Ok(Self { phi, lambda_shape })
    }

    pub fn zeros(n_states: usize) -> Self {
        Self {
            phi: vec![0.0; n_states],
            lambda_shape: -1.0,
        }
    }
}

/// Reward indexed by `(s, a, s')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapedReward {
    n_states: usize,
    n_actions: usize,
    table: Vec<f64>,
}

impl ShapedReward {
    pub fn get(&self, s: usize, a: usize, next: usize) -> f64 {
        self.table[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

/// `r(s, a) + gamma phi(s') - phi(s)`.
pub fn shaped_reward(mdp: &TabularMdp, phi: &ShapingPotential) -> Result<ShapedReward> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    check_len("potential", ns, phi.phi.len())?;
    let mut table = Vec::with_capacity(ns * na * ns);
    for s in 0..ns {
        for a in 0..na {
            let r = mdp.reward(s, a);
            table.extend((0..ns).map(|next| r + mdp.gamma() * phi.phi[next] - phi.phi[s]));
        }
    }
    Ok(ShapedReward {
        n_states: ns,
        n_actions: na,
        table,
    })
}

/// The MDP whose reward is the transition-averaged shaped reward
/// `r(s, a) + gamma E[phi(s')] - phi(s)`.
pub fn shaped_mdp(mdp: &TabularMdp, phi: &ShapingPotential) -> Result<TabularMdp> {
    check_len("potential", mdp.n_states(), phi.phi.len())?;
    let mut reward = Vec::with_capacity(mdp.n_states() * mdp.n_actions());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let expected_phi = dot(mdp.next_states(s, a), &phi.phi);
            reward.push(mdp.reward(s, a) + mdp.gamma() * expected_phi - phi.phi[s]);
        }
    }
    mdp.with_rewards(reward)
}

/// `phi(s) = Var_{a ~ mu(s)} Q(s, a) / (2 lambda)`.
pub fn variance_potential(
    q: &QFunction,
    mu: &Policy,
    lambda_shape: f64,
) -> Result<ShapingPotential> {
    check_lambda(lambda_shape)?;
    check_len("policy states", q.n_states(), mu.n_states())?;
    check_len("policy actions", q.n_actions(), mu.n_actions())?;
    let phi = q
        .rows()
        .zip(mu.rows())
        .map(|(q_row, mu_row)| mean_and_variance(q_row, mu_row).1 / (2.0 * lambda_shape))
        .collect();
    ShapingPotential::new(phi, lambda_shape)
}

/// `E_{a ~ mu, s' ~ P}[r(s, a, s') + gamma phi(s') - phi(s) + gamma v(s')]`,
/// summed term by term over the shaped table.
pub fn shaped_backup(
    mdp: &TabularMdp,
    v: &ValueFunction,
    mu: &Policy,
    phi: &ShapingPotential,
) -> Result<ValueFunction> {
    check_len("value function", mdp.n_states(), v.len())?;
    mu.check_against(mdp)?;
    let shaped = shaped_reward(mdp, phi)?;
    let gamma = mdp.gamma();
    let out = (0..mdp.n_states())
        .map(|s| {
            mu.row(s)
                .iter()
                .enumerate()
                .map(|(a, &pa)| {
                    let inner: f64 = mdp
                        .next_states(s, a)
                        .iter()
                        .enumerate()
                        .map(|(next, &p)| p * (shaped.get(s, a, next) + gamma * v[next]))
                        .sum();
                    pa * inner
                })
                .sum()
        })
        .collect();
    Ok(ValueFunction(out))
}

/// `T^mu v + phi`: the per-state value with the variance correction of the
/// second-order expansion, when `phi` is a [`variance_potential`] of
/// `Q_v` (the left side of the shaping identity).
pub fn variance_augmented_backup(
    mdp: &TabularMdp,
    v: &ValueFunction,
    mu: &Policy,
    phi: &ShapingPotential,
) -> Result<ValueFunction> {
    check_len("potential", mdp.n_states(), phi.phi.len())?;
    let mut out = bellman::apply_bellman(mdp, mu, v)?;
    out.iter_mut().zip(&phi.phi).for_each(|(x, p)| *x += p);
    Ok(out)
}

/// Diagonal Gaussian policy `N(mean, diag(stddev^2))` in one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicySpec {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl GaussianPolicySpec {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        check_len("stddev", mean.len(), stddev.len())?;
        if stddev.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("stddev entries must be > 0".into()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean"));
        }
        Ok(Self { mean, stddev })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Delta-method variance `sum_i g0[i]^2 sigma_i^2` of `Q(a)` for
/// `a ~ policy`, with `g0` the action gradient of `Q` at the mean.
pub fn gaussian_q_variance(policy: &GaussianPolicySpec, q_gradient_at_mean: &[f64]) -> Result<f64> {
    check_len("gradient", policy.dim(), q_gradient_at_mean.len())?;
    Ok(q_gradient_at_mean
        .iter()
        .zip(&policy.stddev)
        .map(|(g, s)| g * g * s * s)
        .sum())
}
