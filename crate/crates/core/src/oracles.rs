//! Slow, independent reference computations for tests.
//!
//! Nothing here calls into [`crate::robust`], [`crate::soft`] or
//! [`crate::bellman`]: the worst-case oracles search the KL ball directly,
//! and the dynamic-programming references use their own loops.
//!
//! The worst-case oracles combine two searches over the ball
//! `{p : D_KL(p || pi) <= eps}`:
//!
//! * a scan of all simplex points with coordinates on a grid, keeping the
//!   best feasible one;
//! * an exact nested search that peels off one coordinate at a time. With
//!   `p = (x, (1 - x) y)` the divergence splits as
//!   `kl2(x || pi_0) + (1 - x) D_KL(y || pi_rest / (1 - pi_0))`, so the
//!   remaining budget for `y` is `(eps - kl2(x || pi_0)) / (1 - x)` and the
//!   problem recurses on one coordinate fewer.
//!
//! The smaller of the two results is returned; both are attained by a
//! feasible point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::approx::GaussianPolicySpec;
use crate::error::{check_len, Error, Result};
use crate::mdp::{check_distribution, Policy, TabularMdp, ValueFunction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOracleConfig {
    /// Grid step on the simplex.
    pub resolution: f64,
    /// Largest action count accepted.
    pub max_actions: usize,
}

impl Default for GridOracleConfig {
    fn default() -> Self {
        Self {
            resolution: 1e-3,
            max_actions: 4,
        }
    }
}

/// Upper limit on enumerated grid points; finer requested grids are
/// coarsened, the nested search supplies the precision.
const GRID_BUDGET: f64 = 2.0e6;
const INV_PHI: f64 = 0.618_033_988_749_894_8;

fn kl2(x: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    (term(x, p) + term(1.0 - x, 1.0 - p)).max(0.0)
}

fn h2(x: f64) -> f64 {
    let term = |a: f64| if a > 0.0 { -a * a.ln() } else { 0.0 };
    term(x) + term(1.0 - x)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| {
            if b > 0.0 {
                a * (a / b).ln()
            } else {
                f64::INFINITY
            }
        })
        .sum::<f64>()
        .max(0.0)
}

fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum()
}

/// The objective `<p, Q> + alpha H(p)`.
fn objective(q: &[f64], p: &[f64], alpha: f64) -> f64 {
    let linear: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
    if alpha == 0.0 {
        linear
    } else {
        linear + alpha * entropy(p)
    }
}

/// `[lo, hi]` with `kl2(x || p) <= eps` exactly on it.
fn feasible_interval(p: f64, eps: f64) -> (f64, f64) {
    let lo = if kl2(0.0, p) <= eps {
        0.0
    } else {
        let (mut a, mut b) = (0.0, p);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if kl2(m, p) <= eps {
                b = m;
            } else {
                a = m;
            }
        }
        b
    };
    let hi = if kl2(1.0, p) <= eps {
        1.0
    } else {
        let (mut a, mut b) = (p, 1.0);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if kl2(m, p) <= eps {
                a = m;
            } else {
                b = m;
            }
        }
        a
    };
    (lo, hi)
}

/// Exact nested search on a full-support prior.
fn nested(q: &[f64], pi: &[f64], eps: f64, alpha: f64) -> (f64, Vec<f64>) {
    let n = q.len();
    if n == 1 {
        return (q[0], vec![1.0]);
    }
    let p0 = pi[0];
    let rest: Vec<f64> = pi[1..].iter().map(|p| p / (1.0 - p0)).collect();
    let (lo, hi) = feasible_interval(p0, eps);

    let eval = |x: f64| -> (f64, Vec<f64>) {
        if x >= 1.0 {
            let mut row = vec![0.0; n];
            row[0] = 1.0;
            return (q[0], row);
        }
        let budget = ((eps - kl2(x, p0)) / (1.0 - x)).max(0.0);
        let (inner, y) = nested(&q[1..], &rest, budget, alpha);
        let mut row = Vec::with_capacity(n);
        row.push(x);
        row.extend(y.iter().map(|v| (1.0 - x) * v));
        let value = x * q[0] + (1.0 - x) * inner + alpha * h2(x);
        (value, row)
    };

    let mut best = eval(lo);
    let mut consider = |cand: (f64, Vec<f64>)| {
        if cand.0 < best.0 {
            best = cand;
        }
    };
    consider(eval(hi));
    if hi > lo {
        // The linear problem is convex in x; with an entropy term it need
        // not be, so a scan picks the basin first.
        let (mut a, mut b) = if alpha == 0.0 {
            (lo, hi)
        } else {
            let points = 64;
            let step = (hi - lo) / points as f64;
            let (mut arg, mut val) = (0, f64::INFINITY);
            for i in 0..=points {
                let v = eval(lo + step * i as f64).0;
                if v < val {
                    val = v;
                    arg = i;
                }
            }
            let c = lo + step * arg as f64;
            ((c - step).max(lo), (c + step).min(hi))
        };
        let mut x1 = b - INV_PHI * (b - a);
        let mut x2 = a + INV_PHI * (b - a);
        let (mut f1, mut f2) = (eval(x1).0, eval(x2).0);
        for _ in 0..60 {
            if b - a < 1e-13 {
                break;
            }
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - INV_PHI * (b - a);
                f1 = eval(x1).0;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + INV_PHI * (b - a);
                f2 = eval(x2).0;
            }
        }
        consider(eval(0.5 * (a + b)));
    }
    best
}

/// Best feasible point among grid compositions of the simplex.
fn grid_search(q: &[f64], pi: &[f64], eps: f64, alpha: f64, resolution: f64) -> (f64, Vec<f64>) {
    let n = q.len();
    let mut steps = (1.0 / resolution).round().max(1.0) as usize;
    let count = |k: usize| -> f64 {
        // C(k + n - 1, n - 1)
        (1..n).fold(1.0, |acc, i| acc * (k + i) as f64 / i as f64)
    };
    while count(steps) > GRID_BUDGET {
        steps /= 2;
    }
    let mut best = (objective(q, pi, alpha), pi.to_vec());
    let mut point = vec![0.0; n];
    let mut parts = vec![0usize; n];
    enumerate(&mut parts, 0, steps, &mut |parts| {
        for (p, &k) in point.iter_mut().zip(parts.iter()) {
            *p = k as f64 / steps as f64;
        }
        if kl(&point, pi) <= eps {
            let value = objective(q, &point, alpha);
            if value < best.0 {
                best = (value, point.clone());
            }
        }
    });
    best
}

fn enumerate(parts: &mut [usize], index: usize, remaining: usize, visit: &mut dyn FnMut(&[usize])) {
    if index == parts.len() - 1 {
        parts[index] = remaining;
        visit(parts);
        return;
    }
    for k in 0..=remaining {
        parts[index] = k;
        enumerate(parts, index + 1, remaining - k, visit);
    }
}

fn worst_case(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    alpha: f64,
    cfg: &GridOracleConfig,
) -> Result<(f64, Vec<f64>)> {
    check_len("pi row", q_row.len(), pi_row.len())?;
    if q_row.len() > cfg.max_actions || cfg.max_actions > 4 {
        return Err(Error::Unsupported(format!(
            "grid oracle handles at most {} actions, got {}",
            cfg.max_actions.min(4),
            q_row.len()
        )));
    }
    if !(cfg.resolution > 0.0 && cfg.resolution <= 1.0) {
        return Err(Error::InvalidConfig("resolution must be in (0, 1]".into()));
    }
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("Q row"));
    }
    check_distribution(pi_row)?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter {
            requirement: "eps >= 0",
            value: eps,
        });
    }

    // Coordinates outside the support of pi must stay at zero.
    let support: Vec<usize> = (0..pi_row.len()).filter(|&a| pi_row[a] > 0.0).collect();
    let q: Vec<f64> = support.iter().map(|&a| q_row[a]).collect();
    let pi: Vec<f64> = support.iter().map(|&a| pi_row[a]).collect();

    let (mut value, mut row) = if eps == 0.0 {
        (objective(&q, &pi, alpha), pi.clone())
    } else {
        let grid = grid_search(&q, &pi, eps, alpha, cfg.resolution);
        let exact = nested(&q, &pi, eps, alpha);
        if grid.0 < exact.0 {
            grid
        } else {
            exact
        }
    };
    // Report the objective at the returned point.
    value = value.min(objective(&q, &row, alpha));
    let mut full = vec![0.0; pi_row.len()];
    for (&a, &p) in support.iter().zip(&row) {
        full[a] = p;
    }
    row = full;
    Ok((value, row))
}

/// `min <p, Q>` over `D_KL(p || pi) <= eps`, by direct search.
pub fn brute_force_worst_case(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    cfg: &GridOracleConfig,
) -> Result<(f64, Vec<f64>)> {
    worst_case(q_row, pi_row, eps, 0.0, cfg)
}

/// `min <p, Q> + alpha H(p)` over `D_KL(p || pi) <= eps`, by direct search.
pub fn brute_force_soft_worst_case(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    alpha: f64,
    cfg: &GridOracleConfig,
) -> Result<(f64, Vec<f64>)> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter {
            requirement: "alpha >= 0",
            value: alpha,
        });
    }
    worst_case(q_row, pi_row, eps, alpha, cfg)
}

fn optimality_sweep(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|a| {
                    let future: f64 = mdp
                        .next_states(s, a)
                        .iter()
                        .zip(v)
                        .map(|(p, x)| p * x)
                        .sum();
                    mdp.reward(s, a) + mdp.gamma() * future
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// `V*` by value iteration, stopped once a sweep changes the value by less
/// than `tol (1 - gamma) / (2 gamma)`, so that `||V - V*|| <= tol`.
pub fn value_iteration_reference(mdp: &TabularMdp, tol: f64) -> Result<ValueFunction> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            requirement: "tol > 0",
            value: tol,
        });
    }
    mdp.ensure_valid()?;
    let gamma = mdp.gamma();
    let mut v = vec![0.0; mdp.n_states()];
    if gamma == 0.0 {
        return Ok(ValueFunction(optimality_sweep(mdp, &v)));
    }
    let threshold = tol * (1.0 - gamma) / (2.0 * gamma);
    loop {
        let next = optimality_sweep(mdp, &v);
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if change < threshold {
            return Ok(ValueFunction(v));
        }
    }
}

/// `V^pi` by summing `(gamma P_pi)^k r_pi` until the tail is below `tol`.
pub fn policy_value_by_summation(mdp: &TabularMdp, pi: &Policy, tol: f64) -> Result<ValueFunction> {
    check_len("policy states", mdp.n_states(), pi.n_states())?;
    check_len("policy actions", mdp.n_actions(), pi.n_actions())?;
    let ns = mdp.n_states();
    let r_pi: Vec<f64> = (0..ns)
        .map(|s| {
            pi.row(s)
                .iter()
                .enumerate()
                .map(|(a, p)| p * mdp.reward(s, a))
                .sum()
        })
        .collect();
    let mut term = r_pi.clone();
    let mut total = r_pi;
    let gamma = mdp.gamma();
    let mut tail = mdp.r_max();
    while tail * gamma / (1.0 - gamma) > tol && gamma > 0.0 {
        term = (0..ns)
            .map(|s| {
                let mut x = 0.0;
                for (a, pa) in pi.row(s).iter().enumerate() {
                    for (next, p) in mdp.next_states(s, a).iter().enumerate() {
                        x += pa * p * term[next];
                    }
                }
                gamma * x
            })
            .collect();
        total.iter_mut().zip(&term).for_each(|(t, x)| *t += x);
        tail *= gamma;
    }
    Ok(ValueFunction(total))
}

/// The best deterministic policy by enumeration of all `A^S` of them.
/// Returns its value (which is `V*`) and the action table.
pub fn enumerate_deterministic_policies(
    mdp: &TabularMdp,
    tol: f64,
) -> Result<(ValueFunction, Vec<usize>)> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let total = (na as f64).powi(ns as i32);
    if total > 1e5 {
        return Err(Error::Unsupported(format!(
            "{total} deterministic policies is too many to enumerate"
        )));
    }
    let mut actions = vec![0usize; ns];
    let mut best: Option<(ValueFunction, Vec<usize>)> = None;
    loop {
        let v = policy_value_by_summation(mdp, &Policy::deterministic(&actions, na), tol)?;
        let better = match &best {
            None => true,
            Some((b, _)) => v.iter().sum::<f64>() > b.iter().sum::<f64>(),
        };
        if better {
            best = Some((v, actions.clone()));
        }
        let mut i = 0;
        loop {
            if i == ns {
                return Ok(best.expect("at least one policy"));
            }
            actions[i] += 1;
            if actions[i] < na {
                break;
            }
            actions[i] = 0;
            i += 1;
        }
    }
}

/// Unbiased sample variance of `q(a)` for `a ~ N(mean, diag(stddev^2))`.
pub fn monte_carlo_variance(
    spec: &GaussianPolicySpec,
    q_function: &dyn Fn(&[f64]) -> f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples < 10_000 {
        return Err(Error::InvalidConfig(format!(
            "need at least 10^4 samples, got {samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut action = vec![0.0; spec.dim()];
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..samples {
        for ((a, m), s) in action.iter_mut().zip(&spec.mean).zip(&spec.stddev) {
            *a = m + s * normal.sample(&mut rng);
        }
        let x = q_function(&action);
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(m2 / (samples - 1) as f64)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient(
    q_function: &dyn Fn(&[f64]) -> f64,
    point: &[f64],
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter {
            requirement: "step > 0",
            value: step,
        });
    }
    let mut x = point.to_vec();
    Ok((0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let up = q_function(&x);
            x[i] = point[i] - step;
            let down = q_function(&x);
            x[i] = point[i];
            (up - down) / (2.0 * step)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GridOracleConfig {
        GridOracleConfig::default()
    }

    #[test]
    fn zero_radius_returns_the_prior() {
        let (v, row) = brute_force_worst_case(&[1.0, 3.0], &[0.25, 0.75], 0.0, &cfg()).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(row, vec![0.25, 0.75]);
        let (v, _) =
            brute_force_soft_worst_case(&[1.0, 3.0], &[0.5, 0.5], 0.0, 0.5, &cfg()).unwrap();
        assert!((v - (2.0 + 0.5 * 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn huge_radius_finds_the_minimum() {
        let (v, row) =
            brute_force_worst_case(&[0.4, -1.0, 2.0], &[0.3, 0.3, 0.4], 100.0, &cfg()).unwrap();
        assert!((v + 1.0).abs() < 1e-9);
        assert!(row[1] > 1.0 - 1e-9);
    }

    #[test]
    fn reference_instance_is_stable_across_resolutions() {
        let pi = [1.0 / 3.0; 3];
        let coarse = brute_force_worst_case(&[0.0, 1.0, 2.0], &pi, 0.1, &cfg()).unwrap();
        let fine = brute_force_worst_case(
            &[0.0, 1.0, 2.0],
            &pi,
            0.1,
            &GridOracleConfig {
                resolution: 1e-4,
                ..cfg()
            },
        )
        .unwrap();
        assert!((coarse.0 - fine.0).abs() < 1e-5);
        // 40-digit reference computed from the tilting family.
        assert!((coarse.0 - 0.639_476_844_665_012_5).abs() < 1e-7);
        assert!(kl(&coarse.1, &pi) <= 0.1 + 1e-12);
    }

    #[test]
    fn zero_alpha_matches_the_linear_oracle() {
        let (q, pi) = ([0.2, -0.3, 0.9], [0.5, 0.2, 0.3]);
        let a = brute_force_worst_case(&q, &pi, 0.05, &cfg()).unwrap();
        let b = brute_force_soft_worst_case(&q, &pi, 0.05, 0.0, &cfg()).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn monotone_in_radius() {
        let (q, pi) = ([0.2, -0.3, 0.9, 0.1], [0.4, 0.2, 0.3, 0.1]);
        let mut prev = f64::INFINITY;
        for eps in [0.0, 0.01, 0.05, 0.2, 1.0] {
            let (v, _) = brute_force_worst_case(&q, &pi, eps, &cfg()).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn zero_probability_actions_stay_at_zero() {
        let (v, row) =
            brute_force_worst_case(&[5.0, -9.0, 1.0], &[0.5, 0.0, 0.5], 10.0, &cfg()).unwrap();
        assert_eq!(row[1], 0.0);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_actions_is_an_error() {
        assert!(brute_force_worst_case(&[0.0; 5], &[0.2; 5], 0.1, &cfg()).is_err());
    }

    #[test]
    fn value_iteration_examples() {
        let single =
            TabularMdp::from_tables(0.75, 2.0, vec![vec![2.0]], vec![vec![vec![1.0]]]).unwrap();
        let v = value_iteration_reference(&single, 1e-10).unwrap();
        assert!((v[0] - 8.0).abs() <= 1e-10);

        let myopic = TabularMdp::from_tables(
            0.0,
            3.0,
            vec![vec![1.0, 3.0], vec![-1.0, -2.0]],
            vec![vec![vec![0.5, 0.5]; 2], vec![vec![1.0, 0.0]; 2]],
        )
        .unwrap();
        assert_eq!(
            value_iteration_reference(&myopic, 1e-9).unwrap().0,
            vec![3.0, -1.0]
        );
        assert!(value_iteration_reference(&myopic, 0.0).is_err());
    }

    #[test]
    fn enumeration_agrees_with_value_iteration() {
        let mdp = crate::mdp::tests::two_state();
        let (v, _) = enumerate_deterministic_policies(&mdp, 1e-12).unwrap();
        let reference = value_iteration_reference(&mdp, 1e-10).unwrap();
        assert!(v.sup_distance(&reference) < 2e-10);
    }

    #[test]
    fn monte_carlo_examples() {
        let spec = GaussianPolicySpec::new(vec![0.3, -0.2], vec![0.5, 1.5]).unwrap();
        let constant = monte_carlo_variance(&spec, &|_| 4.0, 10_000, 1).unwrap();
        assert!(constant <= 1e-12);
        let n = 200_000;
        let linear = monte_carlo_variance(&spec, &|a| 2.0 * a[0] - a[1], n, 7).unwrap();
        let exact: f64 = 4.0 * 0.25 + 2.25;
        // Standard error of a Gaussian sample variance: sigma^2 sqrt(2 / (n - 1)).
        let se = exact * (2.0 / (n - 1) as f64).sqrt();
        assert!((linear - exact).abs() < 3.0 * se);
        assert!(monte_carlo_variance(&spec, &|_| 0.0, 100, 1).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let linear = |a: &[f64]| 3.0 * a[0] - 2.0 * a[1];
        let g = finite_difference_gradient(&linear, &[0.7, -4.0], 0.1).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12 && (g[1] + 2.0).abs() < 1e-12);

        let quad = |a: &[f64]| 1.5 * a[0] + 0.5 * a[0] * a[0];
        assert!((finite_difference_gradient(&quad, &[0.0], 0.3).unwrap()[0] - 1.5).abs() < 1e-14);

        let smooth = |a: &[f64]| a[0].sin();
        let err = |h: f64| {
            (finite_difference_gradient(&smooth, &[0.4], h).unwrap()[0] - 0.4f64.cos()).abs()
        };
        let ratio = err(1e-3) / err(1e-4);
        assert!(ratio > 50.0 && ratio < 200.0, "ratio {ratio}");
    }
}
