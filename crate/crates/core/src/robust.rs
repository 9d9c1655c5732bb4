//! KL uncertainty sets over policies and the adversarial Bellman operator.
//!
//! For a state with action values `Q`, nominal policy `pi` and radius
//! `eps`, the adversarial backup is
//!
//! ```text
//! min { <p, Q> : D_KL(p || pi) <= eps }  =  -min_{lambda > 0} g(lambda),
//! g(lambda) = lambda * log E_pi[exp(-Q / lambda)] + lambda * eps,
//! ```
//!
//! and the minimizing `p` re-weights `pi` by `exp(-Q / lambda*)`. The dual
//! `g` is convex in `lambda` with `g'(lambda) = eps - D_KL(p_lambda || pi)`,
//! so the search over `lambda` is one-dimensional and exact up to the
//! bracket tolerance. The `lambda -> 0+` limit (the support minimum of `Q`)
//! is handled in closed form.
//!
//! The module also holds the visitation-count radius schedule, the DR-MPI
//! loop, and the computable error bounds used to check convergence and
//! safety of a run.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bellman::{self, EvalDepth, MpiConfig};
use crate::error::{check_len, Error, Result};
use crate::mdp::{
    check_distribution, dot, l1_distance, q_from_v_unchecked, Policy, TabularMdp, ValueFunction,
};

/// Per-state KL radius `eps(s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UncertaintyRadii(pub Vec<f64>);

impl UncertaintyRadii {
    pub fn zeros(n_states: usize) -> Self {
        Self(vec![0.0; n_states])
    }

    pub fn uniform(n_states: usize, eps: f64) -> Self {
        Self(vec![eps; n_states])
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|e| e.is_finite() && *e >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "uncertainty radii must be finite and >= 0".into(),
            ))
        }
    }
}

/// State visitation counts `n_t(s)` and the step counter `t`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCounter {
    pub counts: Vec<u64>,
    pub total_steps: u64,
}

impl VisitCounter {
    pub fn new(n_states: usize) -> Self {
        Self {
            counts: vec![0; n_states],
            total_steps: 0,
        }
    }

    /// Records one environment step taken from `state`.
    pub fn visit(&mut self, state: usize) {
        self.counts[state] += 1;
        self.total_steps += 1;
    }

    /// Deterministic schedule: after `t` iterations every state has been
    /// seen `ceil(t / S)` times.
    pub fn uniform_synthetic(n_states: usize, t: u64) -> Self {
        let n = t.div_ceil(n_states as u64);
        Self {
            counts: vec![n; n_states],
            total_steps: t,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CounterMode {
    /// Counts collected from `S` simulated steps per outer iteration under
    /// the current policy, starting from a uniformly drawn state.
    #[default]
    Trajectory,
    /// `n_t(s) = ceil(t / S)` for every state.
    UniformSynthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    /// Radius scale `C`. Zero disables the adversary.
    pub big_c: f64,
    /// Radius decay exponent `eta`.
    pub eta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub dual_tol: f64,
    pub counter_mode: CounterMode,
    /// Give under-visited states the radius `C * max(n, 1)^-eta` instead of
    /// zero. Not part of the convergence analysis.
    pub pessimistic_unvisited: bool,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            big_c: 1.0,
            eta: 0.5,
            lambda_min: 1e-6,
            lambda_max: 1e6,
            dual_tol: 1e-10,
            counter_mode: CounterMode::Trajectory,
            pessimistic_unvisited: false,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.big_c >= 0.0 && self.big_c.is_finite()) {
            return Err(Error::InvalidConfig("C must be finite and >= 0".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be > 0".into()));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max) {
            return Err(Error::InvalidConfig(
                "need 0 < lambda_min < lambda_max".into(),
            ));
        }
        if !(self.dual_tol > 0.0) {
            return Err(Error::InvalidConfig("dual_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Which part of the dual problem the optimum landed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualRegime {
    /// `eps = 0`: the uncertainty set is `{pi}`.
    NoAdversary,
    /// The ball contains the support minimum of `Q`; `lambda -> 0+`.
    SupportMinimum,
    /// The search hit `lambda_min`.
    LowerClamp,
    /// Interior optimum; the KL constraint is active.
    Interior,
    /// The search hit `lambda_max`.
    UpperClamp,
    /// Entropy-regularized backup with a radius beyond what the minimizers
    /// of the shifted problem can use; solved by enumerating faces.
    Enumerated,
    /// As `Enumerated` but with too many actions to enumerate; the value is
    /// a Lagrangian lower bound.
    LowerBound,
}

/// Per-state solution of the dual problem.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub lambda_star: f64,
    /// `g(lambda*)` (minimization form).
    pub dual_value: f64,
    /// The adversarial backup, `-g(lambda*)`.
    pub robust_value: f64,
    /// `D_KL(adversary || pi)`.
    pub realized_kl: f64,
    pub adversary: Vec<f64>,
    pub regime: DualRegime,
}

impl DualSolution {
    /// True when `lambda*` lies strictly inside `(lambda_min, lambda_max)`.
    pub fn is_interior(&self) -> bool {
        self.regime == DualRegime::Interior
    }
}

/// `eps_t(s) = C n_t(s)^-eta` if `n_t(s) >= t / S`, else 0.
pub fn uncertainty_radius(
    counter: &VisitCounter,
    cfg: &RobustConfig,
    n_states: usize,
) -> Result<UncertaintyRadii> {
    check_len("visit counter", n_states, counter.counts.len())?;
    if counter.total_steps < 1 {
        return Err(Error::InvalidConfig(
            "uncertainty radius needs t >= 1".into(),
        ));
    }
    let threshold = counter.total_steps as f64 / n_states as f64;
    Ok(UncertaintyRadii(
        counter
            .counts
            .iter()
            .map(|&n| {
                if n >= 1 && n as f64 >= threshold {
                    cfg.big_c * (n as f64).powf(-cfg.eta)
                } else if cfg.pessimistic_unvisited {
                    cfg.big_c * (n.max(1) as f64).powf(-cfg.eta)
                } else {
                    0.0
                }
            })
            .collect(),
    ))
}

fn check_row_inputs(q_row: &[f64], pi_row: &[f64], eps: f64) -> Result<()> {
    check_len("pi row", q_row.len(), pi_row.len())?;
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("Q row"));
    }
    check_distribution(pi_row)?;
    if !(eps >= 0.0) || eps.is_nan() {
        return Err(Error::InvalidParameter {
            requirement: "eps >= 0",
            value: eps,
        });
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && !lambda.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            requirement: "lambda > 0",
            value: lambda,
        })
    }
}

/// Minimum of `Q` over the support of `pi`.
fn support_min(q_row: &[f64], pi_row: &[f64]) -> f64 {
    q_row
        .iter()
        .zip(pi_row)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&q, _)| q)
        .fold(f64::INFINITY, f64::min)
}

/// Exponential tilt of `pi` by `-Q / lambda`, shifted by the support minimum.
struct Tilt<'a> {
    q: &'a [f64],
    pi: &'a [f64],
    q_min: f64,
}

impl<'a> Tilt<'a> {
    fn new(q: &'a [f64], pi: &'a [f64]) -> Self {
        Self {
            q,
            pi,
            q_min: support_min(q, pi),
        }
    }

    /// `log E_pi[exp(-(Q - q_min) / lambda)]`. The `expm1` sum is accurate
    /// for large `lambda`; once it nears `-1` it cancels, and the
    /// log-sum-exp form takes over.
    fn log_partition(&self, lambda: f64) -> f64 {
        let w: f64 = self
            .q
            .iter()
            .zip(self.pi)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&q, &p)| p * (-(q - self.q_min) / lambda).exp_m1())
            .sum();
        if w > -0.5 {
            return w.ln_1p();
        }
        let logits = || {
            self.q
                .iter()
                .zip(self.pi)
                .filter(|(_, &p)| p > 0.0)
                .map(|(&q, &p)| p.ln() - (q - self.q_min) / lambda)
        };
        let top = logits().fold(f64::NEG_INFINITY, f64::max);
        top + logits().map(|l| (l - top).exp()).sum::<f64>().ln()
    }

    fn dual(&self, lambda: f64, eps: f64) -> f64 {
        -self.q_min + lambda * self.log_partition(lambda) + lambda * eps
    }

    fn policy(&self, lambda: f64) -> Vec<f64> {
        let log_z = self.log_partition(lambda);
        self.q
            .iter()
            .zip(self.pi)
            .map(|(&q, &p)| {
                if p > 0.0 {
                    p * (-(q - self.q_min) / lambda - log_z).exp()
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `D_KL(p_lambda || pi)`; equals `eps - g'(lambda)`.
    fn kl(&self, lambda: f64) -> f64 {
        let log_z = self.log_partition(lambda);
        let mut total = 0.0;
        for (&q, &p) in self.q.iter().zip(self.pi) {
            if p > 0.0 {
                let log_ratio = -(q - self.q_min) / lambda - log_z;
                total += p * log_ratio.exp() * log_ratio;
            }
        }
        total.max(0.0)
    }
}

/// The dual objective `g(lambda)`; the adversarial backup is `-inf g`.
pub fn dual_objective(q_row: &[f64], pi_row: &[f64], eps: f64, lambda: f64) -> Result<f64> {
    check_row_inputs(q_row, pi_row, eps)?;
    check_lambda(lambda)?;
    Ok(Tilt::new(q_row, pi_row).dual(lambda, eps))
}

/// The worst-case re-weighting `p(a) ∝ pi(a) exp(-Q(a) / lambda)`.
pub fn adversarial_policy(q_row: &[f64], pi_row: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_len("pi row", q_row.len(), pi_row.len())?;
    if q_row.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite("Q row"));
    }
    check_lambda(lambda)?;
    Ok(Tilt::new(q_row, pi_row).policy(lambda))
}

/// Minimizes `g` over `[lambda_min, lambda_max]`.
pub fn optimal_lambda(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    cfg: &RobustConfig,
) -> Result<DualSolution> {
    check_row_inputs(q_row, pi_row, eps)?;
    Ok(solve_dual(q_row, pi_row, eps, cfg))
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

pub(crate) fn solve_dual(
    q_row: &[f64],
    pi_row: &[f64],
    eps: f64,
    cfg: &RobustConfig,
) -> DualSolution {
    if eps == 0.0 {
        let mean = dot(pi_row, q_row);
        return DualSolution {
            lambda_star: cfg.lambda_max,
            dual_value: -mean,
            robust_value: mean,
            realized_kl: 0.0,
            adversary: pi_row.to_vec(),
            regime: DualRegime::NoAdversary,
        };
    }

    let tilt = Tilt::new(q_row, pi_row);
    let mass_at_min: f64 = q_row
        .iter()
        .zip(pi_row)
        .filter(|(&q, &p)| p > 0.0 && q == tilt.q_min)
        .map(|(_, &p)| p)
        .sum();
    let kl_at_min = -mass_at_min.ln();
    if eps >= kl_at_min {
        let adversary = q_row
            .iter()
            .zip(pi_row)
            .map(|(&q, &p)| {
                if p > 0.0 && q == tilt.q_min {
                    p / mass_at_min
                } else {
                    0.0
                }
            })
            .collect();
        return DualSolution {
            lambda_star: cfg.lambda_min,
            dual_value: -tilt.q_min,
            robust_value: tilt.q_min,
            realized_kl: kl_at_min.max(0.0),
            adversary,
            regime: DualRegime::SupportMinimum,
        };
    }

    // Golden-section on log(lambda) narrows the bracket around the minimizer
    // of the (unimodal) dual.
    let dual_at = |u: f64| tilt.dual(u.exp(), eps);
    let (lo_bound, hi_bound) = (cfg.lambda_min.ln(), cfg.lambda_max.ln());
    let (mut a, mut b) = (lo_bound, hi_bound);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (dual_at(c), dual_at(d));
    while b - a > 1e-3 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = dual_at(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = dual_at(d);
        }
    }
    // Widen by one step so that rounding in the comparisons above cannot
    // have excluded the minimizer, then polish with bisection on the sign
    // of g' = eps - KL.
    let step = b - a;
    let (mut lo, mut hi) = ((a - step).max(lo_bound), (b + step).min(hi_bound));
    let slope = |u: f64| eps - tilt.kl(u.exp());

    let (lambda_star, regime) = if slope(lo) >= 0.0 {
        if lo == lo_bound {
            (cfg.lambda_min, DualRegime::LowerClamp)
        } else {
            // The golden bracket missed; fall back to the full interval.
            bisect(&slope, lo_bound, lo, cfg.dual_tol)
        }
    } else if slope(hi) <= 0.0 {
        if hi == hi_bound {
            (cfg.lambda_max, DualRegime::UpperClamp)
        } else {
            bisect(&slope, hi, hi_bound, cfg.dual_tol)
        }
    } else {
        let mut iterations = 0;
        while (hi.exp() - lo.exp()) > cfg.dual_tol * lo.exp().max(1.0)
            && hi - lo > 1e-15
            && iterations < 200
        {
            let mid = 0.5 * (lo + hi);
            if slope(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            iterations += 1;
        }
        // The upper end has KL <= eps, so the reported adversary is feasible.
        (hi.exp(), DualRegime::Interior)
    };

    let dual_value = tilt.dual(lambda_star, eps);
    DualSolution {
        lambda_star,
        dual_value,
        robust_value: -dual_value,
        realized_kl: tilt.kl(lambda_star),
        adversary: tilt.policy(lambda_star),
        regime,
    }
}

fn bisect(slope: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, DualRegime) {
    if slope(lo) >= 0.0 {
        return (lo.exp(), DualRegime::LowerClamp);
    }
    if slope(hi) <= 0.0 {
        return (hi.exp(), DualRegime::UpperClamp);
    }
    for _ in 0..200 {
        if (hi.exp() - lo.exp()) <= tol * lo.exp().max(1.0) || hi - lo <= 1e-15 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (hi.exp(), DualRegime::Interior)
}

/// The KL-adversarial backup `min_{p in U_eps(pi)} T^p v`, with the
/// per-state dual solutions.
pub fn adversarial_bellman(
    mdp: &TabularMdp,
    pi: &Policy,
    v: &ValueFunction,
    radii: &UncertaintyRadii,
    cfg: &RobustConfig,
) -> Result<(ValueFunction, Vec<DualSolution>)> {
    pi.check_against(mdp)?;
    check_len("value function", mdp.n_states(), v.len())?;
    check_len("radii", mdp.n_states(), radii.0.len())?;
    radii.validate()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("value function"));
    }
    let q = q_from_v_unchecked(mdp, v);
    let solutions: Vec<DualSolution> = (0..mdp.n_states())
        .map(|s| solve_dual(q.row(s), pi.row(s), radii.0[s], cfg))
        .collect();
    let values = solutions.iter().map(|d| d.robust_value).collect();
    Ok((ValueFunction(values), solutions))
}

/// `(R_max + gamma ||v||) * sqrt(2 eps)`: bounds how far the adversarial
/// backup can fall below `T^pi v` in a state with radius `eps`.
pub fn pinsker_gap_bound(mdp: &TabularMdp, v: &ValueFunction, eps_s: f64) -> f64 {
    (mdp.r_max() + mdp.gamma() * v.sup_norm()) * (2.0 * eps_s).sqrt()
}

/// `(R_max + gamma ||v||) * ||p - q||_1`: the TV-Lipschitz bound on
/// `|T^p v(s) - T^q v(s)|`.
pub fn lipschitz_gap_bound(mdp: &TabularMdp, v: &ValueFunction, p: &[f64], q: &[f64]) -> f64 {
    (mdp.r_max() + mdp.gamma() * v.sup_norm()) * l1_distance(p, q)
}

/// One iteration of a DR-MPI style run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub t: usize,
    /// The robust iterate `V~_t`.
    pub value: ValueFunction,
    /// Exact-evaluation iterate `V_t` driven by the same policies.
    pub comparison: ValueFunction,
    pub radii: UncertaintyRadii,
    /// `V~_t - (T^{pi_t})^m V~_{t-1}`: deviation from exact evaluation.
    pub delta: Vec<f64>,
    pub delta_sup: f64,
    /// `||V~_t - V*||`.
    pub sup_loss: f64,
    /// `min_s V*(s) - V~_t(s)`.
    pub safety_margin_min: f64,
    /// `sum_{k=1}^{t-1} gamma^k ||delta_{t-k}||`.
    pub e_n: f64,
    pub alpha: Option<f64>,
    pub lambda_mean: Option<f64>,
}

impl RunRecord {
    pub fn eps_max(&self) -> f64 {
        self.radii.max()
    }
}

/// Output of a DR-MPI run.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub initial: ValueFunction,
    /// `V*` of the scheme (the soft optimum for entropy-regularized runs).
    pub optimal: ValueFunction,
    pub records: Vec<RunRecord>,
    pub final_policy: Policy,
    pub counter: VisitCounter,
}

/// Which error series feeds the discounted accumulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorSeries {
    /// Observed `||delta_t||`.
    Delta,
    /// `(1 - gamma)^-1 R_max ||eps_t||`.
    Epsilon,
}

/// `E_N = sum_{t=1}^{N-1} gamma^t e_{N-t}` over the recorded series, with
/// `N` the number of records.
pub fn compute_error_bound(
    records: &[RunRecord],
    mdp: &TabularMdp,
    which: ErrorSeries,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidConfig("empty run record".into()));
    }
    let gamma = mdp.gamma();
    let scale = mdp.r_max() / (1.0 - gamma);
    let n = records.len();
    let mut total = 0.0;
    let mut weight = 1.0;
    for t in 1..n {
        weight *= gamma;
        let rec = &records[n - t - 1];
        let e = match which {
            ErrorSeries::Delta => rec.delta_sup,
            ErrorSeries::Epsilon => scale * rec.eps_max(),
        };
        total += weight * e;
    }
    Ok(total)
}

/// Right-hand side of the sub-optimality bound:
/// `4 R_max / (1-gamma)^2 * E_N + 2 gamma^N / (1-gamma) * ||V_0 - V*||`.
pub fn suboptimality_bound(mdp: &TabularMdp, e_n: f64, n: usize, initial_loss: f64) -> f64 {
    let g = mdp.gamma();
    4.0 * mdp.r_max() / (1.0 - g).powi(2) * e_n + 2.0 * g.powi(n as i32) / (1.0 - g) * initial_loss
}

/// Replaces exact backups by estimates during a run, e.g. sample averages.
pub trait BackupEstimator {
    /// An estimate of `T^policy v` at outer iteration `t`.
    fn backup(
        &mut self,
        mdp: &TabularMdp,
        policy: &Policy,
        v: &ValueFunction,
        t: usize,
    ) -> Result<ValueFunction>;
}

/// The pieces that distinguish plain and entropy-regularized DR-MPI.
pub(crate) trait Scheme {
    fn improve(&self, mdp: &TabularMdp, v: &ValueFunction) -> Result<Policy>;
    fn robust_backup(
        &self,
        mdp: &TabularMdp,
        pi: &Policy,
        v: &ValueFunction,
        radii: &UncertaintyRadii,
    ) -> Result<(ValueFunction, Vec<DualSolution>)>;
    fn exact_backup(
        &self,
        mdp: &TabularMdp,
        pi: &Policy,
        v: &ValueFunction,
    ) -> Result<ValueFunction>;
    fn exact_value(&self, mdp: &TabularMdp, pi: &Policy) -> Result<ValueFunction>;
    /// Bonus added to an estimated `T^p v` for the adversary `p`.
    fn bonus(&self, p: &[f64]) -> f64;
    fn optimal(&self, mdp: &TabularMdp) -> Result<ValueFunction>;
    fn alpha(&self) -> Option<f64>;
}

struct Standard<'a> {
    cfg: &'a RobustConfig,
    mpi: &'a MpiConfig,
}

impl Scheme for Standard<'_> {
    fn improve(&self, mdp: &TabularMdp, v: &ValueFunction) -> Result<Policy> {
        bellman::greedy_policy_with(mdp, v, self.mpi.tie_break)
    }

    fn robust_backup(
        &self,
        mdp: &TabularMdp,
        pi: &Policy,
        v: &ValueFunction,
        radii: &UncertaintyRadii,
    ) -> Result<(ValueFunction, Vec<DualSolution>)> {
        adversarial_bellman(mdp, pi, v, radii, self.cfg)
    }

    fn exact_backup(
        &self,
        mdp: &TabularMdp,
        pi: &Policy,
        v: &ValueFunction,
    ) -> Result<ValueFunction> {
        bellman::apply_bellman(mdp, pi, v)
    }

    fn exact_value(&self, mdp: &TabularMdp, pi: &Policy) -> Result<ValueFunction> {
        crate::mdp::exact_policy_value(mdp, pi)
    }

    fn bonus(&self, _p: &[f64]) -> f64 {
        0.0
    }

    fn optimal(&self, mdp: &TabularMdp) -> Result<ValueFunction> {
        bellman::optimal_value(mdp)
    }

    fn alpha(&self) -> Option<f64> {
        None
    }
}

/// Distributionally robust MPI: `pi_{t+1} in G(V~_t)`,
/// `V~_{t+1} = (T^{pi^{eps_t}_{t+1}})^m V~_t` with exact evaluation.
pub fn run_dr_mpi(
    mdp: &TabularMdp,
    cfg: &RobustConfig,
    mpi_cfg: &MpiConfig,
    v0: &ValueFunction,
    seed: u64,
) -> Result<RunTrace> {
    run_dr_mpi_with(mdp, cfg, mpi_cfg, v0, seed, None)
}

/// [`run_dr_mpi`] with the evaluation backups replaced by `estimator`.
pub fn run_dr_mpi_with(
    mdp: &TabularMdp,
    cfg: &RobustConfig,
    mpi_cfg: &MpiConfig,
    v0: &ValueFunction,
    seed: u64,
    estimator: Option<&mut dyn BackupEstimator>,
) -> Result<RunTrace> {
    let scheme = Standard { cfg, mpi: mpi_cfg };
    drive(&scheme, mdp, cfg, mpi_cfg, v0, seed, estimator)
}

pub(crate) fn drive(
    scheme: &dyn Scheme,
    mdp: &TabularMdp,
    cfg: &RobustConfig,
    mpi_cfg: &MpiConfig,
    v0: &ValueFunction,
    seed: u64,
    mut estimator: Option<&mut dyn BackupEstimator>,
) -> Result<RunTrace> {
    mdp.ensure_valid()?;
    cfg.validate()?;
    mpi_cfg.validate()?;
    check_len("initial value", mdp.n_states(), v0.len())?;
    if estimator.is_some() && mpi_cfg.m == EvalDepth::Infinite {
        return Err(Error::InvalidConfig(
            "sampled evaluation needs a finite evaluation depth".into(),
        ));
    }

    let ns = mdp.n_states();
    let gamma = mdp.gamma();
    let optimal = scheme.optimal(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counter = VisitCounter::new(ns);

    let mut robust = v0.clone();
    let mut comparison = v0.clone();
    let mut records: Vec<RunRecord> = Vec::new();
    let mut e_n = 0.0;
    let mut last_delta_sup = 0.0;
    let mut final_policy = scheme.improve(mdp, v0)?;

    for t in 1..=mpi_cfg.max_iterations {
        let policy = scheme.improve(mdp, &robust)?;

        match cfg.counter_mode {
            CounterMode::UniformSynthetic => {
                counter = VisitCounter::uniform_synthetic(ns, t as u64);
            }
            CounterMode::Trajectory => collect_visits(mdp, &policy, &mut counter, &mut rng),
        }
        let radii = if cfg.big_c == 0.0 {
            UncertaintyRadii::zeros(ns)
        } else {
            uncertainty_radius(&counter, cfg, ns)?
        };

        let (next, lambda_mean) = match mpi_cfg.m {
            EvalDepth::Steps(m) => {
                let mut v = robust.clone();
                let mut lambda_mean = None;
                for _ in 0..m {
                    let (exact, duals) = scheme.robust_backup(mdp, &policy, &v, &radii)?;
                    lambda_mean =
                        Some(duals.iter().map(|d| d.lambda_star).sum::<f64>() / ns as f64);
                    v = match estimator.as_deref_mut() {
                        Some(est) => {
                            let adversary = Policy::from_flat_unchecked(
                                ns,
                                mdp.n_actions(),
                                duals
                                    .iter()
                                    .flat_map(|d| d.adversary.iter().copied())
                                    .collect(),
                            );
                            let mut noisy = est.backup(mdp, &adversary, &v, t)?;
                            for (s, x) in noisy.iter_mut().enumerate() {
                                *x += scheme.bonus(adversary.row(s));
                            }
                            noisy
                        }
                        None => exact,
                    };
                }
                (v, lambda_mean)
            }
            EvalDepth::Infinite => robust_fixed_point(scheme, mdp, &policy, &robust, &radii)?,
        };

        let reference = match mpi_cfg.m {
            EvalDepth::Steps(m) => {
                let mut v = robust.clone();
                for _ in 0..m {
                    v = scheme.exact_backup(mdp, &policy, &v)?;
                }
                v
            }
            EvalDepth::Infinite => scheme.exact_value(mdp, &policy)?,
        };
        comparison = match mpi_cfg.m {
            EvalDepth::Steps(m) => {
                let mut v = comparison;
                for _ in 0..m {
                    v = scheme.exact_backup(mdp, &policy, &v)?;
                }
                v
            }
            EvalDepth::Infinite => reference.clone(),
        };

        let delta: Vec<f64> = next
            .iter()
            .zip(reference.iter())
            .map(|(a, b)| a - b)
            .collect();
        let delta_sup = crate::mdp::sup_norm(&delta);
        if t > 1 {
            e_n = gamma * (e_n + last_delta_sup);
        }
        last_delta_sup = delta_sup;

        let change = next.sup_distance(&robust);
        robust = next;
        let safety_margin_min = optimal
            .iter()
            .zip(robust.iter())
            .map(|(o, v)| o - v)
            .fold(f64::INFINITY, f64::min);
        records.push(RunRecord {
            t,
            value: robust.clone(),
            comparison: comparison.clone(),
            radii,
            delta,
            delta_sup,
            sup_loss: robust.sup_distance(&optimal),
            safety_margin_min,
            e_n,
            alpha: scheme.alpha(),
            lambda_mean: scheme.alpha().and(lambda_mean),
        });
        final_policy = policy;
        if mpi_cfg.should_stop(change) {
            break;
        }
    }

    Ok(RunTrace {
        initial: v0.clone(),
        optimal,
        records,
        final_policy,
        counter,
    })
}

fn robust_fixed_point(
    scheme: &dyn Scheme,
    mdp: &TabularMdp,
    pi: &Policy,
    start: &ValueFunction,
    radii: &UncertaintyRadii,
) -> Result<(ValueFunction, Option<f64>)> {
    let mut v = start.clone();
    for _ in 0..1_000_000 {
        let (next, duals) = scheme.robust_backup(mdp, pi, &v, radii)?;
        let lambda_mean =
            Some(duals.iter().map(|d| d.lambda_star).sum::<f64>() / duals.len() as f64);
        let change = next.sup_distance(&v);
        v = next;
        if change <= 1e-13 * v.sup_norm().max(1.0) {
            return Ok((v, lambda_mean));
        }
    }
    Err(Error::Numerical(
        "robust policy evaluation did not converge".into(),
    ))
}

/// Rolls out `S` steps under `policy` from a uniformly drawn start state.
fn collect_visits(
    mdp: &TabularMdp,
    policy: &Policy,
    counter: &mut VisitCounter,
    rng: &mut ChaCha8Rng,
) {
    let ns = mdp.n_states();
    let mut state = rng.random_range(0..ns);
    for _ in 0..ns {
        counter.visit(state);
        let action = sample_index(policy.row(state), rng);
        state = sample_index(mdp.next_states(state, action), rng);
    }
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cumulative += w;
            last = i;
            if u < cumulative {
                return i;
            }
        }
    }
    last
}

/// Writes the run as CSV: `t,sup_loss,safety_margin_min,eps_max,delta_sup,E_N`
/// plus `alpha,lambda_mean` for entropy-regularized runs. Floats use 17
/// significant digits.
pub fn write_records_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let soft = records.first().is_some_and(|r| r.alpha.is_some());
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec![
        "t",
        "sup_loss",
        "safety_margin_min",
        "eps_max",
        "delta_sup",
        "E_N",
    ];
    if soft {
        header.extend(["alpha", "lambda_mean"]);
    }
    writer.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.t.to_string(),
            fmt17(r.sup_loss),
            fmt17(r.safety_margin_min),
            fmt17(r.eps_max()),
            fmt17(r.delta_sup),
            fmt17(r.e_n),
        ];
        if soft {
            row.push(fmt17(r.alpha.unwrap_or(f64::NAN)));
            row.push(fmt17(r.lambda_mean.unwrap_or(f64::NAN)));
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_records_csv_file(records: &[RunRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_records_csv(records, std::io::BufWriter::new(file))
}

/// Scientific notation with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> RobustConfig {
        RobustConfig::default()
    }

    #[test]
    fn tilt_toward_a_nearly_unsupported_minimum() {
        // The expm1 sum is -1 + 1e-40 here; the answer must not cancel.
        let p = adversarial_policy(&[0.0, 10.0], &[1e-40, 1.0 - 1e-40], 0.05).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12, "{p:?}");
        assert!(p[1] > 0.0 && p[1] < 1e-40);
        let g = dual_objective(&[0.0, 10.0], &[1e-40, 1.0 - 1e-40], 0.0, 0.05).unwrap();
        let exact = 0.05 * (1e-40f64 + (-200.0f64).exp()).ln();
        assert!((g - exact).abs() < 1e-12 * exact.abs());
    }

    #[test]
    fn radius_formula() {
        let cfg = cfg();
        let mut counter = VisitCounter::new(10);
        counter.counts[0] = 25;
        counter.counts[1] = 9;
        counter.total_steps = 100;
        let radii = uncertainty_radius(&counter, &cfg, 10).unwrap();
        assert!((radii.0[0] - 0.2).abs() < 1e-15);
        assert_eq!(radii.0[1], 0.0);
        assert_eq!(radii.0[2], 0.0);
        assert!(uncertainty_radius(&VisitCounter::new(10), &cfg, 10).is_err());
    }

    #[test]
    fn pessimistic_flag_fills_unvisited_states() {
        let cfg = RobustConfig {
            pessimistic_unvisited: true,
            ..cfg()
        };
        let counter = VisitCounter {
            counts: vec![4, 0],
            total_steps: 4,
        };
        let radii = uncertainty_radius(&counter, &cfg, 2).unwrap();
        assert_eq!(radii.0, vec![0.5, 1.0]);
    }

    #[test]
    fn synthetic_schedule_respects_theorem_rate() {
        let cfg = cfg();
        let s = 7;
        for t in 1..500u64 {
            let radii =
                uncertainty_radius(&VisitCounter::uniform_synthetic(s, t), &cfg, s).unwrap();
            let bound = cfg.big_c * (s as f64).powf(cfg.eta) * (t as f64).powf(-cfg.eta);
            assert!(radii.max() <= bound + 1e-15);
            assert!(radii.max() > 0.0);
        }
    }

    #[test]
    fn dual_with_constant_q_is_linear() {
        for lambda in [0.01, 0.5, 3.0, 100.0] {
            let g = dual_objective(&[2.0, 2.0, 2.0], &[0.2, 0.3, 0.5], 0.1, lambda).unwrap();
            assert!((g - (-2.0 + 0.1 * lambda)).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_without_radius_tends_to_negative_mean() {
        let (q, pi) = ([0.0, 1.0], [0.5, 0.5]);
        let mut prev = f64::INFINITY;
        for lambda in [1.0, 10.0, 100.0, 1e3, 1e4, 1e5] {
            let g = dual_objective(&q, &pi, 0.0, lambda).unwrap();
            assert!(g < prev);
            prev = g;
        }
        assert!((prev + 0.5).abs() < 1e-5);
    }

    #[test]
    fn dual_reference_value() {
        // 40-digit reference: log((1 + e^-1) / 2) + 0.05
        let g = dual_objective(&[0.0, 1.0], &[0.5, 0.5], 0.05, 1.0).unwrap();
        assert!((g + 0.329_885_493_041_722_475_368_2).abs() < 1e-14);
        assert!(dual_objective(&[0.0, 1.0], &[0.5, 0.5], 0.05, 0.0).is_err());
        assert!(dual_objective(&[0.0, 1.0], &[0.5, 0.5], 0.05, -1.0).is_err());
    }

    #[test]
    fn zero_radius_is_the_nominal_backup() {
        let sol = optimal_lambda(&[0.3, -1.0, 2.0], &[0.2, 0.5, 0.3], 0.0, &cfg()).unwrap();
        assert_eq!(sol.robust_value, 0.3 * 0.2 - 0.5 + 0.6);
        assert_eq!(sol.lambda_star, cfg().lambda_max);
        assert_eq!(sol.regime, DualRegime::NoAdversary);
    }

    #[test]
    fn huge_radius_reaches_the_worst_action() {
        let sol = optimal_lambda(&[0.3, -1.0, 2.0], &[0.2, 0.5, 0.3], 50.0, &cfg()).unwrap();
        assert!((sol.robust_value + 1.0).abs() < 1e-4);
        assert_eq!(sol.regime, DualRegime::SupportMinimum);
    }

    #[test]
    fn two_action_reference_solution() {
        // lambda* solves KL(p_lambda || pi) = 0.05; 40-digit reference.
        let sol = optimal_lambda(&[0.0, 1.0], &[0.5, 0.5], 0.05, &cfg()).unwrap();
        assert!(sol.is_interior());
        assert!((sol.lambda_star - 1.540_868_715_225_259).abs() < 1e-7);
        assert!((sol.robust_value - 0.343_218_401_635_033_179).abs() < 1e-9);
        assert!((sol.realized_kl - 0.05).abs() < 1e-9);
        assert!(sol.realized_kl <= 0.05 + 1e-12);
    }

    #[test]
    fn non_finite_q_is_rejected() {
        assert!(optimal_lambda(&[f64::NAN, 1.0], &[0.5, 0.5], 0.1, &cfg()).is_err());
        assert!(optimal_lambda(&[f64::INFINITY, 1.0], &[0.5, 0.5], 0.1, &cfg()).is_err());
    }

    #[test]
    fn adversarial_policy_cases() {
        let p = adversarial_policy(&[1.5, 1.5], &[0.3, 0.7], 0.2).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);

        let p = adversarial_policy(&[0.0, 1.0, -2.0], &[0.2, 0.3, 0.5], 1e9).unwrap();
        for (a, b) in p.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-8);
        }

        let p = adversarial_policy(&[0.0, 1.0], &[0.5, 0.5], 1.0).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_879).abs() < 1e-15);
        assert!((p[1] - 0.268_941_421_369_995_120_7).abs() < 1e-15);
        assert!(adversarial_policy(&[0.0, 1.0], &[0.5, 0.5], 0.0).is_err());
    }

    fn small_mdp() -> TabularMdp {
        TabularMdp::from_tables(
            0.8,
            1.0,
            vec![vec![1.0, -1.0, 0.2], vec![0.0, 0.5, -0.4]],
            vec![
                vec![vec![0.6, 0.4], vec![0.1, 0.9], vec![0.5, 0.5]],
                vec![vec![0.2, 0.8], vec![1.0, 0.0], vec![0.3, 0.7]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_radii_reproduce_the_standard_operator() {
        let mdp = small_mdp();
        let pi = Policy::from_rows(vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        let v = ValueFunction(vec![0.4, -2.0]);
        let (robust, _) =
            adversarial_bellman(&mdp, &pi, &v, &UncertaintyRadii::zeros(2), &cfg()).unwrap();
        assert_eq!(robust, bellman::apply_bellman(&mdp, &pi, &v).unwrap());
    }

    #[test]
    fn single_action_has_no_adversary() {
        let mdp = TabularMdp::from_tables(
            0.5,
            1.0,
            vec![vec![1.0], vec![-0.5]],
            vec![vec![vec![0.3, 0.7]], vec![vec![0.9, 0.1]]],
        )
        .unwrap();
        let pi = Policy::uniform(2, 1);
        let v = ValueFunction(vec![1.0, 2.0]);
        let (robust, _) =
            adversarial_bellman(&mdp, &pi, &v, &UncertaintyRadii::uniform(2, 3.0), &cfg()).unwrap();
        let exact = bellman::apply_bellman(&mdp, &pi, &v).unwrap();
        assert!(robust.sup_distance(&exact) < 1e-15);
    }

    #[test]
    fn deterministic_policy_ball_is_a_singleton() {
        let mdp = small_mdp();
        let pi = Policy::deterministic(&[1, 2], 3);
        let v = ValueFunction(vec![0.4, -2.0]);
        let (robust, duals) =
            adversarial_bellman(&mdp, &pi, &v, &UncertaintyRadii::uniform(2, 0.7), &cfg()).unwrap();
        assert_eq!(robust, bellman::apply_bellman(&mdp, &pi, &v).unwrap());
        assert!(duals.iter().all(|d| d.realized_kl == 0.0));
    }

    #[test]
    fn compute_error_bound_cases() {
        let mdp = small_mdp();
        let blank = RunRecord {
            t: 0,
            value: ValueFunction::zeros(2),
            comparison: ValueFunction::zeros(2),
            radii: UncertaintyRadii::zeros(2),
            delta: vec![0.0; 2],
            delta_sup: 0.0,
            sup_loss: 0.0,
            safety_margin_min: 0.0,
            e_n: 0.0,
            alpha: None,
            lambda_mean: None,
        };
        let mut records = vec![blank.clone(); 5];
        assert_eq!(
            compute_error_bound(&records, &mdp, ErrorSeries::Delta).unwrap(),
            0.0
        );
        records[3].delta_sup = 2.5;
        let e = compute_error_bound(&records, &mdp, ErrorSeries::Delta).unwrap();
        assert!((e - 0.8 * 2.5).abs() < 1e-15);
        assert!(compute_error_bound(&[], &mdp, ErrorSeries::Delta).is_err());
    }

    #[test]
    fn csv_header_and_precision() {
        let rec = RunRecord {
            t: 1,
            value: ValueFunction::zeros(1),
            comparison: ValueFunction::zeros(1),
            radii: UncertaintyRadii(vec![0.1]),
            delta: vec![0.0],
            delta_sup: 0.0,
            sup_loss: 1.0 / 3.0,
            safety_margin_min: 0.0,
            e_n: 0.0,
            alpha: None,
            lambda_mean: None,
        };
        let mut buf = Vec::new();
        write_records_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,sup_loss,safety_margin_min,eps_max,delta_sup,E_N"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(row[1], "3.3333333333333331e-1");
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05f64..1.0, n).prop_map(|w| {
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
    }

    proptest! {
        #[test]
        fn feasibility_and_slackness(
            q in prop::collection::vec(-3.0f64..3.0, 3),
            pi in dist(3),
            eps in 0.001f64..2.0,
        ) {
            let sol = optimal_lambda(&q, &pi, eps, &cfg()).unwrap();
            prop_assert!(sol.realized_kl <= eps + 1e-6);
            if sol.is_interior() {
                prop_assert!((sol.realized_kl - eps).abs() <= 1e-4);
            }
            let mean = dot(&pi, &q);
            prop_assert!(sol.robust_value <= mean + 1e-12);
            prop_assert!(sol.robust_value >= support_min(&q, &pi) - 1e-12);
            // The reported value is attained (up to tolerance) by the adversary.
            let attained = dot(&sol.adversary, &q);
            prop_assert!((attained - sol.robust_value).abs() < 1e-6);
        }

        #[test]
        fn more_radius_is_more_conservative(
            q in prop::collection::vec(-3.0f64..3.0, 4),
            pi in dist(4),
            eps in 0.001f64..1.0,
        ) {
            let a = optimal_lambda(&q, &pi, eps, &cfg()).unwrap();
            let b = optimal_lambda(&q, &pi, 2.0 * eps, &cfg()).unwrap();
            prop_assert!(b.robust_value <= a.robust_value + 1e-12);
        }
    }
}
