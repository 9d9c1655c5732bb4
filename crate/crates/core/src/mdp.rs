//! Finite MDP data model, exact policy evaluation and the probability
//! utilities shared by every operator in the crate.
//!
//! All tables are dense and row-major: `reward[s * A + a]` and
//! `transition[(s * A + a) * S + s']`.

use std::fmt;
use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_len, Error, Result};

/// Tolerance used when checking that probability rows sum to one.
pub const PROB_TOL: f64 = 1e-12;

/// A finite discounted MDP `(S, A, P, r, gamma)` with reward bound `r_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    reward: Vec<f64>,
    transition: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from nested tables. Only the shape is checked here;
    /// use [`validate_mdp`] (or [`TabularMdp::ensure_valid`]) for the
    /// probabilistic invariants.
    pub fn from_tables(
        gamma: f64,
        r_max: f64,
        reward: Vec<Vec<f64>>,
        transition: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n_states = reward.len();
        if n_states == 0 {
            return Err(Error::InvalidMdp("no states".into()));
        }
        let n_actions = reward[0].len();
        if n_actions == 0 {
            return Err(Error::InvalidMdp("no actions".into()));
        }
        check_len("transition states", n_states, transition.len())?;
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        let mut flat_p = Vec::with_capacity(n_states * n_actions * n_states);
        for (r_row, p_block) in reward.into_iter().zip(transition) {
            check_len("reward actions", n_actions, r_row.len())?;
            check_len("transition actions", n_actions, p_block.len())?;
            flat_r.extend(r_row);
            for p_row in p_block {
                check_len("transition next-states", n_states, p_row.len())?;
                flat_p.extend(p_row);
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            r_max,
            reward: flat_r,
            transition: flat_p,
        })
    }

    /// Builds an MDP from flat row-major tables, setting `r_max` to the
    /// largest reward magnitude.
    pub fn from_flat(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        reward: Vec<f64>,
        transition: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        check_len("reward", n_states * n_actions, reward.len())?;
        check_len(
            "transition",
            n_states * n_actions * n_states,
            transition.len(),
        )?;
        let r_max = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            r_max,
            reward,
            transition,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self, s: usize) -> &[f64] {
        &self.reward[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Next-state distribution `P[s][a][.]`.
    pub fn next_states(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Same model with a different reward table; `r_max` is recomputed.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Self::from_flat(
            self.n_states,
            self.n_actions,
            self.gamma,
            reward,
            self.transition.clone(),
        )
    }

    /// Upper bound on `|V|` for any policy value of this MDP.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_mdp(self);
        if report.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidMdp(report.to_string()))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    reward: Vec<Vec<f64>>,
    transition: Vec<Vec<Vec<f64>>>,
}

impl Serialize for TabularMdp {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let reward = (0..self.n_states)
            .map(|s| self.rewards(s).to_vec())
            .collect();
        let transition = (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| self.next_states(s, a).to_vec())
                    .collect()
            })
            .collect();
        MdpDocument {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            r_max: self.r_max,
            reward,
            transition,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularMdp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = MdpDocument::deserialize(deserializer)?;
        let mdp = TabularMdp::from_tables(doc.gamma, doc.r_max, doc.reward, doc.transition)
            .map_err(D::Error::custom)?;
        if mdp.n_states != doc.n_states || mdp.n_actions != doc.n_actions {
            return Err(D::Error::custom(format!(
                "declared shape {}x{} does not match tables {}x{}",
                doc.n_states, doc.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

/// One failed invariant of a [`TabularMdp`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    DiscountOutOfRange {
        gamma: f64,
    },
    NegativeProbability {
        s: usize,
        a: usize,
        next: usize,
        p: f64,
    },
    RowSum {
        s: usize,
        a: usize,
        sum: f64,
    },
    RewardExceedsBound {
        s: usize,
        a: usize,
        r: f64,
        r_max: f64,
    },
    NonFinite {
        s: usize,
        a: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DiscountOutOfRange { gamma } => {
                write!(f, "discount out of range: gamma = {gamma} not in [0, 1)")
            }
            Violation::NegativeProbability { s, a, next, p } => {
                write!(f, "negative probability P[{s}][{a}][{next}] = {p}")
            }
            Violation::RowSum { s, a, sum } => {
                write!(f, "transition row ({s},{a}) sums to {sum}")
            }
            Violation::RewardExceedsBound { s, a, r, r_max } => {
                write!(f, "reward r[{s}][{a}] = {r} exceeds r_max = {r_max}")
            }
            Violation::NonFinite { s, a } => write!(f, "non-finite entry at ({s},{a})"),
        }
    }
}

/// Result of [`validate_mdp`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Reports every violated invariant. Rows are never renormalized.
pub fn validate_mdp(mdp: &TabularMdp) -> ValidationReport {
    let mut violations = Vec::new();
    if !(0.0..1.0).contains(&mdp.gamma) {
        violations.push(Violation::DiscountOutOfRange { gamma: mdp.gamma });
    }
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let r = mdp.reward(s, a);
            let row = mdp.next_states(s, a);
            if !r.is_finite() || row.iter().any(|p| !p.is_finite()) {
                violations.push(Violation::NonFinite { s, a });
                continue;
            }
            if r.abs() > mdp.r_max {
                violations.push(Violation::RewardExceedsBound {
                    s,
                    a,
                    r,
                    r_max: mdp.r_max,
                });
            }
            for (next, &p) in row.iter().enumerate() {
                if p < 0.0 {
                    violations.push(Violation::NegativeProbability { s, a, next, p });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOL {
                violations.push(Violation::RowSum { s, a, sum });
            }
        }
    }
    ValidationReport { violations }
}

/// Row-stochastic state-to-action distribution. Also used for priors and
/// adversarial policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    /// Builds a policy from rows, failing if any row is not a distribution.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for row in rows {
            check_len("policy row", n_actions, row.len())?;
            probs.extend(row);
        }
        Self::from_flat(n_states, n_actions, probs)
    }

    pub fn from_flat(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_len("policy", n_states * n_actions, probs.len())?;
        if n_actions == 0 {
            return Err(Error::InvalidProbability("empty action set".into()));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row).map_err(|e| match e {
                Error::InvalidProbability(msg) => {
                    Error::InvalidProbability(format!("policy row {s}: {msg}"))
                }
                other => other,
            })?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Builds a policy from rows that are already known to be normalized
    /// up to rounding (e.g. softmax outputs).
    pub(crate) fn from_flat_unchecked(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions);
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self::from_flat_unchecked(n_states, n_actions, vec![p; n_states * n_actions])
    }

    /// One-hot policy selecting `actions[s]` in state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self::from_flat_unchecked(actions.len(), n_actions, probs)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.n_actions)
    }

    /// Action with the largest probability in each state (lowest index on ties).
    pub fn modes(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (a, &p)| {
                        if p > best.1 {
                            (a, p)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect()
    }

    pub(crate) fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        check_len("policy states", mdp.n_states(), self.n_states)?;
        check_len("policy actions", mdp.n_actions(), self.n_actions)
    }
}

/// Per-state value vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueFunction(pub Vec<f64>);

impl ValueFunction {
    pub fn zeros(n_states: usize) -> Self {
        Self(vec![0.0; n_states])
    }

    pub fn constant(n_states: usize, c: f64) -> Self {
        Self(vec![c; n_states])
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.0)
    }

    /// `max_s |self(s) - other(s)|`.
    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Deref for ValueFunction {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ValueFunction {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ValueFunction {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// State-action value table `Q[s][a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QFunction {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QFunction {
    pub fn from_flat(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        check_len("q table", n_states * n_actions, values.len())?;
        if values.iter().any(|q| !q.is_finite()) {
            return Err(Error::NonFinite("q table"));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(n_states * n_actions);
        for row in rows {
            check_len("q row", n_actions, row.len())?;
            values.extend(row);
        }
        Self::from_flat(n_states, n_actions, values)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_actions)
    }
}

/// `Q_v(s,a) = r(s,a) + gamma * sum_s' P(s'|s,a) v(s')`.
pub fn q_from_v(mdp: &TabularMdp, v: &ValueFunction) -> Result<QFunction> {
    check_len("value function", mdp.n_states(), v.len())?;
    Ok(q_from_v_unchecked(mdp, v))
}

pub(crate) fn q_from_v_unchecked(mdp: &TabularMdp, v: &[f64]) -> QFunction {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut values = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            values.push(q_entry(mdp, v, s, a));
        }
    }
    QFunction {
        n_states: ns,
        n_actions: na,
        values,
    }
}

#[inline]
pub(crate) fn q_entry(mdp: &TabularMdp, v: &[f64], s: usize, a: usize) -> f64 {
    let expected: f64 = mdp
        .next_states(s, a)
        .iter()
        .zip(v)
        .map(|(p, x)| p * x)
        .sum();
    mdp.reward(s, a) + mdp.gamma() * expected
}

/// Exact `V^pi` from the linear system `(I - gamma P^pi) V = r^pi`.
pub fn exact_policy_value(mdp: &TabularMdp, pi: &Policy) -> Result<ValueFunction> {
    pi.check_against(mdp)?;
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut system = DMatrix::<f64>::identity(ns, ns);
    let mut rhs = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        let row = pi.row(s);
        for a in 0..na {
            let w = row[a];
            if w == 0.0 {
                continue;
            }
            rhs[s] += w * mdp.reward(s, a);
            for (next, p) in mdp.next_states(s, a).iter().enumerate() {
                system[(s, next)] -= gamma * w * p;
            }
        }
    }
    let solution = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular policy-evaluation system".into()))?;
    let v = ValueFunction(solution.iter().copied().collect());

    // The residual is measured relative to the value scale so that large
    // reward magnitudes do not trip the check on rounding alone.
    let backup = crate::bellman::apply_bellman(mdp, pi, &v)?;
    let residual = v.sup_distance(&backup);
    if !(residual <= 1e-10 * v.sup_norm().max(1.0)) {
        return Err(Error::Numerical(format!(
            "policy evaluation residual {residual:e} exceeds tolerance"
        )));
    }
    Ok(v)
}

/// Validates a single probability row (nonnegative, sums to one).
pub fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidProbability(
            "entries must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidProbability(format!("row sums to {sum}")));
    }
    Ok(())
}

/// `D_KL(p || q)`. Returns `+inf` when `p` puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len("kl_divergence", p.len(), q.len())?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pa, &qa) in p.iter().zip(q) {
        if pa <= 0.0 {
            continue;
        }
        if qa <= 0.0 {
            return f64::INFINITY;
        }
        total += pa * (pa / qa).ln();
    }
    // Rounding can leave a tiny negative sum when p ~= q.
    total.max(0.0)
}

/// Shannon entropy `-sum p log p` in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `sum_a |p(a) - q(a)|`.
pub fn l1_distance(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

pub fn sup_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub(crate) fn dot(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn two_state() -> TabularMdp {
        TabularMdp::from_tables(
            0.9,
            2.0,
            vec![vec![1.0, 0.0], vec![-1.0, 2.0]],
            vec![
                vec![vec![0.8, 0.2], vec![0.3, 0.7]],
                vec![vec![0.5, 0.5], vec![0.0, 1.0]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_mdp_validates() {
        assert!(validate_mdp(&two_state()).is_ok());
    }

    #[test]
    fn short_row_is_reported_with_indices() {
        let mdp = TabularMdp::from_tables(
            0.9,
            1.0,
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![
                vec![vec![0.5, 0.5], vec![0.6, 0.3]],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            ],
        )
        .unwrap();
        let report = validate_mdp(&mdp);
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::RowSum { s, a, sum } => {
                assert_eq!((*s, *a), (0, 1));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected violation {other:?}"),
        }
    }

    #[test]
    fn discount_of_one_is_rejected() {
        let mut mdp = two_state();
        mdp.gamma = 1.0;
        let report = validate_mdp(&mdp);
        assert!(report.to_string().contains("discount out of range"));
        assert!(mdp.ensure_valid().is_err());
    }

    #[test]
    fn reward_above_bound_is_reported() {
        let mut mdp = two_state();
        mdp.r_max = 1.5;
        let report = validate_mdp(&mdp);
        assert!(matches!(
            report.violations[0],
            Violation::RewardExceedsBound { s: 1, a: 1, .. }
        ));
    }

    #[test]
    fn q_equals_reward_without_lookahead() {
        let mut mdp = two_state();
        let v = ValueFunction(vec![3.0, -7.0]);
        mdp.gamma = 0.0;
        let q = q_from_v(&mdp, &v).unwrap();
        assert_eq!(q.values, mdp.reward);

        let mdp = two_state();
        let q = q_from_v(&mdp, &ValueFunction::zeros(2)).unwrap();
        assert_eq!(q.values, mdp.reward);
    }

    #[test]
    fn q_matches_hand_computation() {
        // r + 0.9 * P v with v = [1, 2]
        let q = q_from_v(&two_state(), &ValueFunction(vec![1.0, 2.0])).unwrap();
        let expected = [
            1.0 + 0.9 * (0.8 + 0.4),
            0.0 + 0.9 * (0.3 + 1.4),
            -1.0 + 0.9 * (0.5 + 1.0),
            2.0 + 0.9 * 2.0,
        ];
        for (got, want) in q.values.iter().zip(expected) {
            assert!((got - want).abs() < 1e-14);
        }
        assert!(q_from_v(&two_state(), &ValueFunction(vec![1.0])).is_err());
    }

    #[test]
    fn single_state_value_is_geometric_series() {
        let mdp =
            TabularMdp::from_tables(0.75, 2.0, vec![vec![2.0]], vec![vec![vec![1.0]]]).unwrap();
        let v = exact_policy_value(&mdp, &Policy::uniform(1, 1)).unwrap();
        assert!((v[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn myopic_value_is_expected_reward() {
        let mut mdp = two_state();
        mdp.gamma = 0.0;
        let pi = Policy::from_rows(vec![vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        let v = exact_policy_value(&mdp, &pi).unwrap();
        assert!((v[0] - 0.25).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_known_values() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        // 40-digit reference
        let v = kl_divergence(&[0.7311, 0.2689], &[0.5, 0.5]).unwrap();
        assert!((v - 0.110_985_497_405_103_549_357_4).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            f64::INFINITY
        );
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn entropy_known_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let h = entropy(&[0.9, 0.1]).unwrap();
        assert!((h - 0.325_082_973_391_448_239_506_5).abs() < 1e-15);
        assert!(entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn invalid_policy_rows_fail_loudly() {
        assert!(Policy::from_rows(vec![vec![0.5, 0.49]]).is_err());
        assert!(Policy::from_rows(vec![vec![1.1, -0.1]]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mdp = TabularMdp::from_tables(
            0.95,
            0.123_456_789_012_345_67,
            vec![vec![0.1, -0.123_456_789_012_345_67], vec![1e-300, 3.0e-5]],
            vec![
                vec![vec![1.0 / 3.0, 2.0 / 3.0], vec![0.1, 0.9]],
                vec![vec![0.7, 0.30000000000000004], vec![0.0, 1.0]],
            ],
        )
        .unwrap();
        let text = mdp.to_json().unwrap();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(back, mdp);
    }

    #[test]
    fn json_shape_mismatch_is_rejected() {
        let text = r#"{"n_states":2,"n_actions":1,"gamma":0.5,"r_max":1,
            "reward":[[0.0]],"transition":[[[1.0]]]}"#;
        assert!(TabularMdp::from_json(text).is_err());
    }

    fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn pinsker_holds(p in distribution(4), q in distribution(4)) {
            let kl = kl_divergence(&p, &q).unwrap();
            let l1 = l1_distance(&p, &q);
            prop_assert!(kl + 1e-15 >= 0.5 * l1 * l1);
        }

        #[test]
        fn uniform_maximizes_entropy(p in distribution(5)) {
            prop_assert!(entropy_unchecked(&p) <= 5f64.ln() + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn expectation_term_is_gamma_lipschitz(
            v1 in prop::collection::vec(-10.0f64..10.0, 2),
            v2 in prop::collection::vec(-10.0f64..10.0, 2),
        ) {
            let mdp = two_state();
            let (v1, v2) = (ValueFunction(v1), ValueFunction(v2));
            let q1 = q_from_v(&mdp, &v1).unwrap();
            let q2 = q_from_v(&mdp, &v2).unwrap();
            let diff = sup_norm(
                &q1.values.iter().zip(&q2.values).map(|(a, b)| a - b).collect::<Vec<_>>(),
            );
            prop_assert!(diff <= mdp.gamma() * v1.sup_distance(&v2) + 1e-12);
        }
    }
}
