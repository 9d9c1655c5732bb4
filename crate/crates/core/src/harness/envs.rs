//! Seeded environment generators.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Random MDP family: `b` reachable next states per `(s, a)` with
/// Dirichlet(1) weights, standard-normal rewards zeroed with probability
/// `sparsity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarnetSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub branching: usize,
    #[serde(default)]
    pub sparsity: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl GarnetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(Error::InvalidConfig(
                "garnet needs states and actions".into(),
            ));
        }
        if self.branching < 1 || self.branching > self.n_states {
            return Err(Error::InvalidConfig(format!(
                "branching {} outside 1..={}",
                self.branching, self.n_states
            )));
        }
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::InvalidConfig("sparsity must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn generate_garnet(spec: &GarnetSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let (ns, na) = (spec.n_states, spec.n_actions);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for sa in 0..ns * na {
        let targets = sample(&mut rng, ns, spec.branching);
        let weights: Vec<f64> = (0..spec.branching).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        for (next, w) in targets.iter().zip(&weights) {
            transition[sa * ns + next] = w / total;
        }
        let sparse = rng.random::<f64>() < spec.sparsity;
        let draw: f64 = StandardNormal.sample(&mut rng);
        reward[sa] = if sparse { 0.0 } else { draw };
    }
    TabularMdp::from_flat(ns, na, spec.gamma, reward, transition)
}

/// Grid with a start in the bottom-left corner, a goal in the bottom-right
/// corner and traps on the bottom row between them. Actions move up, right,
/// down, left; with probability `slip` the move goes to one of the two
/// perpendicular directions instead. Moves off the grid stay in place.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliffGridSpec {
    pub width: usize,
    pub height: usize,
    pub trap_penalty: f64,
    pub step_reward: f64,
    pub slip: f64,
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl CliffGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width * self.height < 2 || self.width < 2 {
            return Err(Error::InvalidConfig("cliff grid needs width >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.slip) {
            return Err(Error::InvalidConfig("slip must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig("gamma must be in [0, 1)".into()));
        }
        if !(self.trap_penalty.is_finite() && self.step_reward.is_finite()) {
            return Err(Error::NonFinite("cliff rewards"));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.width * self.height
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn start(&self) -> usize {
        self.state(self.height - 1, 0)
    }

    pub fn goal(&self) -> usize {
        self.state(self.height - 1, self.width - 1)
    }

    pub fn is_trap(&self, s: usize) -> bool {
        let (row, col) = (s / self.width, s % self.width);
        row == self.height - 1 && col > 0 && col < self.width - 1
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        s == self.goal() || self.is_trap(s)
    }

    fn step(&self, s: usize, direction: usize) -> usize {
        let (row, col) = (s / self.width, s % self.width);
        let (r, c) = match direction {
            0 if row > 0 => (row - 1, col),
            1 if col + 1 < self.width => (row, col + 1),
            2 if row + 1 < self.height => (row + 1, col),
            3 if col > 0 => (row, col - 1),
            _ => (row, col),
        };
        self.state(r, c)
    }
}

pub const CLIFF_ACTIONS: usize = 4;

pub fn generate_cliff_grid(spec: &CliffGridSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let ns = spec.n_states();
    let na = CLIFF_ACTIONS;
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            if spec.is_terminal(s) {
                row[s] = 1.0;
                continue;
            }
            let moves = [
                (a, 1.0 - spec.slip),
                ((a + 1) % 4, 0.5 * spec.slip),
                ((a + 3) % 4, 0.5 * spec.slip),
            ];
            let mut trap_mass = 0.0;
            for (direction, p) in moves {
                if p > 0.0 {
                    let next = spec.step(s, direction);
                    row[next] += p;
                    if spec.is_trap(next) {
                        trap_mass += p;
                    }
                }
            }
            reward[s * na + a] = spec.step_reward + trap_mass * spec.trap_penalty;
        }
    }
    TabularMdp::from_flat(ns, na, spec.gamma, reward, transition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::validate_mdp;

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

    #[test]
    fn garnet_is_seeded_and_valid() {
        let a = generate_garnet(&garnet(7)).unwrap();
        let b = generate_garnet(&garnet(7)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(validate_mdp(&a).is_ok());
        let c = generate_garnet(&garnet(8)).unwrap();
        assert_ne!(a, c);
        for s in 0..20 {
            for act in 0..5 {
                let reachable = a.next_states(s, act).iter().filter(|p| **p > 0.0).count();
                assert_eq!(reachable, 3);
            }
        }
    }

    #[test]
    fn dense_garnet_rows() {
        let spec = GarnetSpec {
            n_states: 6,
            branching: 6,
            ..garnet(3)
        };
        let mdp = generate_garnet(&spec).unwrap();
        assert!(mdp.next_states(2, 1).iter().all(|p| *p > 0.0));
    }

    #[test]
    fn sparse_garnet_rewards() {
        let spec = GarnetSpec {
            sparsity: 1.0,
            ..garnet(3)
        };
        let mdp = generate_garnet(&spec).unwrap();
        assert_eq!(mdp.r_max(), 0.0);
    }

    #[test]
    fn garnet_spec_errors() {
        assert!(generate_garnet(&GarnetSpec {
            branching: 0,
            ..garnet(1)
        })
        .is_err());
        assert!(generate_garnet(&GarnetSpec {
            branching: 21,
            ..garnet(1)
        })
        .is_err());
        assert!(generate_garnet(&GarnetSpec {
            gamma: 1.0,
            ..garnet(1)
        })
        .is_err());
    }

    fn grid(slip: f64) -> CliffGridSpec {
        CliffGridSpec {
            width: 4,
            height: 3,
            trap_penalty: -10.0,
            step_reward: -1.0,
            slip,
            gamma: 0.95,
            seed: 0,
        }
    }

    #[test]
    fn cliff_without_slip_is_deterministic() {
        let mdp = generate_cliff_grid(&grid(0.0)).unwrap();
        for s in 0..12 {
            for a in 0..4 {
                let row = mdp.next_states(s, a);
                assert_eq!(row.iter().filter(|p| **p == 1.0).count(), 1);
            }
        }
    }

    #[test]
    fn cliff_traps_absorb() {
        let spec = grid(0.2);
        let mdp = generate_cliff_grid(&spec).unwrap();
        assert!(validate_mdp(&mdp).is_ok());
        for s in (0..12).filter(|&s| spec.is_trap(s)) {
            for a in 0..4 {
                assert_eq!(mdp.next_states(s, a)[s], 1.0);
                assert_eq!(mdp.reward(s, a), 0.0);
            }
        }
        // Moving right from the start falls into the first trap.
        let start = spec.start();
        assert!((mdp.reward(start, 1) - (-1.0 - 0.8 * 10.0)).abs() < 1e-12);
    }
}
