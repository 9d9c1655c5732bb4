//! Sampled evaluation backups: the estimation error `delta_t` of
//! approximate MPI.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bellman;
use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp, ValueFunction};
use crate::robust::{sample_index, BackupEstimator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchGrowth {
    #[default]
    Constant,
    /// `b_t = b_0 t`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Per state, average `r(s, a) + gamma v(s')` over `b_t` draws
    /// `a ~ pi(s)`, `s' ~ P(s, a)`.
    Minibatch {
        batch: usize,
        #[serde(default)]
        growth: BatchGrowth,
    },
    /// Exact backup plus `N(0, sigma_t^2)` per state with
    /// `sigma_t = stddev * t^-decay`.
    AdditiveGaussian {
        stddev: f64,
        #[serde(default)]
        decay: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub mode: NoiseMode,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            NoiseMode::Minibatch { batch, .. } if batch < 1 => {
                Err(Error::InvalidConfig("batch size must be >= 1".into()))
            }
            NoiseMode::AdditiveGaussian { stddev, decay }
                if !(stddev >= 0.0 && stddev.is_finite() && decay >= 0.0) =>
            {
                Err(Error::InvalidConfig(
                    "stddev and decay must be finite and >= 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn batch_size(&self, t: usize) -> usize {
        match self.mode {
            NoiseMode::Minibatch { batch, growth } => match growth {
                BatchGrowth::Constant => batch,
                BatchGrowth::Linear => batch * t.max(1),
            },
            NoiseMode::AdditiveGaussian { .. } => 0,
        }
    }

    pub fn stddev(&self, t: usize) -> f64 {
        match self.mode {
            NoiseMode::AdditiveGaussian { stddev, decay } => {
                stddev * (t.max(1) as f64).powf(-decay)
            }
            NoiseMode::Minibatch { .. } => 0.0,
        }
    }
}

/// A noisy estimate of `T^pi v` and `delta = noisy - exact`.
pub fn sampled_bellman(
    mdp: &TabularMdp,
    pi: &Policy,
    v: &ValueFunction,
    noise: &NoiseSpec,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ValueFunction, Vec<f64>)> {
    noise.validate()?;
    let exact = bellman::apply_bellman(mdp, pi, v)?;
    let noisy: Vec<f64> = match noise.mode {
        NoiseMode::Minibatch { .. } => {
            let batch = noise.batch_size(t);
            (0..mdp.n_states())
                .map(|s| {
                    let mut total = 0.0;
                    for _ in 0..batch {
                        let a = sample_index(pi.row(s), rng);
                        let next = sample_index(mdp.next_states(s, a), rng);
                        total += mdp.reward(s, a) + mdp.gamma() * v[next];
                    }
                    total / batch as f64
                })
                .collect()
        }
        NoiseMode::AdditiveGaussian { .. } => {
            let sigma = noise.stddev(t);
            if sigma == 0.0 {
                exact.0.clone()
            } else {
                let normal =
                    Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                exact.iter().map(|x| x + normal.sample(rng)).collect()
            }
        }
    };
    let delta = noisy.iter().zip(exact.iter()).map(|(a, b)| a - b).collect();
    Ok((ValueFunction(noisy), delta))
}

/// [`BackupEstimator`] drawing from [`sampled_bellman`] with its own seeded
/// stream.
pub struct SampledBackup {
    noise: NoiseSpec,
    rng: ChaCha8Rng,
}

impl SampledBackup {
    pub fn new(noise: NoiseSpec) -> Result<Self> {
        noise.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(noise.seed);
        Ok(Self { noise, rng })
    }
}

impl BackupEstimator for SampledBackup {
    fn backup(
        &mut self,
        mdp: &TabularMdp,
        policy: &Policy,
        v: &ValueFunction,
        t: usize,
    ) -> Result<ValueFunction> {
        Ok(sampled_bellman(mdp, policy, v, &self.noise, t, &mut self.rng)?.0)
    }
}
