//! Distributionally robust modified policy iteration for tabular MDPs.
//!
//! Policy evaluation runs against an adversary that may re-weight the
//! current policy inside a KL ball whose radius shrinks with visitation:
//!
//! ```text
//! V~(s) = min { sum_a p(a) Q(s, a) : D_KL(p || pi(s)) <= eps(s) }
//! ```
//!
//! | module | contents |
//! |---|---|
//! | [`mdp`] | tabular MDPs, policies, values, exact evaluation, KL and entropy |
//! | [`bellman`] | Bellman operators, greedy improvement, exact MPI |
//! | [`robust`] | the KL dual, radius schedule, DR-MPI and its error bounds |
//! | [`soft`] | the entropy-regularized robust backup and soft DR-MPI |
//! | [`approx`] | log-sum-exp and second-order forms, shaping, delta method |
//! | [`oracles`] | slow independent references for tests |
//! | [`harness`] | environments, noisy backups, experiments, plots, self-checks |
//!
//! ```
//! use drpi::robust::{optimal_lambda, RobustConfig};
//!
//! let sol = optimal_lambda(&[0.0, 1.0], &[0.5, 0.5], 0.05, &RobustConfig::default())?;
//! assert!(sol.robust_value < 0.5);
//! # Ok::<(), drpi::Error>(())
//! ```

pub mod approx;
pub mod bellman;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod oracles;
pub mod robust;
pub mod soft;

pub use error::{Error, Result};

// Book chapters run as doctests so their snippets track the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mdps.md")]
    mod mdps {}
    #[doc = include_str!("../../../book/src/kl-dual.md")]
    mod kl_dual {}
    #[doc = include_str!("../../../book/src/dr-mpi.md")]
    mod dr_mpi {}
    #[doc = include_str!("../../../book/src/soft.md")]
    mod soft {}
    #[doc = include_str!("../../../book/src/approximations.md")]
    mod approximations {}
    #[doc = include_str!("../../../book/src/oracles.md")]
    mod oracles {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
