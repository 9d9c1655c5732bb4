use drpi::bellman::{optimal_value, regularized_bellman, run_mpi, EvalDepth, MpiConfig};
use drpi::harness::verify::random_distribution;
use drpi::harness::{generate_garnet, GarnetSpec};
use drpi::mdp::{Policy, TabularMdp, ValueFunction};
use drpi::robust::{RobustConfig, UncertaintyRadii};
use drpi::soft::{
    run_soft_dr_mpi, soft_adversarial_bellman, soft_gap_bound, soft_optimal_value, SoftConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn garnet(seed: u64) -> TabularMdp {
    generate_garnet(&GarnetSpec {
        n_states: 12,
        n_actions: 4,
        branching: 3,
        sparsity: 0.0,
        gamma: 0.9,
        seed,
    })
    .unwrap()
}

fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> Policy {
    Policy::from_rows((0..ns).map(|_| random_distribution(rng, na)).collect()).unwrap()
}

fn random_value(rng: &mut ChaCha8Rng, ns: usize, scale: f64) -> ValueFunction {
    ValueFunction(
        (0..ns)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
}

#[test]
fn vanishing_temperature_recovers_mpi() {
    let mpi = MpiConfig {
        m: EvalDepth::Steps(3),
        max_iterations: 60,
        run_to_max: true,
        ..MpiConfig::default()
    };
    for seed in 0..5 {
        let mdp = garnet(seed);
        let v0 = ValueFunction::zeros(mdp.n_states());
        let soft = SoftConfig {
            alpha: 1e-8,
            robust: RobustConfig {
                big_c: 0.0,
                ..RobustConfig::default()
            },
            mpi: mpi.clone(),
        };
        let trace = run_soft_dr_mpi(&mdp, &soft, &v0, seed).unwrap();
        let reference = run_mpi(&mdp, &mpi, &v0).unwrap();
        for (r, step) in trace.records.iter().zip(&reference) {
            assert!(r.value.sup_distance(&step.value) < 1e-6);
        }
    }
}

#[test]
fn soft_optimum_sits_between_hard_optimum_and_entropy_ceiling() {
    for seed in 0..5 {
        let mdp = garnet(seed);
        let alpha = 0.3;
        let hard = optimal_value(&mdp).unwrap();
        let soft = soft_optimal_value(&mdp, alpha).unwrap();
        let ceiling = alpha * (mdp.n_actions() as f64).ln() / (1.0 - mdp.gamma());
        for s in 0..mdp.n_states() {
            assert!(soft[s] >= hard[s] - 1e-9);
            assert!(soft[s] <= hard[s] + ceiling + 1e-9);
        }
    }
}

#[test]
fn soft_robust_backup_is_a_gamma_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..20 {
        let mdp = garnet(seed);
        let ns = mdp.n_states();
        let pi = random_policy(&mut rng, ns, mdp.n_actions());
        let radii = UncertaintyRadii((0..ns).map(|_| rng.random_range(0.0..0.5)).collect());
        let cfg = SoftConfig {
            alpha: rng.random_range(0.05..1.0),
            ..SoftConfig::default()
        };
        let v = random_value(&mut rng, ns, 5.0);
        let w = random_value(&mut rng, ns, 5.0);
        let (tv, _) = soft_adversarial_bellman(&mdp, &pi, &v, &radii, &cfg).unwrap();
        let (tw, _) = soft_adversarial_bellman(&mdp, &pi, &w, &radii, &cfg).unwrap();
        assert!(tv.sup_distance(&tw) <= mdp.gamma() * v.sup_distance(&w) + 1e-9);
    }
}

#[test]
fn soft_robust_backup_stays_within_its_gap_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for seed in 0..20 {
        let mdp = garnet(seed);
        let ns = mdp.n_states();
        let pi = random_policy(&mut rng, ns, mdp.n_actions());
        let eps = rng.random_range(0.0..1.0);
        let radii = UncertaintyRadii::uniform(ns, eps);
        let cfg = SoftConfig {
            alpha: rng.random_range(0.05..1.0),
            ..SoftConfig::default()
        };
        let v = random_value(&mut rng, ns, 5.0);
        let (robust, _) = soft_adversarial_bellman(&mdp, &pi, &v, &radii, &cfg).unwrap();
        let nominal = regularized_bellman(&mdp, &pi, &v, cfg.alpha).unwrap();
        let bound = soft_gap_bound(&mdp, &v, eps, cfg.alpha);
        for s in 0..ns {
            let gap = nominal[s] - robust[s];
            assert!(gap >= -1e-10, "robust backup above nominal by {}", -gap);
            assert!(gap <= bound + 1e-10, "gap {gap} exceeds bound {bound}");
        }
    }
}
