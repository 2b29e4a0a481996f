//! Closed-loop Monte-Carlo checks that only need the simulator and the
//! oracle estimators (no trained model).

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use tinyalign_core::controller::{run_servo, Estimator, ServoConfig};
use tinyalign_core::scene::Rig;

#[test]
fn noisy_oracle_hits_95_percent_at_2mm() {
    let rig = Rig::desk_default();
    let cfg = ServoConfig {
        success_tolerance: 0.002,
        ..ServoConfig::default()
    };
    let mut successes = 0;
    let trials = 100;
    for seed in 0..trials {
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
        let outcome = run_servo(
            &rig,
            &Estimator::NoisyOracle { sigma: 0.0005 },
            &cfg,
            &mut rng,
        )
        .unwrap();
        if outcome.success {
            successes += 1;
        }
    }
    assert!(
        successes >= 95,
        "only {successes}/{trials} noisy-oracle trials succeeded"
    );
}

#[test]
fn oracle_trials_always_converge() {
    let rig = Rig::desk_default();
    let cfg = ServoConfig::default();
    for seed in 0..20 {
        let mut rng = ChaCha12Rng::seed_from_u64(2000 + seed);
        let outcome = run_servo(&rig, &Estimator::Oracle, &cfg, &mut rng).unwrap();
        assert!(outcome.success, "seed {seed}: error {}", outcome.final_error);
        assert!(outcome.final_error < 1e-4);
    }
}
