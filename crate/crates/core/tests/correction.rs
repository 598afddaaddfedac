use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reachdiff::dynamics::{generate_dataset, Controller, Env, Trajectory};
use reachdiff::projection::{
    project_trajectory, train_correction_policy, CorrectionConfig, CorrectionPolicy, ProjectorKind,
};

fn trained() -> (Env, reachdiff::dynamics::Dataset, CorrectionPolicy) {
    let env = Env::by_name("double-integrator").unwrap().with_horizon(16);
    let ds = generate_dataset(&env, Controller::LqrGoal, 64, 3).unwrap();
    let cfg = CorrectionConfig {
        steps: 1500,
        seed: 4,
        ..CorrectionConfig::default()
    };
    let policy = train_correction_policy(&env, &ds, &cfg).unwrap();
    (env, ds, policy)
}

#[test]
fn policy_training_behaviour() {
    let (env, ds, policy) = trained();

    // Loss falls on the fixed evaluation batch.
    assert!(policy.final_loss < policy.loss_trace[0]);

    // Zero residual needs (almost) no correction.
    let half_width = 0.5 * (env.spec().action_high[0] - env.spec().action_low[0]);
    let at_zero = policy.correction(&[0.0, 0.0]);
    assert!(at_zero[0].abs() < 0.05 * half_width, "π(0) = {at_zero:?}");

    // On the linear env the policy approximates the affine inverse.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut rel = Vec::new();
    for _ in 0..200 {
        let traj = &ds.trajectories[rng.random_range(0..ds.len())];
        let t = rng.random_range(0..traj.horizon());
        let (s, a) = (&traj.states[t], &traj.actions.as_ref().unwrap()[t]);
        let planted = rng.random_range(-0.1..0.1) * half_width;
        let shifted = a[0] + planted;
        if !(env.spec().action_low[0]..=env.spec().action_high[0]).contains(&shifted) || planted.abs() < 0.02 * half_width {
            continue;
        }
        let reached = env.step(s, &[shifted]).unwrap();
        let residual: Vec<f64> = reached.iter().zip(&traj.states[t + 1]).map(|(x, y)| x - y).collect();
        let recovered = policy.correction(&residual)[0];
        rel.push((recovered - planted).abs() / planted.abs());
    }
    rel.sort_by(f64::total_cmp);
    let median = rel[rel.len() / 2];
    assert!(median < 0.2, "median relative error {median}");
}

#[test]
fn policy_is_deterministic_and_round_trips() {
    let (env, ds, policy) = trained();
    let cfg = policy.config.clone();
    let again = train_correction_policy(&env, &ds, &cfg).unwrap();
    assert_eq!(policy.to_bytes(), again.to_bytes());
    let back = CorrectionPolicy::from_bytes(&policy.to_bytes()).unwrap();
    assert_eq!(back, policy);
}

#[test]
fn psa_output_resimulates_exactly() {
    let (env, ds, policy) = trained();
    let kind = ProjectorKind::p_sa(Arc::new(policy));
    let src = &ds.trajectories[0];
    // Perturb the states so the correction is active.
    let noisy = Trajectory {
        states: src
            .states
            .iter()
            .enumerate()
            .map(|(t, s)| if t == 0 { s.clone() } else { vec![s[0] + 0.01, s[1] - 0.02] })
            .collect(),
        actions: src.actions.clone(),
    };
    let out = project_trajectory(&env, &noisy, &kind, None, &mut |_| true).unwrap();
    assert!(out.trajectory.is_exactly_admissible(&env));
}

#[test]
fn dataset_without_actions_is_rejected() {
    let env = Env::by_name("double-integrator").unwrap().with_horizon(4);
    let mut ds = generate_dataset(&env, Controller::LqrGoal, 4, 0).unwrap();
    ds.trajectories[1].actions = None;
    let err = train_correction_policy(&env, &ds, &CorrectionConfig::default()).unwrap_err();
    assert!(matches!(err, reachdiff::Error::Config(_)));
}
