use nalgebra::DMatrix;

use reachdiff::diffusion::{
    run_sampler, sample, sample_from, schedule_sigmas, select_best, train, Checkpoint, Curriculum, Denoiser,
    Layout, Modality, ProjectorChoice, SampleOptions, TrainConfig,
};
use reachdiff::dynamics::{generate_dataset, Controller, Dataset, Env, Trajectory};
use reachdiff::projection::ProjectorKind;
use reachdiff::Error;

struct Constant(Layout, f64);

impl Denoiser for Constant {
    fn layout(&self) -> &Layout {
        &self.0
    }
    fn denoise(&self, x: &DMatrix<f64>, _: &[f64], _: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_element(x.nrows(), x.ncols(), self.1)
    }
}

fn dataset() -> Dataset {
    let env = Env::by_name("double-integrator").unwrap().with_horizon(8);
    generate_dataset(&env, Controller::LqrGoal, 48, 0).unwrap()
}

fn quick(projector: Option<ProjectorKind>) -> TrainConfig {
    TrainConfig {
        steps: 60,
        batch: 16,
        width: 24,
        inference_projector: projector.clone(),
        projector,
        curriculum: Curriculum::mid(),
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_denoiser_ends_at_its_output() {
    let layout = Layout {
        modality: Modality::S,
        n_states: 2,
        n_actions: 1,
        horizon: 4,
        condition_on_s0: false,
        context_dim: 0,
    };
    let d = Constant(layout, 0.375);
    let sigmas = schedule_sigmas(5, 80.0, 0.002, 7.0).unwrap();
    let x = DMatrix::from_fn(2, 10, |i, j| (i + j) as f64 * 13.0);
    let mut seen = Vec::new();
    let out = run_sampler(&d, &sigmas, x, &DMatrix::zeros(0, 2), &mut |i, _| {
        seen.push(i);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    assert!(out.iter().all(|v| *v == 0.375));
}

#[test]
fn training_and_sampling_are_deterministic() {
    let ds = dataset();
    let cfg = quick(Some(ProjectorKind::p_a()));
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.loss_trace.len(), 60);

    let s0 = ds.trajectories[0].states[0].clone();
    let opts = SampleOptions {
        seed: 9,
        ..SampleOptions::default()
    };
    let x = sample(&a.checkpoint, &s0, 4, &opts).unwrap();
    let y = sample(&b.checkpoint, &s0, 4, &opts).unwrap();
    assert_eq!(x, y);
    // Per-sample streams: a batch of 2 reproduces the first two samples.
    let z = sample(&a.checkpoint, &s0, 2, &opts).unwrap();
    assert_eq!(z.trajectories[..], x.trajectories[..2]);
}

#[test]
fn action_backed_samples_resimulate_exactly() {
    let ds = dataset();
    let ck = train(&ds, &quick(Some(ProjectorKind::p_a()))).unwrap().checkpoint;
    let starts: Vec<_> = ds.trajectories.iter().take(6).map(|t| t.states[0].clone()).collect();
    let out = sample_from(&ck, &starts, &SampleOptions::default()).unwrap();
    for ((t, claim), s0) in out.trajectories.iter().zip(&out.admissible_claim).zip(&starts) {
        assert!(*claim);
        assert!(t.is_exactly_admissible(&ds.env));
        assert_eq!(&t.states[0], s0);
    }
    let off = sample_from(
        &ck,
        &starts,
        &SampleOptions {
            projector: ProjectorChoice::Off,
            ..SampleOptions::default()
        },
    )
    .unwrap();
    assert!(off.admissible_claim.iter().all(|c| !c));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let ds = dataset();
    let ck = train(&ds, &quick(None)).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ck.to_bytes());

    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
}

#[test]
fn projector_must_fit_modality() {
    let ds = dataset();
    let cfg = TrainConfig {
        modality: Modality::S,
        ..quick(Some(ProjectorKind::p_a()))
    };
    assert!(matches!(train(&ds, &cfg), Err(Error::Config(_))));
}

#[test]
fn select_best_prefers_lowest_index_on_ties() {
    let env = Env::by_name("double-integrator").unwrap().with_horizon(2);
    let near = Trajectory::from_states(vec![vec![1.0, 0.0], vec![0.5, 0.0], vec![0.1, 0.0]]);
    let far = Trajectory::from_states(vec![vec![1.0, 0.0], vec![0.9, 0.0], vec![0.8, 0.0]]);
    let trajs = vec![far.clone(), near.clone(), near.clone()];
    assert_eq!(select_best(&env, &trajs, "reward").unwrap(), 1);
    assert_eq!(select_best(&env, &trajs, "survival").unwrap(), 0);
    assert!(select_best(&env, &trajs, "nope").is_err());
    assert!(select_best(&env, &[], "reward").is_err());
}
