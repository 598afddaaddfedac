//! First-order deterministic sampling with pinned `s_0` and gated projection.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::{Env, State, Trajectory};
use crate::error::{Error, Result};
use crate::projection::{project_trajectory, ProjectorKind, ProjectorTag};

use super::curriculum::Curriculum;
use super::denoiser::{blend, Denoiser, Modality};
use super::model::{condition, decode, encode_into, pin_initial, Checkpoint};
use super::schedule::NoiseSchedule;
use super::train::check_projector;

/// Runs `x ← S(x; σ_i, σ_{i+1})` over the ladder, calling `after_step(i, x)`
/// after each step.
pub fn run_sampler(
    denoiser: &dyn Denoiser,
    sigmas: &[f64],
    mut x: DMatrix<f64>,
    cond: &DMatrix<f64>,
    after_step: &mut dyn FnMut(usize, &mut DMatrix<f64>) -> Result<()>,
) -> Result<DMatrix<f64>> {
    let tokens = denoiser.layout().tokens();
    let batch = x.ncols() / tokens;
    for i in 0..sigmas.len().saturating_sub(1) {
        let (s, s_next) = (sigmas[i], sigmas[i + 1]);
        if !(s > 0.0) || !(s_next >= 0.0 && s_next < s) {
            return Err(Error::InvalidInput(format!("noise ladder is not decreasing at {i}")));
        }
        let d = denoiser.denoise(&x, &vec![s; batch], cond);
        x = blend(&x, &d, s, s_next);
        after_step(i, &mut x)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum ProjectorChoice {
    /// Whatever the checkpoint records.
    #[default]
    Checkpoint,
    Off,
    Use(ProjectorKind),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleOptions {
    pub seed: u64,
    pub projector: ProjectorChoice,
    /// Overrides the checkpoint's inference curriculum.
    pub curriculum: Option<Curriculum>,
    /// Overrides the number of denoising steps.
    pub steps: Option<usize>,
    pub context: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub trajectories: Vec<Trajectory>,
    /// Admissible by construction: action-only model, or an action-backed
    /// projector applied to every transition of the final step.
    pub admissible_claim: Vec<bool>,
    /// Projector used, if any.
    pub projector: Option<String>,
    pub curriculum: String,
    pub sigmas: Vec<f64>,
}

/// `batch` samples from one initial state.
pub fn sample(ckpt: &Checkpoint, s0: &[f64], batch: usize, opts: &SampleOptions) -> Result<SampleBatch> {
    sample_from(ckpt, &vec![s0.to_vec(); batch], opts)
}

/// One sample per entry of `initial_states`. Sample `b` draws its noise and
/// gates from stream `b` of the seed, so results do not depend on batch size.
pub fn sample_from(ckpt: &Checkpoint, initial_states: &[State], opts: &SampleOptions) -> Result<SampleBatch> {
    let env = &ckpt.env;
    let layout = *ckpt.layout();
    if initial_states.is_empty() {
        return Err(Error::InvalidInput("sampling needs at least one initial state".into()));
    }
    for s0 in initial_states {
        if s0.len() != env.n_states() || s0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "initial state must be {} finite values",
                env.n_states()
            )));
        }
    }
    let projector = match &opts.projector {
        ProjectorChoice::Checkpoint => ckpt.projector.clone(),
        ProjectorChoice::Off => None,
        ProjectorChoice::Use(p) => Some(p.clone()),
    };
    if let Some(p) = &projector {
        check_projector(layout.modality, p)?;
    }
    let curriculum = opts.curriculum.unwrap_or(ckpt.curriculum);
    curriculum.validate()?;
    let schedule = NoiseSchedule {
        steps: opts.steps.unwrap_or(ckpt.schedule.steps),
        ..ckpt.schedule
    };
    let sigmas = schedule.sigmas()?;

    let n = initial_states.len();
    let tokens = layout.tokens();
    let c = layout.channels();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|b| {
            let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
            r.set_stream(b as u64);
            r
        })
        .collect();
    let mut x = DMatrix::zeros(c, n * tokens);
    let mut cond = DMatrix::zeros(layout.cond_dim(), n);
    for (b, s0) in initial_states.iter().enumerate() {
        for col in b * tokens..(b + 1) * tokens {
            for r in 0..c {
                let z: f64 = rngs[b].sample(StandardNormal);
                x[(r, col)] = sigmas[0] * z;
            }
        }
        pin_initial(&layout, &ckpt.stats, s0, &mut x, b * tokens);
        cond.set_column(b, &DVector::from_vec(condition(&layout, &ckpt.stats, s0, &opts.context)?));
    }

    let last = sigmas.len() - 2;
    let mut outputs: Vec<Option<Trajectory>> = vec![None; n];
    let mut claims = vec![layout.modality == Modality::A; n];
    let mut after = |i: usize, x: &mut DMatrix<f64>| -> Result<()> {
        for (b, s0) in initial_states.iter().enumerate() {
            pin_initial(&layout, &ckpt.stats, s0, x, b * tokens);
        }
        let gates: Vec<Vec<bool>> = match &projector {
            Some(_) if layout.modality != Modality::A => rngs
                .iter_mut()
                .map(|r| (0..layout.horizon).map(|_| curriculum.gate(sigmas[i], r)).collect())
                .collect(),
            _ => vec![vec![false; layout.horizon]; n],
        };
        if i < last && !gates.iter().flatten().any(|g| *g) {
            return Ok(());
        }
        let snapshot = &*x;
        let results: Vec<(Trajectory, bool)> = (0..n)
            .into_par_iter()
            .map(|b| project_sample(env, ckpt, projector.as_ref(), snapshot, b, &initial_states[b], &gates[b]))
            .collect::<Result<_>>()?;
        for (b, (traj, projected)) in results.into_iter().enumerate() {
            if projected {
                encode_into(&layout, &ckpt.stats, &traj, x, b * tokens);
            }
            if i == last {
                let backed = projector.as_ref().is_some_and(ProjectorKind::is_action_backed);
                if layout.modality != Modality::A {
                    claims[b] = backed && gates[b].iter().all(|g| *g);
                }
                outputs[b] = Some(traj);
            }
        }
        Ok(())
    };
    run_sampler(&ckpt.denoiser, &sigmas, x, &cond, &mut after)?;

    Ok(SampleBatch {
        trajectories: outputs.into_iter().map(|t| t.expect("final step decodes every sample")).collect(),
        admissible_claim: claims,
        projector: projector.as_ref().map(|p| p.name().to_string()),
        curriculum: curriculum.name().to_string(),
        sigmas,
    })
}

/// Decoded sample `b`, projected on the gated transitions. The reference
/// for `Pref` is the sample itself before projection.
fn project_sample(
    env: &Env,
    ckpt: &Checkpoint,
    projector: Option<&ProjectorKind>,
    x: &DMatrix<f64>,
    b: usize,
    s0: &[f64],
    gates: &[bool],
) -> Result<(Trajectory, bool)> {
    let layout = ckpt.layout();
    let predicted = decode(layout, &ckpt.stats, env, x, b * layout.tokens(), s0)?;
    let Some(kind) = projector.filter(|_| gates.iter().any(|g| *g)) else {
        return Ok((predicted, false));
    };
    let reference = matches!(kind.tag, ProjectorTag::PRef { .. }).then_some(&predicted);
    let out = project_trajectory(env, &predicted, kind, reference, &mut |t| gates[t])?;
    let mut traj = out.trajectory;
    if layout.modality == Modality::SA && traj.actions.is_none() {
        traj.actions = predicted.actions.clone();
    }
    Ok((traj, true))
}

pub const SELECTION_METRICS: &[&str] = &["survival", "reward", "completion"];

fn score(env: &Env, t: &Trajectory, metric: &str) -> Result<Vec<f64>> {
    Ok(match metric {
        "survival" => vec![env.survival_steps(&t.states) as f64],
        "reward" => vec![env.reward_proxy(&t.states)],
        "completion" => vec![
            env.task_completed(&t.states) as u8 as f64,
            env.gates_passed(&t.states) as f64,
            env.survival_steps(&t.states) as f64,
        ],
        other => return Err(Error::unknown("metric", other, SELECTION_METRICS)),
    })
}

/// Index of the best trajectory under `metric`; ties go to the lowest index.
pub fn select_best(env: &Env, trajectories: &[Trajectory], metric: &str) -> Result<usize> {
    if trajectories.is_empty() {
        return Err(Error::InvalidInput("selection needs at least one trajectory".into()));
    }
    let mut best = 0;
    let mut best_score = score(env, &trajectories[0], metric)?;
    for (i, t) in trajectories.iter().enumerate().skip(1) {
        let s = score(env, t, metric)?;
        if s.partial_cmp(&best_score) == Some(std::cmp::Ordering::Greater) {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}
