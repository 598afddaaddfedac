use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use reachdiff::diffusion::{self, Checkpoint, Curriculum, ProjectorChoice, SampleOptions, TrainConfig};
use reachdiff::dynamics::{self, Action, Controller, Dataset, Env, State, Trajectory};
use reachdiff::inverse_dynamics::{id_trajectory, IdConfig, IdMethod};
use reachdiff::projection::{self, CorrectionPolicy, ProjectorKind};
use reachdiff::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::UnknownName { .. } | Error::Config(_) | Error::InvalidInput(_) | Error::Mismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn env_of(name: &str, horizon: Option<usize>) -> PyResult<Env> {
    let env = Env::by_name(name).map_err(to_py)?;
    Ok(match horizon {
        Some(h) => env.with_horizon(h),
        None => env,
    })
}

fn trajectory_dict<'py>(py: Python<'py>, t: &Trajectory) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("states", t.states.clone())?;
    d.set_item("actions", t.actions.clone())?;
    Ok(d)
}

fn policy_of(path: Option<PathBuf>) -> PyResult<Option<Arc<CorrectionPolicy>>> {
    path.map(|p| CorrectionPolicy::load(&p).map(Arc::new).map_err(to_py)).transpose()
}

/// Names of the built-in environments.
#[pyfunction]
fn env_names() -> Vec<&'static str> {
    dynamics::ENV_NAMES.to_vec()
}

/// One step of the true dynamics.
#[pyfunction]
fn step(env: &str, state: State, action: Action) -> PyResult<State> {
    env_of(env, None)?.step(&state, &action).map_err(to_py)
}

/// Roll out `actions` from `s0`; returns a dict with `states` and `actions`.
#[pyfunction]
fn rollout<'py>(py: Python<'py>, env: &str, s0: State, actions: Vec<Action>) -> PyResult<Bound<'py, PyDict>> {
    let t = env_of(env, Some(actions.len()))?.rollout(&s0, &actions).map_err(to_py)?;
    trajectory_dict(py, &t)
}

/// Generate a dataset with a scripted controller and save it to `path`.
#[pyfunction]
#[pyo3(signature = (env, path, n=256, seed=0, controller=None, horizon=None))]
fn generate_dataset(
    env: &str,
    path: PathBuf,
    n: usize,
    seed: u64,
    controller: Option<&str>,
    horizon: Option<usize>,
) -> PyResult<usize> {
    let env = env_of(env, horizon)?;
    let controller = match controller {
        Some(c) => Controller::by_name(c).map_err(to_py)?,
        None => match env.name() {
            "unicycle" => Controller::PdWaypoints,
            "quadrotor-lite" => Controller::ScriptedSlalom,
            _ => Controller::LqrGoal,
        },
    };
    let ds = dynamics::generate_dataset(&env, controller, n, seed).map_err(to_py)?;
    ds.save(&path).map_err(to_py)?;
    Ok(ds.len())
}

/// Trajectories stored in a dataset file, as a list of dicts.
#[pyfunction]
fn load_dataset<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ds = Dataset::load(&path).map_err(to_py)?;
    ds.trajectories.iter().map(|t| trajectory_dict(py, t)).collect()
}

/// Project a trajectory with every transition gated on.
#[pyfunction]
#[pyo3(signature = (env, states, actions=None, projector="P", lambda_ref=None, delta=None, correction_policy=None))]
#[allow(clippy::too_many_arguments)]
fn project<'py>(
    py: Python<'py>,
    env: &str,
    states: Vec<State>,
    actions: Option<Vec<Action>>,
    projector: &str,
    lambda_ref: Option<f64>,
    delta: Option<f64>,
    correction_policy: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let env = env_of(env, Some(states.len().saturating_sub(1)))?;
    let kind = ProjectorKind::by_name(projector, lambda_ref, delta, policy_of(correction_policy)?)
        .map_err(to_py)?
        .ok_or_else(|| PyValueError::new_err("project needs a projector other than none"))?;
    let traj = Trajectory { states, actions };
    let reference = matches!(kind.tag, projection::ProjectorTag::PRef { .. }).then_some(&traj);
    let p = projection::project_trajectory(&env, &traj, &kind, reference, &mut |_| true).map_err(to_py)?;
    let d = trajectory_dict(py, &p.trajectory)?;
    d.set_item("errors", p.errors)?;
    d.set_item("hull_residuals", p.hull_residuals)?;
    Ok(d)
}

/// Statewise and cumulative admissibility errors of a state trajectory.
#[pyfunction]
#[pyo3(signature = (env, states, method="polytopic-then-blackbox", seed=0))]
fn admissibility<'py>(py: Python<'py>, env: &str, states: Vec<State>, method: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let env = env_of(env, Some(states.len().saturating_sub(1)))?;
    let cfg = IdConfig {
        seed,
        ..IdConfig::with_method(IdMethod::by_name(method).map_err(to_py)?)
    };
    let report = id_trajectory(&env, &Trajectory::from_states(states), &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("sae", report.sae)?;
    d.set_item("cae", report.cae)?;
    d.set_item("actions", report.actions)?;
    d.set_item("converged", report.converged)?;
    Ok(d)
}

/// Noise levels of the sampling ladder.
#[pyfunction]
#[pyo3(signature = (n=5))]
fn schedule(n: usize) -> PyResult<Vec<f64>> {
    diffusion::NoiseSchedule::with_steps(n).sigmas().map_err(to_py)
}

/// Probability p(σ) of skipping projection under a curriculum.
#[pyfunction]
fn skip_probability(curriculum: &str, sigma: f64) -> PyResult<f64> {
    Ok(Curriculum::by_name(curriculum).map_err(to_py)?.skip_probability(sigma))
}

/// Train a denoiser on a dataset file and save the checkpoint; returns the final loss.
#[pyfunction]
#[pyo3(signature = (data, out, steps=2000, modality="SA", projector="none", curriculum=None, seed=0))]
fn train(
    data: PathBuf,
    out: PathBuf,
    steps: usize,
    modality: &str,
    projector: &str,
    curriculum: Option<&str>,
    seed: u64,
) -> PyResult<Option<f64>> {
    let ds = Dataset::load(&data).map_err(to_py)?;
    let projector = ProjectorKind::by_name(projector, None, None, None).map_err(to_py)?;
    let curriculum = match curriculum {
        Some(c) => Curriculum::by_name(c).map_err(to_py)?,
        None if projector.is_some() => Curriculum::mid(),
        None => Curriculum::off(),
    };
    let cfg = TrainConfig {
        modality: diffusion::Modality::by_name(modality).map_err(to_py)?,
        steps,
        inference_projector: projector.clone(),
        projector,
        curriculum,
        seed,
        ..TrainConfig::default()
    };
    let outcome = diffusion::train(&ds, &cfg).map_err(to_py)?;
    outcome.checkpoint.save(&out).map_err(to_py)?;
    Ok(outcome.checkpoint.meta.final_loss)
}

/// Sample `batch` trajectories from `s0`. `projector=None` uses the
/// checkpoint's own projector; `"none"` disables projection.
#[pyfunction]
#[pyo3(signature = (checkpoint, s0, batch=8, seed=0, projector=None, curriculum=None))]
fn sample<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    s0: State,
    batch: usize,
    seed: u64,
    projector: Option<&str>,
    curriculum: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ckpt = Checkpoint::load(&checkpoint).map_err(to_py)?;
    let choice = match projector {
        None => ProjectorChoice::Checkpoint,
        Some(name) => match ProjectorKind::by_name(name, None, None, None).map_err(to_py)? {
            Some(k) => ProjectorChoice::Use(k),
            None => ProjectorChoice::Off,
        },
    };
    let opts = SampleOptions {
        seed,
        projector: choice,
        curriculum: curriculum.map(Curriculum::by_name).transpose().map_err(to_py)?,
        ..SampleOptions::default()
    };
    let out = diffusion::sample(&ckpt, &s0, batch, &opts).map_err(to_py)?;
    out.trajectories
        .iter()
        .zip(&out.admissible_claim)
        .map(|(t, claim)| {
            let d = trajectory_dict(py, t)?;
            d.set_item("admissible_claim", *claim)?;
            Ok(d)
        })
        .collect()
}

/// Run the command-line front end with `args` (without the program name).
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    reachdiff::cli::run(std::iter::once("reachdiff".to_string()).chain(args))
}

#[pymodule]
fn pyreachdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(env_names, m)?)?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(admissibility, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(skip_probability, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
