//! Single-transition projectors and the chronological trajectory pass.

use std::sync::Arc;

use crate::dynamics::{Action, Env, State, Trajectory};
use crate::error::{Error, Result};
use crate::linalg;
use crate::reachability::{reach_vertices, reduce_to_actuated, shrink_unchecked, ReachPolytope};

use super::correction::CorrectionPolicy;
use super::simplex::{project_to_hull, SimplexSolution};

pub const PROJECTOR_NAMES: &[&str] = &["P", "Pref", "PA", "PSA"];

#[derive(Debug, Clone)]
pub enum ProjectorTag {
    /// Nearest point of `C(s_t)`.
    P,
    /// Nearest point trading off prediction and reference distance.
    PRef { lambda: f64 },
    /// Execute the predicted action.
    PA,
    /// Execute the predicted action plus a learned feedback correction.
    PSA(Arc<CorrectionPolicy>),
}

impl PartialEq for ProjectorTag {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ProjectorTag::P, ProjectorTag::P) | (ProjectorTag::PA, ProjectorTag::PA) => true,
            (ProjectorTag::PRef { lambda: a }, ProjectorTag::PRef { lambda: b }) => a == b,
            (ProjectorTag::PSA(a), ProjectorTag::PSA(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorKind {
    pub tag: ProjectorTag,
    /// Shrink fraction for the action-guided hull search.
    pub delta: f64,
    /// Search the shrunk hull around the predicted action (P and P_ref).
    pub action_guided: bool,
    /// Project actuated components only and rebuild positions.
    pub uses_reduction: bool,
}

impl ProjectorKind {
    pub fn new(tag: ProjectorTag) -> Self {
        Self {
            tag,
            delta: 0.1,
            action_guided: false,
            uses_reduction: true,
        }
    }

    pub fn p() -> Self {
        Self::new(ProjectorTag::P)
    }

    pub fn p_ref(lambda: f64) -> Self {
        Self::new(ProjectorTag::PRef { lambda })
    }

    pub fn p_a() -> Self {
        Self::new(ProjectorTag::PA)
    }

    pub fn p_sa(policy: Arc<CorrectionPolicy>) -> Self {
        Self::new(ProjectorTag::PSA(policy))
    }

    /// `P`, `Pref`, `PA`, `PSA`, or `none`. `lambda` defaults to 1 and a
    /// given `delta` turns on action guidance for the hull projectors.
    pub fn by_name(
        name: &str,
        lambda: Option<f64>,
        delta: Option<f64>,
        policy: Option<Arc<CorrectionPolicy>>,
    ) -> Result<Option<Self>> {
        let kind = match name {
            "none" | "off" => return Ok(None),
            "P" => Self::p(),
            "Pref" => Self::p_ref(lambda.unwrap_or(1.0)),
            "PA" => Self::p_a(),
            "PSA" => Self::p_sa(policy.ok_or_else(|| Error::Config("projector PSA needs a correction policy".into()))?),
            other => return Err(Error::unknown("projector", other, PROJECTOR_NAMES)),
        };
        let kind = match (delta, &kind.tag) {
            (Some(d), ProjectorTag::P | ProjectorTag::PRef { .. }) => kind.with_action_guidance(d),
            (Some(d), _) => Self { delta: d, ..kind },
            (None, _) => kind,
        };
        kind.validate()?;
        Ok(Some(kind))
    }

    pub fn with_action_guidance(mut self, delta: f64) -> Self {
        self.action_guided = true;
        self.delta = delta;
        self
    }

    pub fn with_reduction(mut self, on: bool) -> Self {
        self.uses_reduction = on;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.tag {
            ProjectorTag::P => "P",
            ProjectorTag::PRef { .. } => "Pref",
            ProjectorTag::PA => "PA",
            ProjectorTag::PSA(_) => "PSA",
        }
    }

    /// Whether the projector consumes predicted actions.
    pub fn needs_actions(&self) -> bool {
        self.action_guided || matches!(self.tag, ProjectorTag::PA | ProjectorTag::PSA(_))
    }

    /// Output re-simulates exactly whenever a step is projected.
    pub fn is_action_backed(&self) -> bool {
        matches!(self.tag, ProjectorTag::PA | ProjectorTag::PSA(_))
    }

    pub fn validate(&self) -> Result<()> {
        if let ProjectorTag::PRef { lambda } = self.tag {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("Pref trade-off must be >= 0, got {lambda}")));
            }
        }
        if self.action_guided && !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("shrink fraction must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepProjection {
    pub state: State,
    /// Recovered or executed action, when the projector provides one.
    pub action: Option<Action>,
    /// Simplex solve behind hull projectors.
    pub solution: Option<SimplexSolution>,
}

/// Nearest point of the hull of `points` to `target` plus
/// `lambda`-weighted distance to `reference`, by iteratively reweighted
/// least squares over hull projections.
pub(crate) fn reference_projection(
    target: &[f64],
    reference: &[f64],
    lambda: f64,
    points: &[Vec<f64>],
) -> Result<SimplexSolution> {
    if lambda == 0.0 {
        return project_to_hull(target, points);
    }
    let scale = points
        .iter()
        .chain([target.to_vec(), reference.to_vec()].iter())
        .map(|p| linalg::norm(p))
        .fold(1e-300, f64::max);
    let floor = 1e-12 * scale;
    let blend = |w1: f64, w2: f64| -> Vec<f64> {
        target
            .iter()
            .zip(reference)
            .map(|(a, b)| (w1 * a + w2 * b) / (w1 + w2))
            .collect()
    };
    let mut sol = project_to_hull(&blend(1.0, lambda), points)?;
    let objective = |c: &[f64]| linalg::dist(target, c) + lambda * linalg::dist(reference, c);
    let mut best = objective(&sol.projected_point);
    for _ in 0..200 {
        let c = &sol.projected_point;
        let w1 = 1.0 / linalg::dist(target, c).max(floor);
        let w2 = lambda / linalg::dist(reference, c).max(floor);
        let next = project_to_hull(&blend(w1, w2), points)?;
        let moved = linalg::dist(&next.projected_point, c);
        let value = objective(&next.projected_point);
        if value > best {
            break;
        }
        best = value;
        sol = next;
        if moved <= 1e-13 * scale {
            break;
        }
    }
    sol.residual = linalg::dist(target, &sol.projected_point);
    Ok(sol)
}

fn hull_step(
    env: &Env,
    s_t: &[f64],
    s_tilde: &[f64],
    kind: &ProjectorKind,
    s_ref: Option<&[f64]>,
    a_tilde: Option<&[f64]>,
) -> Result<StepProjection> {
    let full = env.polytope();
    let polytope = match (kind.action_guided, a_tilde) {
        (true, Some(a)) => shrink_unchecked(&full, a, kind.delta).0,
        _ => full,
    };
    let reach: ReachPolytope = reach_vertices(env, s_t, &polytope)?;
    let reduced = kind.uses_reduction && env.spec().has_actuated_structure();
    let (red, target, recon) = if reduced {
        reduce_to_actuated(env, &reach, s_tilde)
    } else {
        let (r, t, rc) = reduce_to_actuated(env, &ReachPolytope { reduced: true, ..reach.clone() }, s_tilde);
        (ReachPolytope { reduced: false, ..r }, t, rc)
    };
    let sol = match kind.tag {
        ProjectorTag::PRef { lambda } => {
            let reference = s_ref.ok_or_else(|| {
                Error::Config("projector Pref needs a reference next state".into())
            })?;
            let reference = recon.reduce(reference);
            reference_projection(&target, &reference, lambda, &red.vertex_successors)?
        }
        _ => project_to_hull(&target, &red.vertex_successors)?,
    };
    let state = recon.reconstruct(env, &sol.projected_point);
    let action = kind
        .action_guided
        .then(|| linalg::combine(&sol.lambda, &reach.vertex_actions));
    Ok(StepProjection {
        state,
        action,
        solution: Some(sol),
    })
}

/// Project one predicted transition `s_t → s̃_{t+1}`.
pub fn project_state(
    env: &Env,
    s_t: &[f64],
    s_tilde: &[f64],
    kind: &ProjectorKind,
    s_ref: Option<&[f64]>,
    a_tilde: Option<&[f64]>,
) -> Result<StepProjection> {
    kind.validate()?;
    if s_t.len() != env.n_states() || s_tilde.len() != env.n_states() {
        return Err(Error::Mismatch("projected states differ from env dimension".into()));
    }
    if s_ref.is_some_and(|r| r.len() != env.n_states()) {
        return Err(Error::Mismatch("reference state differs from env dimension".into()));
    }
    if !linalg::all_finite(s_t) || !linalg::all_finite(s_tilde) {
        return Err(Error::InvalidInput("non-finite state passed to projector".into()));
    }
    if kind.needs_actions() && a_tilde.is_none() {
        return Err(Error::Config(format!(
            "projector {} needs a predicted action",
            kind.name()
        )));
    }
    match &kind.tag {
        ProjectorTag::PA => {
            let a = a_tilde.expect("checked above");
            let (state, _) = env.step_flagged(s_t, a)?;
            Ok(StepProjection {
                state,
                action: Some(env.clamp_action(a).0),
                solution: None,
            })
        }
        ProjectorTag::PSA(policy) => {
            if policy.n_states() != env.n_states() || policy.n_actions() != env.n_actions() {
                return Err(Error::Mismatch("correction policy does not fit env".into()));
            }
            let (state, action) = policy.apply(env, s_t, a_tilde.expect("checked above"), s_tilde)?;
            Ok(StepProjection {
                state,
                action: Some(action),
                solution: None,
            })
        }
        ProjectorTag::P | ProjectorTag::PRef { .. } => hull_step(env, s_t, s_tilde, kind, s_ref, a_tilde),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTrajectory {
    pub trajectory: Trajectory,
    /// Whether step `t` was projected.
    pub projected: Vec<bool>,
    /// `‖s̃_{t+1} − s_{t+1}‖` per step, zero on skipped steps.
    pub errors: Vec<f64>,
    /// Simplex residual of hull projectors per step.
    pub hull_residuals: Vec<Option<f64>>,
}

impl ProjectedTrajectory {
    pub fn total_error(&self) -> f64 {
        self.errors.iter().sum()
    }
}

/// Left-to-right pass. `gate(t)` returning `false` keeps `s̃_{t+1}` as is;
/// the next step then builds its hull at that unprojected state.
pub fn project_trajectory(
    env: &Env,
    predicted: &Trajectory,
    kind: &ProjectorKind,
    reference: Option<&Trajectory>,
    gate: &mut dyn FnMut(usize) -> bool,
) -> Result<ProjectedTrajectory> {
    kind.validate()?;
    predicted.check_shape(env)?;
    let h = predicted.horizon();
    if let Some(r) = reference {
        if r.horizon() != h {
            return Err(Error::Mismatch(format!(
                "reference horizon {} differs from trajectory horizon {h}",
                r.horizon()
            )));
        }
        r.check_shape(env)?;
    }
    if matches!(kind.tag, ProjectorTag::PRef { .. }) && reference.is_none() {
        return Err(Error::Config("projector Pref needs a reference trajectory".into()));
    }
    if kind.needs_actions() && predicted.actions.is_none() {
        return Err(Error::Config(format!(
            "projector {} needs predicted actions",
            kind.name()
        )));
    }
    let mut states = Vec::with_capacity(h + 1);
    states.push(predicted.states[0].clone());
    let mut actions: Vec<Action> = Vec::with_capacity(h);
    let mut projected = Vec::with_capacity(h);
    let mut errors = Vec::with_capacity(h);
    let mut hull_residuals = Vec::with_capacity(h);
    let emits_actions = predicted.actions.is_some() || kind.needs_actions();
    for t in 0..h {
        let s_tilde = &predicted.states[t + 1];
        let a_tilde = predicted.actions.as_ref().map(|a| a[t].as_slice());
        if gate(t) {
            let s_ref = reference.map(|r| r.states[t + 1].as_slice());
            let out = project_state(env, &states[t], s_tilde, kind, s_ref, a_tilde)
                .map_err(|e| Error::Step { t, source: Box::new(e) })?;
            errors.push(linalg::dist(s_tilde, &out.state));
            hull_residuals.push(out.solution.as_ref().map(|s| s.residual));
            if emits_actions {
                let a = out.action.or_else(|| a_tilde.map(<[f64]>::to_vec));
                actions.push(a.unwrap_or_else(|| vec![0.0; env.n_actions()]));
            }
            states.push(out.state);
            projected.push(true);
        } else {
            errors.push(0.0);
            hull_residuals.push(None);
            if let Some(a) = a_tilde {
                actions.push(a.to_vec());
            }
            states.push(s_tilde.clone());
            projected.push(false);
        }
    }
    Ok(ProjectedTrajectory {
        trajectory: Trajectory {
            states,
            actions: emits_actions.then_some(actions),
        },
        projected,
        errors,
        hull_residuals,
    })
}
