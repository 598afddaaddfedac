//! Built-in deterministic discrete-time simulators.
//!
//! Every environment splits its step into a velocity update that depends on
//! the action and a kinematic integration of the position-like components.
//! The kinematic half is shared with the actuated-state reduction so that a
//! reconstructed successor is bit-identical to a simulated one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

use super::polytope::ActionPolytope;
use super::trajectory::Trajectory;

pub type State = Vec<f64>;
pub type Action = Vec<f64>;

const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    ExplicitEuler,
    SemiImplicitEuler,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::ExplicitEuler => "explicit-euler",
            Integrator::SemiImplicitEuler => "semi-implicit-euler",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Integrator::ExplicitEuler => 0,
            Integrator::SemiImplicitEuler => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Integrator::ExplicitEuler),
            1 => Ok(Integrator::SemiImplicitEuler),
            c => Err(Error::Format(format!("unknown integrator code {c}"))),
        }
    }
}

/// How a position-like component is advanced from velocity-like ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kinematic {
    /// `pos` integrates `vel`.
    Direct { pos: usize, vel: usize },
    /// Planar `(x, y)` integrates `speed` along `heading`.
    Planar {
        x: usize,
        y: usize,
        heading: usize,
        speed: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub dt: f64,
    pub horizon: usize,
    pub integrator: Integrator,
    /// Velocity-like components moved by the action within one step.
    pub actuated_mask: Vec<bool>,
    pub position_map: Vec<Kinematic>,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Box of initial states `S_0`.
    pub initial_low: Vec<f64>,
    pub initial_high: Vec<f64>,
    /// Linear dynamics: enables the closed-form inverse-dynamics oracle and
    /// the tight inverse-dynamics tolerance.
    pub linear: bool,
    /// Default shrink fraction for action-guided projection.
    pub default_delta: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("env `{}`: {m}", self.name)));
        if self.n_states == 0 || self.n_actions == 0 || self.horizon == 0 {
            return bad("n_states, n_actions and horizon must be >= 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.actuated_mask.len() != self.n_states {
            return bad("actuated_mask length differs from n_states".into());
        }
        if self.action_low.len() != self.n_actions || self.action_high.len() != self.n_actions {
            return bad("action bounds length differs from n_actions".into());
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l <= h)) {
            return bad("action lower bound exceeds upper bound".into());
        }
        if self.initial_low.len() != self.n_states || self.initial_high.len() != self.n_states {
            return bad("initial-state box length differs from n_states".into());
        }
        let mut seen = vec![false; self.n_states];
        let mut claim = |i: usize| -> bool {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
            true
        };
        for k in &self.position_map {
            let ok = match *k {
                Kinematic::Direct { pos, vel } => {
                    claim(pos) && vel < self.n_states && pos != vel && !self.actuated_mask[pos]
                }
                Kinematic::Planar { x, y, heading, speed } => {
                    claim(x)
                        && claim(y)
                        && heading < self.n_states
                        && speed < self.n_states
                        && !self.actuated_mask[x]
                        && !self.actuated_mask[y]
                }
            };
            if !ok {
                return bad(format!("inconsistent position map entry {k:?}"));
            }
        }
        Ok(())
    }

    /// True when the env declares position/velocity structure usable for
    /// velocity-only projection.
    pub fn has_actuated_structure(&self) -> bool {
        !self.position_map.is_empty() && self.actuated_mask.iter().any(|&m| m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum EnvKind {
    DoubleIntegrator { dims: usize },
    Unicycle,
    QuadrotorLite,
}

/// Obstacle course for the quadrotor slalom task, in the x–z plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlalomCourse {
    pub obstacles: Vec<[f64; 2]>,
    pub radius: f64,
    pub finish_x: f64,
    pub floor: f64,
}

impl Default for SlalomCourse {
    fn default() -> Self {
        Self {
            obstacles: vec![[1.5, 1.0], [3.0, 1.0]],
            radius: 0.3,
            finish_x: 3.5,
            floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    spec: EnvSpec,
    kind: EnvKind,
    course: SlalomCourse,
}

pub const ENV_NAMES: &[&str] = &[
    "double-integrator",
    "double-integrator-2d",
    "double-integrator-explicit",
    "unicycle",
    "quadrotor-lite",
];

impl Env {
    pub fn by_name(name: &str) -> Result<Env> {
        match name {
            "double-integrator" => Ok(Self::double_integrator(1, Integrator::SemiImplicitEuler)),
            "double-integrator-2d" => Ok(Self::double_integrator(2, Integrator::SemiImplicitEuler)),
            "double-integrator-explicit" => {
                Ok(Self::double_integrator(1, Integrator::ExplicitEuler))
            }
            "unicycle" => Ok(Self::unicycle()),
            "quadrotor-lite" => Ok(Self::quadrotor_lite()),
            other => Err(Error::unknown("env", other, ENV_NAMES)),
        }
    }

    /// `dims`-axis point mass, state `(x_1..x_d, v_1..v_d)`, accelerations in `[-1, 1]`.
    pub fn double_integrator(dims: usize, integrator: Integrator) -> Env {
        let name = match (dims, integrator) {
            (1, Integrator::SemiImplicitEuler) => "double-integrator".to_string(),
            (1, Integrator::ExplicitEuler) => "double-integrator-explicit".to_string(),
            (2, Integrator::SemiImplicitEuler) => "double-integrator-2d".to_string(),
            (d, i) => format!("double-integrator-{d}d-{}", i.name()),
        };
        let n = 2 * dims;
        let mut actuated_mask = vec![false; n];
        actuated_mask[dims..].iter_mut().for_each(|m| *m = true);
        let mut initial_low = vec![-1.0; dims];
        initial_low.extend(vec![-0.5; dims]);
        let initial_high: Vec<f64> = initial_low.iter().map(|x| -x).collect();
        Env {
            spec: EnvSpec {
                name,
                n_states: n,
                n_actions: dims,
                dt: 0.1,
                horizon: 32,
                integrator,
                actuated_mask,
                position_map: (0..dims)
                    .map(|i| Kinematic::Direct { pos: i, vel: dims + i })
                    .collect(),
                action_low: vec![-1.0; dims],
                action_high: vec![1.0; dims],
                initial_low,
                initial_high,
                linear: true,
                default_delta: 0.1,
            },
            kind: EnvKind::DoubleIntegrator { dims },
            course: SlalomCourse::default(),
        }
    }

    /// Planar unicycle, state `(x, y, θ, v, ω)`, actions `(v̇, ω̇)`.
    pub fn unicycle() -> Env {
        Env {
            spec: EnvSpec {
                name: "unicycle".into(),
                n_states: 5,
                n_actions: 2,
                dt: 0.1,
                horizon: 32,
                integrator: Integrator::SemiImplicitEuler,
                actuated_mask: vec![false, false, false, true, true],
                position_map: vec![
                    Kinematic::Direct { pos: 2, vel: 4 },
                    Kinematic::Planar { x: 0, y: 1, heading: 2, speed: 3 },
                ],
                action_low: vec![-1.0, -1.0],
                action_high: vec![1.0, 1.0],
                initial_low: vec![-0.2, -0.2, -0.3, 0.0, -0.2],
                initial_high: vec![0.2, 0.2, 0.3, 0.5, 0.2],
                linear: false,
                default_delta: 0.1,
            },
            kind: EnvKind::Unicycle,
            course: SlalomCourse::default(),
        }
    }

    /// Planar quadrotor, state `(x, z, θ, vx, vz, ω)`, actions
    /// `(collective thrust acceleration, angular acceleration)`.
    pub fn quadrotor_lite() -> Env {
        Env {
            spec: EnvSpec {
                name: "quadrotor-lite".into(),
                n_states: 6,
                n_actions: 2,
                dt: 0.05,
                horizon: 48,
                integrator: Integrator::SemiImplicitEuler,
                actuated_mask: vec![false, false, false, true, true, true],
                position_map: vec![
                    Kinematic::Direct { pos: 0, vel: 3 },
                    Kinematic::Direct { pos: 1, vel: 4 },
                    Kinematic::Direct { pos: 2, vel: 5 },
                ],
                action_low: vec![2.0, -20.0],
                action_high: vec![18.0, 20.0],
                initial_low: vec![-0.1, 0.9, -0.05, -0.1, -0.1, -0.1],
                initial_high: vec![0.1, 1.1, 0.05, 0.1, 0.1, 0.1],
                linear: false,
                default_delta: 0.1,
            },
            kind: EnvKind::QuadrotorLite,
            course: SlalomCourse::default(),
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Env {
        self.spec.horizon = horizon;
        self
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn n_states(&self) -> usize {
        self.spec.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.spec.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn dt(&self) -> f64 {
        self.spec.dt
    }

    pub fn course(&self) -> &SlalomCourse {
        &self.course
    }

    pub(crate) fn kind(&self) -> &EnvKind {
        &self.kind
    }

    /// Box-corner polytope of the admissible action set.
    pub fn polytope(&self) -> ActionPolytope {
        ActionPolytope::from_box(&self.spec.action_low, &self.spec.action_high)
            .expect("built-in action boxes are valid")
    }

    pub fn clamp_action(&self, a: &[f64]) -> (Action, bool) {
        linalg::clamp_into(a, &self.spec.action_low, &self.spec.action_high)
    }

    fn check_inputs(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.spec.n_states || a.len() != self.spec.n_actions {
            return Err(Error::Mismatch(format!(
                "{}: expected state/action dims {}/{}, got {}/{}",
                self.spec.name,
                self.spec.n_states,
                self.spec.n_actions,
                s.len(),
                a.len()
            )));
        }
        if !linalg::all_finite(s) {
            return Err(Error::InvalidInput(format!("non-finite state {s:?}")));
        }
        if !linalg::all_finite(a) {
            return Err(Error::InvalidInput(format!("non-finite action {a:?}")));
        }
        Ok(())
    }

    /// One simulator step. The second value flags an action that was
    /// clamped into the admissible box.
    pub fn step_flagged(&self, s: &[f64], a: &[f64]) -> Result<(State, bool)> {
        self.check_inputs(s, a)?;
        let (a, clamped) = self.clamp_action(a);
        let moved = self.velocity_update(s, &a);
        Ok((self.integrate_positions(s, moved), clamped))
    }

    pub fn step(&self, s: &[f64], a: &[f64]) -> Result<State> {
        self.step_flagged(s, a).map(|(s, _)| s)
    }

    /// Copy of `s` with the action-driven components advanced one step.
    fn velocity_update(&self, s: &[f64], a: &[f64]) -> State {
        let dt = self.spec.dt;
        let mut out = s.to_vec();
        match self.kind {
            EnvKind::DoubleIntegrator { dims } => {
                for i in 0..dims {
                    out[dims + i] = s[dims + i] + dt * a[i];
                }
            }
            EnvKind::Unicycle => {
                out[3] = s[3] + dt * a[0];
                out[4] = s[4] + dt * a[1];
            }
            EnvKind::QuadrotorLite => {
                let (thrust, torque) = (a[0], a[1]);
                let theta = s[2];
                out[3] = s[3] - dt * thrust * theta.sin();
                out[4] = s[4] + dt * (thrust * theta.cos() - GRAVITY);
                out[5] = s[5] + dt * torque;
            }
        }
        out
    }

    /// Fill the position-like components of `next` from `prev` according to
    /// the integrator and the position map.
    pub fn integrate_positions(&self, prev: &[f64], mut next: State) -> State {
        let dt = self.spec.dt;
        let semi = self.spec.integrator == Integrator::SemiImplicitEuler;
        for k in &self.spec.position_map {
            if let Kinematic::Direct { pos, vel } = *k {
                let v = if semi { next[vel] } else { prev[vel] };
                next[pos] = prev[pos] + dt * v;
            }
        }
        for k in &self.spec.position_map {
            if let Kinematic::Planar { x, y, heading, speed } = *k {
                let (h, v) = if semi {
                    (next[heading], next[speed])
                } else {
                    (prev[heading], prev[speed])
                };
                next[x] = prev[x] + dt * v * h.cos();
                next[y] = prev[y] + dt * v * h.sin();
            }
        }
        next
    }

    /// Simulate `actions` from `s0`. Stored actions are the clamped ones, so
    /// the result always re-simulates exactly.
    pub fn rollout(&self, s0: &[f64], actions: &[Action]) -> Result<Trajectory> {
        if actions.len() != self.spec.horizon {
            return Err(Error::Mismatch(format!(
                "rollout needs {} actions, got {}",
                self.spec.horizon,
                actions.len()
            )));
        }
        self.rollout_any(s0, actions)
    }

    /// Like [`Env::rollout`] without the horizon check.
    pub fn rollout_any(&self, s0: &[f64], actions: &[Action]) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(actions.len() + 1);
        let mut applied = Vec::with_capacity(actions.len());
        states.push(s0.to_vec());
        for (t, a) in actions.iter().enumerate() {
            let s = &states[t];
            let next = self
                .step(s, a)
                .map_err(|e| Error::Step { t, source: Box::new(e) })?;
            applied.push(self.clamp_action(a).0);
            states.push(next);
        }
        Ok(Trajectory {
            states,
            actions: Some(applied),
        })
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        self.spec
            .initial_low
            .iter()
            .zip(&self.spec.initial_high)
            .map(|(&lo, &hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect()
    }

    /// Env-declared state constraint (walls, floor, obstacles).
    pub fn violates_constraints(&self, s: &[f64]) -> bool {
        if !linalg::all_finite(s) {
            return true;
        }
        match self.kind {
            EnvKind::DoubleIntegrator { dims } => s[..dims].iter().any(|x| x.abs() > 2.0),
            EnvKind::Unicycle => s[1].abs() > 1.5,
            EnvKind::QuadrotorLite => {
                s[1] < self.course.floor
                    || self
                        .course
                        .obstacles
                        .iter()
                        .any(|o| (s[0] - o[0]).hypot(s[1] - o[1]) < self.course.radius)
            }
        }
    }

    /// Number of leading states that satisfy the state constraints.
    pub fn survival_steps(&self, states: &[State]) -> usize {
        states
            .iter()
            .position(|s| self.violates_constraints(s))
            .unwrap_or(states.len())
    }

    pub fn survival_fraction(&self, states: &[State]) -> f64 {
        if states.is_empty() {
            return 0.0;
        }
        self.survival_steps(states) as f64 / states.len() as f64
    }

    /// Monotone task score: closeness to the origin for the double
    /// integrator, forward displacement for the unicycle, obstacles cleared
    /// for the quadrotor slalom.
    pub fn reward_proxy(&self, states: &[State]) -> f64 {
        let (first, last) = match (states.first(), states.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return 0.0,
        };
        match self.kind {
            EnvKind::DoubleIntegrator { dims } => -linalg::norm(&last[..dims]),
            EnvKind::Unicycle => last[0] - first[0],
            EnvKind::QuadrotorLite => self.gates_passed(states) as f64,
        }
    }

    /// Obstacles whose x-coordinate was crossed before any constraint violation.
    pub fn gates_passed(&self, states: &[State]) -> usize {
        let alive = &states[..self.survival_steps(states)];
        let reach = alive.iter().map(|s| s[0]).fold(f64::NEG_INFINITY, f64::max);
        self.course.obstacles.iter().filter(|o| reach > o[0]).count()
    }

    pub fn task_completed(&self, states: &[State]) -> bool {
        if states.is_empty() || self.survival_steps(states) < states.len() {
            return false;
        }
        let last = states.last().unwrap();
        match self.kind {
            EnvKind::DoubleIntegrator { dims } => linalg::norm(&last[..dims]) < 0.25,
            EnvKind::Unicycle => last[0] - states[0][0] > 1.0,
            EnvKind::QuadrotorLite => last[0] >= self.course.finish_x,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator_semi_implicit_step() {
        let env = Env::by_name("double-integrator").unwrap();
        let s = env.step(&[0.0, 0.0], &[1.0]).unwrap();
        assert!((s[0] - 0.01).abs() < 1e-15);
        assert!((s[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unicycle_coasts_under_zero_action() {
        let env = Env::unicycle();
        let s = env.step(&[0.0, 0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.1, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let env = Env::by_name("double-integrator").unwrap();
        assert!(matches!(env.step(&[f64::NAN, 0.0], &[0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(env.step(&[0.0, 0.0], &[f64::INFINITY]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn out_of_box_action_is_clamped_and_flagged() {
        let env = Env::by_name("double-integrator").unwrap();
        let (s, clamped) = env.step_flagged(&[0.0, 0.0], &[3.0]).unwrap();
        assert!(clamped);
        assert_eq!(s, env.step(&[0.0, 0.0], &[1.0]).unwrap());
    }

    #[test]
    fn rollout_constant_push() {
        let env = Env::by_name("double-integrator").unwrap().with_horizon(2);
        let traj = env.rollout(&[0.0, 0.0], &[vec![1.0], vec![1.0]]).unwrap();
        let v: Vec<f64> = traj.states.iter().map(|s| s[1]).collect();
        let x: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
        for (got, want) in v.iter().zip([0.0, 0.1, 0.2]) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in x.iter().zip([0.0, 0.01, 0.03]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn rollout_reports_failing_step() {
        let env = Env::by_name("double-integrator").unwrap().with_horizon(3);
        let err = env
            .rollout(&[0.0, 0.0], &[vec![0.0], vec![f64::NAN], vec![0.0]])
            .unwrap_err();
        assert!(matches!(err, Error::Step { t: 1, .. }));
    }

    #[test]
    fn semi_implicit_integrator_contract() {
        for name in ["double-integrator", "double-integrator-2d", "quadrotor-lite"] {
            let env = Env::by_name(name).unwrap();
            let mut s = env.spec().initial_high.clone();
            let a = env.spec().action_high.clone();
            for _ in 0..10 {
                let next = env.step(&s, &a).unwrap();
                for k in &env.spec().position_map {
                    if let Kinematic::Direct { pos, vel } = *k {
                        assert_eq!(next[pos], s[pos] + env.dt() * next[vel]);
                    }
                }
                s = next;
            }
        }
    }

    #[test]
    fn builtin_specs_validate() {
        for name in ENV_NAMES {
            Env::by_name(name).unwrap().spec().validate().unwrap();
        }
        let err = Env::by_name("hopper").unwrap_err();
        assert!(err.to_string().contains("quadrotor-lite"));
    }

    #[test]
    fn inconsistent_position_map_rejected() {
        let mut spec = Env::by_name("double-integrator-2d").unwrap().spec().clone();
        spec.position_map.push(Kinematic::Direct { pos: 0, vel: 3 });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn quadrotor_hovers_at_gravity_thrust() {
        let env = Env::quadrotor_lite();
        let s = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let next = env.step(&s, &[GRAVITY, 0.0]).unwrap();
        assert_eq!(next, s);
    }
}
