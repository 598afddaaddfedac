//! Scripted expert controllers used to build admissible datasets.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::dataset::Dataset;
use super::env::{Action, Env, EnvKind, Integrator, State};
use super::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    /// Infinite-horizon LQR regulation to the origin (double integrators).
    LqrGoal,
    /// PD tracking of randomly drawn waypoints or lanes.
    PdWaypoints,
    /// Quadrotor weaving around the slalom obstacles, side drawn per trajectory.
    ScriptedSlalom,
}

pub const CONTROLLER_NAMES: &[&str] = &["lqr-goal", "pd-waypoints", "scripted-slalom"];

impl Controller {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lqr-goal" => Ok(Controller::LqrGoal),
            "pd-waypoints" => Ok(Controller::PdWaypoints),
            "scripted-slalom" => Ok(Controller::ScriptedSlalom),
            other => Err(Error::unknown("controller", other, CONTROLLER_NAMES)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Controller::LqrGoal => "lqr-goal",
            Controller::PdWaypoints => "pd-waypoints",
            Controller::ScriptedSlalom => "scripted-slalom",
        }
    }
}

/// Per-trajectory controller state drawn from the dataset RNG.
enum Policy {
    Lqr { gain: [f64; 2] },
    DiWaypoint { waypoint: Vec<f64>, switch_at: usize },
    UnicycleLane { lane: f64, speed: f64 },
    QuadTrack { reference: QuadReference },
}

struct QuadReference {
    speed: f64,
    /// +1 passes over the first obstacle and under the second.
    side: f64,
    amplitude: f64,
    hover: f64,
    target: Option<[f64; 2]>,
}

const BUMP_WIDTH: f64 = 0.8;

impl QuadReference {
    /// Commanded acceleration `(a_x, a_z)` at state `s`. The slalom path is
    /// parameterised by the current `x`, so only height is tracked as a
    /// position while forward motion is a speed command.
    fn accel(&self, env: &Env, s: &[f64]) -> [f64; 2] {
        if let Some([tx, tz]) = self.target {
            return [
                4.0 * (tx - s[0]) - 4.0 * s[3],
                9.0 * (tz - s[1]) - 6.0 * s[4],
            ];
        }
        let (x, vx) = (s[0], s[3]);
        let w2 = BUMP_WIDTH * BUMP_WIDTH;
        let (mut z, mut dz, mut ddz) = (self.hover, 0.0, 0.0);
        for (k, o) in env.course().obstacles.iter().enumerate() {
            let sign = if k % 2 == 0 { self.side } else { -self.side };
            let u = x - o[0];
            let b = sign * self.amplitude * (-u * u / (2.0 * w2)).exp();
            z += b;
            dz += -u / w2 * b;
            ddz += (u * u / (w2 * w2) - 1.0 / w2) * b;
        }
        let ax = 4.0 * (self.speed - vx);
        let az = 9.0 * (z - s[1]) + 6.0 * (dz * vx - s[4]) + ddz * vx * vx + dz * ax;
        [ax, az]
    }
}

fn lqr_gain(dt: f64, integrator: Integrator) -> [f64; 2] {
    let a = Matrix2::new(1.0, dt, 0.0, 1.0);
    let b = match integrator {
        Integrator::SemiImplicitEuler => Vector2::new(dt * dt, dt),
        Integrator::ExplicitEuler => Vector2::new(0.0, dt),
    };
    let q = Matrix2::new(1.0, 0.0, 0.0, 0.1);
    let r = 0.5;
    let mut p = q;
    let mut k = Vector2::zeros();
    for _ in 0..2000 {
        let pb = p * b;
        let denom = r + b.dot(&pb);
        k = (a.transpose() * pb) / denom;
        let next = q + a.transpose() * p * a - (a.transpose() * pb) * k.transpose();
        let done = (next - p).norm() < 1e-13;
        p = next;
        if done {
            break;
        }
    }
    [k[0], k[1]]
}

impl Policy {
    fn draw<R: Rng>(controller: Controller, env: &Env, s0: &State, rng: &mut R) -> Result<Self> {
        let unsupported = || {
            Err(Error::Config(format!(
                "controller `{}` does not support env `{}`",
                controller.name(),
                env.name()
            )))
        };
        match (controller, env.kind()) {
            (Controller::LqrGoal, EnvKind::DoubleIntegrator { .. }) => Ok(Policy::Lqr {
                gain: lqr_gain(env.dt(), env.spec().integrator),
            }),
            (Controller::PdWaypoints, EnvKind::DoubleIntegrator { dims }) => {
                Ok(Policy::DiWaypoint {
                    waypoint: (0..*dims).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    switch_at: env.horizon() / 2,
                })
            }
            (Controller::PdWaypoints, EnvKind::Unicycle) => Ok(Policy::UnicycleLane {
                lane: rng.random_range(-0.8..0.8),
                speed: rng.random_range(0.6..1.0),
            }),
            (Controller::PdWaypoints, EnvKind::QuadrotorLite) => Ok(Policy::QuadTrack {
                reference: QuadReference {
                    speed: 0.0,
                    side: 0.0,
                    amplitude: 0.0,
                    hover: s0[1],
                    target: Some([rng.random_range(0.0..2.0), rng.random_range(0.5..1.5)]),
                },
            }),
            (Controller::ScriptedSlalom, EnvKind::QuadrotorLite) => Ok(Policy::QuadTrack {
                reference: QuadReference {
                    speed: rng.random_range(1.75..1.95),
                    side: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    amplitude: rng.random_range(0.75..0.85),
                    hover: 1.0,
                    target: None,
                },
            }),
            _ => unsupported(),
        }
    }

    fn act(&self, env: &Env, t: usize, s: &[f64]) -> Action {
        match self {
            Policy::Lqr { gain } => {
                let dims = env.n_actions();
                (0..dims).map(|i| -gain[0] * s[i] - gain[1] * s[dims + i]).collect()
            }
            Policy::DiWaypoint { waypoint, switch_at } => {
                let dims = env.n_actions();
                (0..dims)
                    .map(|i| {
                        let goal = if t < *switch_at { waypoint[i] } else { 0.0 };
                        2.0 * (goal - s[i]) - 2.0 * s[dims + i]
                    })
                    .collect()
            }
            Policy::UnicycleLane { lane, speed } => {
                let heading = (1.5 * (lane - s[1])).clamp(-0.8, 0.8);
                vec![2.0 * (speed - s[3]), 4.0 * (heading - s[2]) - 2.5 * s[4]]
            }
            Policy::QuadTrack { reference } => {
                let [ax, az] = reference.accel(env, s);
                let lift = az + 9.81;
                let theta_des = (-ax).atan2(lift).clamp(-0.7, 0.7);
                let thrust = lift / s[2].cos().max(0.5);
                let torque = 80.0 * (theta_des - s[2]) - 16.0 * s[5];
                vec![thrust, torque]
            }
        }
    }
}

/// Roll out `n_traj` controller trajectories from initial states drawn
/// uniformly in the env's `S_0` box. Actions leaving the box are clamped
/// before simulation, so every stored trajectory re-simulates exactly.
pub fn generate_dataset(env: &Env, controller: Controller, n_traj: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let s0 = env.sample_initial_state(&mut rng);
        let policy = Policy::draw(controller, env, &s0, &mut rng)?;
        let mut states = vec![s0];
        let mut actions = Vec::with_capacity(env.horizon());
        for t in 0..env.horizon() {
            let s = &states[t];
            let (a, _) = env.clamp_action(&policy.act(env, t, s));
            let next = env.step(s, &a)?;
            actions.push(a);
            states.push(next);
        }
        trajectories.push(Trajectory {
            states,
            actions: Some(actions),
        });
    }
    let provenance = serde_json::json!({
        "controller": controller.name(),
        "n_traj": n_traj,
        "seed": seed,
    })
    .to_string();
    Dataset::new(env.clone(), trajectories, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lqr_dataset_is_admissible_and_reproducible() {
        let env = Env::by_name("double-integrator").unwrap();
        let a = generate_dataset(&env, Controller::LqrGoal, 100, 42).unwrap();
        let b = generate_dataset(&env, Controller::LqrGoal, 100, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let ok = a
            .trajectories
            .iter()
            .filter(|t| t.is_exactly_admissible(&env))
            .count();
        assert_eq!(ok, 100);
    }

    #[test]
    fn lqr_regulates_toward_origin() {
        let env = Env::by_name("double-integrator").unwrap();
        let ds = generate_dataset(&env, Controller::LqrGoal, 20, 1).unwrap();
        for t in &ds.trajectories {
            let last = t.states.last().unwrap();
            assert!(last[0].abs() < t.states[0][0].abs().max(0.3));
        }
    }

    #[test]
    fn initial_states_inside_s0_box() {
        let env = Env::by_name("unicycle").unwrap();
        let ds = generate_dataset(&env, Controller::PdWaypoints, 50, 9).unwrap();
        let spec = env.spec();
        for t in &ds.trajectories {
            for (i, x) in t.states[0].iter().enumerate() {
                assert!(spec.initial_low[i] <= *x && *x <= spec.initial_high[i]);
            }
        }
    }

    #[test]
    fn slalom_controller_clears_the_course() {
        let env = Env::quadrotor_lite();
        let ds = generate_dataset(&env, Controller::ScriptedSlalom, 40, 5).unwrap();
        let done = ds
            .trajectories
            .iter()
            .filter(|t| env.task_completed(&t.states))
            .count();
        assert_eq!(done, 40);
    }

    #[test]
    fn unsupported_pairing_is_a_config_error() {
        let env = Env::unicycle();
        assert!(matches!(
            generate_dataset(&env, Controller::LqrGoal, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(Controller::by_name("ppo").is_err());
    }
}
