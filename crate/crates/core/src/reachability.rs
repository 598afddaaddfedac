//! One-step reachable-set under-approximations.
//!
//! `C(s)` is the convex hull of the successors of `s` under the vertices of
//! an action polytope. The hull is never materialised: projectors work on
//! the vertex successors through the simplex solver.

use crate::dynamics::{ActionPolytope, Action, Env, State};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct ReachPolytope {
    pub base_state: State,
    pub vertex_actions: Vec<Action>,
    pub vertex_successors: Vec<State>,
    /// Successors hold only the actuated components.
    pub reduced: bool,
}

impl ReachPolytope {
    pub fn len(&self) -> usize {
        self.vertex_successors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex_successors.is_empty()
    }
}

/// Successors of `s` under every polytope vertex, in vertex order.
pub fn reach_vertices(env: &Env, s: &[f64], polytope: &ActionPolytope) -> Result<ReachPolytope> {
    let vertex_successors = polytope
        .vertices
        .iter()
        .map(|v| env.step(s, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReachPolytope {
        base_state: s.to_vec(),
        vertex_actions: polytope.vertices.clone(),
        vertex_successors,
        reduced: false,
    })
}

/// `v̂_i = a_center + δ (v_i − mean v)`, clamped into the polytope's box.
/// The flag reports whether any vertex had to be clamped.
pub fn shrunk_vertices(
    polytope: &ActionPolytope,
    a_center: &[f64],
    delta: f64,
) -> Result<(ActionPolytope, bool)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("shrink fraction must lie in (0, 1), got {delta}")));
    }
    if a_center.len() != polytope.dim() {
        return Err(Error::Mismatch(format!(
            "shrink centre has {} channels, polytope {}",
            a_center.len(),
            polytope.dim()
        )));
    }
    if !linalg::all_finite(a_center) {
        return Err(Error::InvalidInput(format!("non-finite shrink centre {a_center:?}")));
    }
    Ok(shrink_unchecked(polytope, a_center, delta))
}

pub(crate) fn shrink_unchecked(polytope: &ActionPolytope, a_center: &[f64], delta: f64) -> (ActionPolytope, bool) {
    let mean = polytope.mean();
    let mut any = false;
    let vertices = polytope
        .vertices
        .iter()
        .map(|v| {
            let raw: Vec<f64> = v
                .iter()
                .zip(&mean)
                .zip(a_center)
                .map(|((x, m), c)| c + delta * (x - m))
                .collect();
            let (v, clamped) = polytope.clamp(&raw);
            any |= clamped;
            v
        })
        .collect();
    let shrunk = ActionPolytope {
        vertices,
        low: polytope.low.clone(),
        high: polytope.high.clone(),
    };
    (shrunk, any)
}

/// Rebuilds a full successor from its projected actuated components.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    base_state: State,
    indices: Vec<usize>,
    identity: bool,
}

impl Reconstruction {
    /// Components kept by the reduction.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn reduce(&self, full: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| full[i]).collect()
    }

    /// Full next state whose actuated components are `reduced_next` and whose
    /// positions follow from the env's kinematics.
    pub fn reconstruct(&self, env: &Env, reduced_next: &[f64]) -> State {
        if self.identity {
            return reduced_next.to_vec();
        }
        let mut next = self.base_state.clone();
        for (&i, &v) in self.indices.iter().zip(reduced_next) {
            next[i] = v;
        }
        env.integrate_positions(&self.base_state, next)
    }
}

/// Restrict a reach polytope and a predicted successor to the actuated
/// components. Envs without declared structure get the identity reduction.
pub fn reduce_to_actuated(
    env: &Env,
    reach: &ReachPolytope,
    predicted: &[f64],
) -> (ReachPolytope, Vec<f64>, Reconstruction) {
    let spec = env.spec();
    let identity = !spec.has_actuated_structure() || reach.reduced;
    let indices: Vec<usize> = if identity {
        (0..predicted.len()).collect()
    } else {
        (0..spec.n_states).filter(|&i| spec.actuated_mask[i]).collect()
    };
    let recon = Reconstruction {
        base_state: reach.base_state.clone(),
        indices,
        identity,
    };
    let reduced = ReachPolytope {
        base_state: reach.base_state.clone(),
        vertex_actions: reach.vertex_actions.clone(),
        vertex_successors: reach.vertex_successors.iter().map(|s| recon.reduce(s)).collect(),
        reduced: !identity || reach.reduced,
    };
    let predicted = recon.reduce(predicted);
    (reduced, predicted, recon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Integrator;

    #[test]
    fn double_integrator_vertex_successors() {
        let env = Env::by_name("double-integrator").unwrap();
        let r = reach_vertices(&env, &[0.0, 0.0], &env.polytope()).unwrap();
        let want = [[-0.01, -0.1], [0.01, 0.1]];
        for (got, want) in r.vertex_successors.iter().zip(want) {
            assert!((got[0] - want[0]).abs() < 1e-15 && (got[1] - want[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_polytope() {
        let env = Env::by_name("double-integrator").unwrap();
        let p = ActionPolytope::new(vec![vec![0.5]], vec![-1.0], vec![1.0]).unwrap();
        let r = reach_vertices(&env, &[0.2, 0.1], &p).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.vertex_successors[0], env.step(&[0.2, 0.1], &[0.5]).unwrap());
    }

    #[test]
    fn shrink_examples() {
        let p = ActionPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let (s, clamped) = shrunk_vertices(&p, &[0.0, 0.0], 0.5).unwrap();
        assert!(!clamped);
        let want = ActionPolytope::from_box(&[-0.5, -0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(s.vertices, want.vertices);

        let (s, clamped) = shrunk_vertices(&p, &[1.0, 1.0], 0.5).unwrap();
        assert!(clamped);
        let want = ActionPolytope::from_box(&[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(s.vertices, want.vertices);

        let (s, _) = shrunk_vertices(&p, &p.mean(), 1.0 - 1e-15).unwrap();
        for (a, b) in s.vertices.iter().zip(&p.vertices) {
            assert!(linalg::dist(a, b) < 1e-14);
        }
        for bad in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(shrunk_vertices(&p, &[0.0, 0.0], bad).is_err());
        }
    }

    #[test]
    fn reduction_dimension_and_reconstruction() {
        let env = Env::by_name("double-integrator").unwrap();
        let s = [0.3, -0.2];
        let r = reach_vertices(&env, &s, &env.polytope()).unwrap();
        let a = [0.4];
        let target = env.step(&s, &a).unwrap();
        let (red, pred, recon) = reduce_to_actuated(&env, &r, &target);
        assert!(red.reduced);
        assert_eq!(red.vertex_successors[0].len(), 1);
        assert_eq!(pred.len(), 1);
        assert_eq!(recon.reconstruct(&env, &pred), target);
    }

    #[test]
    fn explicit_reconstruction_ignores_new_velocity() {
        let env = Env::double_integrator(1, Integrator::ExplicitEuler);
        let s = [0.3, -0.2];
        let r = reach_vertices(&env, &s, &env.polytope()).unwrap();
        let (_, _, recon) = reduce_to_actuated(&env, &r, &s);
        let a = recon.reconstruct(&env, &[5.0]);
        let b = recon.reconstruct(&env, &[-5.0]);
        assert_eq!(a[0], b[0]);
        assert_eq!(a[0], 0.3 + 0.1 * -0.2);
    }

    #[test]
    fn reconstruction_matches_simulation_for_every_env() {
        for name in crate::dynamics::ENV_NAMES {
            let env = Env::by_name(name).unwrap();
            let s = env.spec().initial_high.clone();
            let poly = env.polytope();
            let r = reach_vertices(&env, &s, &poly).unwrap();
            for (v, succ) in r.vertex_actions.iter().zip(&r.vertex_successors) {
                let (_, _, recon) = reduce_to_actuated(&env, &r, succ);
                assert_eq!(&recon.reconstruct(&env, &recon.reduce(succ)), succ);
                assert_eq!(&env.step(&s, v).unwrap(), succ);
            }
        }
    }
}
