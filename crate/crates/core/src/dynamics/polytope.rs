use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

use super::env::Action;

/// Largest action dimension for which every box corner is enumerated.
pub const MAX_CORNER_DIM: usize = 6;

/// Polytopic under-approximation of the admissible action set, together
/// with the box it must stay inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPolytope {
    pub vertices: Vec<Action>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionPolytope {
    pub fn new(vertices: Vec<Action>, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidInput("polytope needs at least one vertex".into()));
        }
        let n = low.len();
        if high.len() != n || vertices.iter().any(|v| v.len() != n) {
            return Err(Error::Mismatch("polytope vertex / bound dimensions differ".into()));
        }
        for v in &vertices {
            let inside = v
                .iter()
                .zip(low.iter().zip(&high))
                .all(|(x, (lo, hi))| x.is_finite() && lo <= x && x <= hi);
            if !inside {
                return Err(Error::InvalidInput(format!("vertex {v:?} outside action box")));
            }
        }
        Ok(Self { vertices, low, high })
    }

    /// Corners of the box `[low, high]`, vertex `k` taking `high` on channel
    /// `i` when bit `i` of `k` is set. Above [`MAX_CORNER_DIM`] channels the
    /// `2n` face centres are used instead.
    pub fn from_box(low: &[f64], high: &[f64]) -> Result<Self> {
        let n = low.len();
        if n == 0 || high.len() != n {
            return Err(Error::Mismatch("action box bounds".into()));
        }
        let vertices = if n <= MAX_CORNER_DIM {
            (0..1usize << n)
                .map(|k| {
                    (0..n)
                        .map(|i| if (k >> i) & 1 == 1 { high[i] } else { low[i] })
                        .collect()
                })
                .collect()
        } else {
            let centre: Vec<f64> = low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect();
            let mut vs = Vec::with_capacity(2 * n);
            for i in 0..n {
                for bound in [low[i], high[i]] {
                    let mut v = centre.clone();
                    v[i] = bound;
                    vs.push(v);
                }
            }
            vs
        };
        Self::new(vertices, low.to_vec(), high.to_vec())
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn mean(&self) -> Action {
        linalg::mean(&self.vertices)
    }

    pub fn clamp(&self, a: &[f64]) -> (Action, bool) {
        linalg::clamp_into(a, &self.low, &self.high)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_corners_in_binary_order() {
        let p = ActionPolytope::from_box(&[-1.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(
            p.vertices,
            vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.0, 2.0], vec![1.0, 2.0]]
        );
        assert_eq!(p.mean(), vec![0.0, 1.0]);
    }

    #[test]
    fn high_dimensional_boxes_use_face_centres() {
        let p = ActionPolytope::from_box(&[-1.0; 8], &[1.0; 8]).unwrap();
        assert_eq!(p.len(), 16);
        assert_eq!(p.mean(), vec![0.0; 8]);
    }

    #[test]
    fn vertices_outside_box_rejected() {
        assert!(ActionPolytope::new(vec![vec![2.0]], vec![-1.0], vec![1.0]).is_err());
    }
}
