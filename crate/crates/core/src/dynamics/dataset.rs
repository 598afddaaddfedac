//! Admissible trajectory datasets and their on-disk format.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic "RDDS" | u32 version
//! str env name | u32 n_states | u32 n_actions | f64 dt | u32 H | u8 integrator
//! f64[n_states] state mean | f64[n_states] state scale
//! f64[n_actions] action mean | f64[n_actions] action scale
//! str provenance (JSON)
//! u64 n_traj
//! per trajectory: f64[(H+1)·n_states] states | f64[H·n_actions] actions
//! ```
//!
//! Strings are `u32` length-prefixed UTF-8.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Reader, Writer};

use super::env::{Env, Integrator};
use super::trajectory::Trajectory;

const MAGIC: &[u8; 4] = b"RDDS";
const VERSION: u32 = 1;

/// Per-channel affine normalization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(n_states: usize, n_actions: usize) -> Self {
        Self {
            state_mean: vec![0.0; n_states],
            state_scale: vec![1.0; n_states],
            action_mean: vec![0.0; n_actions],
            action_scale: vec![1.0; n_actions],
        }
    }

    pub fn from_trajectories(n_states: usize, n_actions: usize, trajs: &[Trajectory]) -> Self {
        if trajs.is_empty() {
            return Self::identity(n_states, n_actions);
        }
        let (state_mean, state_scale) =
            channel_stats(n_states, trajs.iter().flat_map(|t| t.states.iter()));
        let (action_mean, action_scale) = channel_stats(
            n_actions,
            trajs.iter().flat_map(|t| t.actions.iter().flatten()),
        );
        Self {
            state_mean,
            state_scale,
            action_mean,
            action_scale,
        }
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        normalize(s, &self.state_mean, &self.state_scale)
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        denormalize(z, &self.state_mean, &self.state_scale)
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        normalize(a, &self.action_mean, &self.action_scale)
    }

    pub fn denormalize_action(&self, z: &[f64]) -> Vec<f64> {
        denormalize(z, &self.action_mean, &self.action_scale)
    }

    fn write(&self, w: &mut Writer) {
        w.f64s(&self.state_mean);
        w.f64s(&self.state_scale);
        w.f64s(&self.action_mean);
        w.f64s(&self.action_scale);
    }

    pub(crate) fn read(r: &mut Reader, n_states: usize, n_actions: usize) -> Result<Self> {
        Ok(Self {
            state_mean: r.f64s(n_states)?,
            state_scale: r.f64s(n_states)?,
            action_mean: r.f64s(n_actions)?,
            action_scale: r.f64s(n_actions)?,
        })
    }

    pub(crate) fn write_to(&self, w: &mut Writer) {
        self.write(w)
    }
}

fn normalize(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean.iter().zip(scale))
        .map(|(x, (m, s))| (x - m) / s)
        .collect()
}

fn denormalize(z: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(mean.iter().zip(scale))
        .map(|(z, (m, s))| z * s + m)
        .collect()
}

fn channel_stats<'a>(dim: usize, rows: impl Iterator<Item = &'a Vec<f64>> + Clone) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for r in rows.clone() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
        count += 1;
    }
    if count == 0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let scale = var
        .iter()
        .map(|v| {
            let sd = (v / count as f64).sqrt();
            if sd > 1e-9 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: Env,
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
    /// Free-form JSON describing how the data was produced.
    pub provenance: String,
}

#[derive(Serialize)]
struct JsonHeader<'a> {
    env: &'a str,
    n_states: usize,
    n_actions: usize,
    dt: f64,
    horizon: usize,
    integrator: Integrator,
    stats: &'a NormStats,
    n_trajectories: usize,
    provenance: serde_json::Value,
}

impl Dataset {
    pub fn new(env: Env, trajectories: Vec<Trajectory>, provenance: String) -> Result<Self> {
        for (i, t) in trajectories.iter().enumerate() {
            t.check_shape(&env)?;
            if t.horizon() != env.horizon() || t.actions.is_none() {
                return Err(Error::Mismatch(format!(
                    "trajectory {i}: dataset entries need horizon {} and actions",
                    env.horizon()
                )));
            }
        }
        let stats = NormStats::from_trajectories(env.n_states(), env.n_actions(), &trajectories);
        Ok(Self {
            env,
            trajectories,
            stats,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Every stored trajectory must re-simulate bit-exactly.
    pub fn verify(&self) -> Result<()> {
        for (i, t) in self.trajectories.iter().enumerate() {
            if let Some((step, deviation)) = t.resimulation_mismatch(&self.env)? {
                return Err(Error::Inadmissible {
                    trajectory: i,
                    step,
                    deviation,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.env.spec();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&spec.name);
        w.u32(spec.n_states as u32);
        w.u32(spec.n_actions as u32);
        w.f64(spec.dt);
        w.u32(spec.horizon as u32);
        w.u8(spec.integrator.code());
        self.stats.write(&mut w);
        w.str(&self.provenance);
        w.u64(self.trajectories.len() as u64);
        for t in &self.trajectories {
            for s in &t.states {
                w.f64s(s);
            }
            for a in t.actions.iter().flatten() {
                w.f64s(a);
            }
        }
        w.buf
    }

    /// Parse without the admissibility check.
    pub fn from_bytes_unchecked(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let name = r.str()?;
        let n_states = r.u32()? as usize;
        let n_actions = r.u32()? as usize;
        let dt = r.f64()?;
        let horizon = r.u32()? as usize;
        let integrator = Integrator::from_code(r.u8()?)?;
        let env = Env::by_name(&name)?.with_horizon(horizon);
        let spec = env.spec();
        if spec.n_states != n_states
            || spec.n_actions != n_actions
            || spec.dt != dt
            || spec.integrator != integrator
        {
            return Err(Error::Format(format!(
                "header does not match built-in env `{name}`"
            )));
        }
        let stats = NormStats::read(&mut r, n_states, n_actions)?;
        let provenance = r.str()?;
        let n = r.u64()? as usize;
        let per_traj = ((horizon + 1) * n_states + horizon * n_actions) * 8;
        if per_traj > 0 && n > r.remaining() / per_traj {
            return Err(Error::Format(format!("{n} trajectories exceed file size")));
        }
        let mut trajectories = Vec::with_capacity(n);
        for _ in 0..n {
            let states = (0..=horizon)
                .map(|_| r.f64s(n_states))
                .collect::<Result<Vec<_>>>()?;
            let actions = (0..horizon)
                .map(|_| r.f64s(n_actions))
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory {
                states,
                actions: Some(actions),
            });
        }
        r.finish()?;
        Ok(Self {
            env,
            trajectories,
            stats,
            provenance,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ds = Self::from_bytes_unchecked(bytes)?;
        ds.verify()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    /// Load and re-check admissibility of every trajectory.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        Self::from_bytes_unchecked(&io::read_file(path)?)
    }

    /// JSON-lines export: one header line, then one line per trajectory.
    pub fn to_jsonl(&self) -> Result<String> {
        let spec = self.env.spec();
        let provenance = serde_json::from_str(&self.provenance)
            .unwrap_or(serde_json::Value::String(self.provenance.clone()));
        let header = JsonHeader {
            env: &spec.name,
            n_states: spec.n_states,
            n_actions: spec.n_actions,
            dt: spec.dt,
            horizon: spec.horizon,
            integrator: spec.integrator,
            stats: &self.stats,
            n_trajectories: self.trajectories.len(),
            provenance,
        };
        let mut out = serde_json::to_string(&serde_json::json!({ "header": header }))?;
        out.push('\n');
        for t in &self.trajectories {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, Controller};

    #[test]
    fn empty_dataset_has_valid_header() {
        let env = Env::by_name("double-integrator").unwrap();
        let ds = generate_dataset(&env, Controller::LqrGoal, 0, 3).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.stats, NormStats::identity(2, 1));
        assert_eq!(back.env.name(), "double-integrator");
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let env = Env::by_name("unicycle").unwrap().with_horizon(8);
        let ds = generate_dataset(&env, Controller::PdWaypoints, 5, 11).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_state_fails_load() {
        let env = Env::by_name("double-integrator").unwrap().with_horizon(4);
        let mut ds = generate_dataset(&env, Controller::LqrGoal, 2, 1).unwrap();
        ds.trajectories[1].states[3][0] += 1e-12;
        let err = Dataset::from_bytes(&ds.to_bytes()).unwrap_err();
        assert!(matches!(err, Error::Inadmissible { trajectory: 1, step: 2, .. }));
        assert!(Dataset::from_bytes_unchecked(&ds.to_bytes()).is_ok());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let env = Env::by_name("double-integrator").unwrap().with_horizon(4);
        let ds = generate_dataset(&env, Controller::LqrGoal, 2, 1).unwrap();
        let bytes = ds.to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn jsonl_has_header_and_one_line_per_trajectory() {
        let env = Env::by_name("double-integrator").unwrap().with_horizon(4);
        let ds = generate_dataset(&env, Controller::LqrGoal, 3, 1).unwrap();
        let text = ds.to_jsonl().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let t: Trajectory = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(t, ds.trajectories[1]);
    }

    #[test]
    fn normalization_round_trip() {
        let env = Env::by_name("quadrotor-lite").unwrap().with_horizon(10);
        let ds = generate_dataset(&env, Controller::ScriptedSlalom, 4, 2).unwrap();
        for s in ds.trajectories.iter().flat_map(|t| &t.states) {
            let back = ds.stats.denormalize_state(&ds.stats.normalize_state(s));
            for (a, b) in back.iter().zip(s) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
