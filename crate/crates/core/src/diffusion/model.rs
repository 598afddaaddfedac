//! Trajectory encoding and the checkpoint file.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Env, NormStats, State, Trajectory};
use crate::error::{Error, Result};
use crate::io::{self, Reader, Writer};
use crate::projection::{CorrectionPolicy, ProjectorKind, ProjectorTag};

use super::curriculum::{Curriculum, CurriculumMode};
use super::denoiser::{Layout, Modality, WindowMlp};
use super::schedule::NoiseSchedule;

const MAGIC: &[u8; 4] = b"RDCK";
const VERSION: u32 = 1;

/// Normalised columns `col0 .. col0 + T` of `x` from a physical trajectory.
pub(crate) fn encode_into(layout: &Layout, stats: &NormStats, traj: &Trajectory, x: &mut DMatrix<f64>, col0: usize) {
    let ns = layout.n_states;
    match layout.modality {
        Modality::S | Modality::SA => {
            for (t, s) in traj.states.iter().enumerate() {
                for (i, v) in stats.normalize_state(s).into_iter().enumerate() {
                    x[(i, col0 + t)] = v;
                }
            }
            if layout.modality == Modality::SA {
                let actions = traj.actions.as_ref().expect("SA encoding needs actions");
                for (t, a) in actions.iter().enumerate() {
                    for (i, v) in stats.normalize_action(a).into_iter().enumerate() {
                        x[(ns + i, col0 + t)] = v;
                    }
                }
                for i in 0..layout.n_actions {
                    x[(ns + i, col0 + layout.horizon)] = 0.0;
                }
            }
        }
        Modality::A => {
            let actions = traj.actions.as_ref().expect("A encoding needs actions");
            for (t, a) in actions.iter().enumerate() {
                for (i, v) in stats.normalize_action(a).into_iter().enumerate() {
                    x[(i, col0 + t)] = v;
                }
            }
        }
    }
}

/// Overwrite the state rows of token 0 with normalised `s_0`.
pub(crate) fn pin_initial(layout: &Layout, stats: &NormStats, s0: &[f64], x: &mut DMatrix<f64>, col0: usize) {
    if layout.modality == Modality::A {
        return;
    }
    for (i, v) in stats.normalize_state(s0).into_iter().enumerate() {
        x[(i, col0)] = v;
    }
}

/// Physical trajectory from columns `col0 ..`; the first state is `s0` exactly.
/// Action-only layouts are rolled out from `s0`.
pub(crate) fn decode(
    layout: &Layout,
    stats: &NormStats,
    env: &Env,
    x: &DMatrix<f64>,
    col0: usize,
    s0: &[f64],
) -> Result<Trajectory> {
    let ns = layout.n_states;
    let na = layout.n_actions;
    let h = layout.horizon;
    let column = |t: usize, from: usize, n: usize| -> Vec<f64> { (0..n).map(|i| x[(from + i, col0 + t)]).collect() };
    match layout.modality {
        Modality::S | Modality::SA => {
            let mut states: Vec<State> = Vec::with_capacity(h + 1);
            states.push(s0.to_vec());
            for t in 1..=h {
                states.push(stats.denormalize_state(&column(t, 0, ns)));
            }
            let actions = (layout.modality == Modality::SA)
                .then(|| (0..h).map(|t| stats.denormalize_action(&column(t, ns, na))).collect());
            Ok(Trajectory { states, actions })
        }
        Modality::A => {
            let actions: Vec<_> = (0..h).map(|t| stats.denormalize_action(&column(t, 0, na))).collect();
            env.rollout(s0, &actions)
        }
    }
}

/// Conditioning vector: normalised `s_0` (when enabled) followed by `context`.
pub(crate) fn condition(layout: &Layout, stats: &NormStats, s0: &[f64], context: &[f64]) -> Result<Vec<f64>> {
    if context.len() != layout.context_dim {
        return Err(Error::Mismatch(format!(
            "context has {} values, model expects {}",
            context.len(),
            layout.context_dim
        )));
    }
    let mut c = Vec::with_capacity(layout.cond_dim());
    if layout.condition_on_s0 {
        c.extend(stats.normalize_state(s0));
    }
    c.extend_from_slice(context);
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    pub learning_rate: f64,
    /// Mean loss over the last 50 steps.
    pub final_loss: Option<f64>,
    pub projector: String,
    pub curriculum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub env: Env,
    pub schedule: NoiseSchedule,
    /// Inference default; the training curriculum is recorded in `meta`.
    pub curriculum: Curriculum,
    /// Inference default projector, if any.
    pub projector: Option<ProjectorKind>,
    pub stats: NormStats,
    pub denoiser: WindowMlp,
    pub meta: TrainMeta,
}

fn write_projector(w: &mut Writer, p: &Option<ProjectorKind>) {
    let Some(p) = p else {
        w.u8(0);
        return;
    };
    let (code, lambda) = match &p.tag {
        ProjectorTag::P => (1, 0.0),
        ProjectorTag::PRef { lambda } => (2, *lambda),
        ProjectorTag::PA => (3, 0.0),
        ProjectorTag::PSA(_) => (4, 0.0),
    };
    w.u8(code);
    w.f64(lambda);
    w.f64(p.delta);
    w.u8(p.action_guided as u8);
    w.u8(p.uses_reduction as u8);
    if let ProjectorTag::PSA(policy) = &p.tag {
        policy.write_to(w);
    }
}

fn read_projector(r: &mut Reader) -> Result<Option<ProjectorKind>> {
    let code = r.u8()?;
    if code == 0 {
        return Ok(None);
    }
    let lambda = r.f64()?;
    let delta = r.f64()?;
    let action_guided = r.u8()? != 0;
    let uses_reduction = r.u8()? != 0;
    let tag = match code {
        1 => ProjectorTag::P,
        2 => ProjectorTag::PRef { lambda },
        3 => ProjectorTag::PA,
        4 => ProjectorTag::PSA(Arc::new(CorrectionPolicy::read(r)?)),
        c => return Err(Error::Format(format!("unknown projector code {c}"))),
    };
    Ok(Some(ProjectorKind {
        tag,
        delta,
        action_guided,
        uses_reduction,
    }))
}

fn write_curriculum(w: &mut Writer, c: &Curriculum) {
    w.str(c.name());
    w.f64(c.sigma_min);
    w.f64(c.sigma_max);
}

fn read_curriculum(r: &mut Reader) -> Result<Curriculum> {
    let name = r.str()?;
    let sigma_min = r.f64()?;
    let sigma_max = r.f64()?;
    let mode = match name.as_str() {
        "custom" => CurriculumMode::Custom,
        other => Curriculum::by_name(other)?.mode,
    };
    let c = Curriculum {
        mode,
        sigma_min,
        sigma_max,
    };
    c.validate()?;
    Ok(c)
}

impl Checkpoint {
    pub fn layout(&self) -> &Layout {
        use super::denoiser::Denoiser;
        self.denoiser.layout()
    }

    pub fn modality(&self) -> Modality {
        self.layout().modality
    }

    /// Errors unless `env` is the environment the model was trained on.
    pub fn check_env(&self, env: &Env) -> Result<()> {
        let a = self.env.spec();
        let b = env.spec();
        if a.name != b.name || a.horizon != b.horizon || a.n_states != b.n_states || a.n_actions != b.n_actions {
            return Err(Error::Mismatch(format!(
                "checkpoint was trained on `{}` with horizon {}, got `{}` with horizon {}",
                a.name, a.horizon, b.name, b.horizon
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.env.spec();
        let layout = *self.layout();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&spec.name);
        w.u32(spec.horizon as u32);
        w.u8(layout.modality.code());
        w.u8(layout.condition_on_s0 as u8);
        w.u32(layout.context_dim as u32);
        let s = &self.schedule;
        w.u32(s.steps as u32);
        w.f64s(&[s.sigma_max, s.sigma_min, s.rho, s.p_mean, s.p_std]);
        write_curriculum(&mut w, &self.curriculum);
        write_projector(&mut w, &self.projector);
        self.stats.write_to(&mut w);
        self.denoiser.write(&mut w);
        w.str(&serde_json::to_string(&self.meta).expect("metadata serialises"));
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let env = Env::by_name(&r.str()?)?.with_horizon(r.u32()? as usize);
        let layout = Layout {
            modality: Modality::from_code(r.u8()?)?,
            n_states: env.n_states(),
            n_actions: env.n_actions(),
            horizon: env.horizon(),
            condition_on_s0: r.u8()? != 0,
            context_dim: r.u32()? as usize,
        };
        let steps = r.u32()? as usize;
        let v = r.f64s(5)?;
        let schedule = NoiseSchedule {
            steps,
            sigma_max: v[0],
            sigma_min: v[1],
            rho: v[2],
            p_mean: v[3],
            p_std: v[4],
        };
        schedule.validate()?;
        let curriculum = read_curriculum(&mut r)?;
        let projector = read_projector(&mut r)?;
        let stats = NormStats::read(&mut r, env.n_states(), env.n_actions())?;
        let denoiser = WindowMlp::read(&mut r, layout)?;
        let meta = serde_json::from_str(&r.str()?)?;
        r.finish()?;
        if !denoiser.all_finite() {
            return Err(Error::Format("checkpoint parameters are not finite".into()));
        }
        Ok(Self {
            env,
            schedule,
            curriculum,
            projector,
            stats,
            denoiser,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }
}
