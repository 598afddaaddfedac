//! Denoiser training with curriculum-gated projection.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::projection::{project_trajectory, ProjectorKind};

use super::curriculum::Curriculum;
use super::denoiser::{Layout, Modality, WindowMlp};
use super::model::{condition, decode, encode_into, pin_initial, Checkpoint, TrainMeta};
use super::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub modality: Modality,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip, disabled when `None`.
    pub grad_clip: Option<f64>,
    pub width: usize,
    /// Tokens on each side seen by the per-token network.
    pub radius: usize,
    pub condition_on_s0: bool,
    pub schedule: NoiseSchedule,
    /// Training-time projector; `None` trains without projection.
    pub projector: Option<ProjectorKind>,
    pub curriculum: Curriculum,
    /// Inference defaults stored in the checkpoint.
    pub inference_projector: Option<ProjectorKind>,
    pub inference_curriculum: Curriculum,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            modality: Modality::SA,
            steps: 2000,
            batch: 32,
            learning_rate: 2e-3,
            grad_clip: Some(1.0),
            width: 96,
            radius: 2,
            condition_on_s0: true,
            schedule: NoiseSchedule::default(),
            projector: None,
            curriculum: Curriculum::off(),
            inference_projector: None,
            inference_curriculum: Curriculum::post(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.width == 0 {
            return Err(Error::Config("batch and width must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        self.schedule.validate()?;
        self.curriculum.validate()?;
        self.inference_curriculum.validate()?;
        for p in [&self.projector, &self.inference_projector].into_iter().flatten() {
            check_projector(self.modality, p)?;
        }
        Ok(())
    }
}

/// Projectors that consume actions need a model that predicts them.
pub(crate) fn check_projector(modality: Modality, p: &ProjectorKind) -> Result<()> {
    p.validate()?;
    if p.needs_actions() && !modality.has_actions() {
        return Err(Error::Config(format!(
            "projector {} needs predicted actions; modality {} has none",
            p.name(),
            modality.name()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub sigma_mean: f64,
    /// Fraction of transitions projected in this batch.
    pub projection_fraction: f64,
}

pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,sigma_mean,projection_fraction\n");
    for r in trace {
        out.push_str(&format!("{},{:e},{:e},{}\n", r.step, r.loss, r.sigma_mean, r.projection_fraction));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<LossRecord>,
}

pub(crate) fn layout_for(ds: &Dataset, cfg: &TrainConfig) -> Layout {
    Layout {
        modality: cfg.modality,
        n_states: ds.env.n_states(),
        n_actions: ds.env.n_actions(),
        horizon: ds.env.horizon(),
        condition_on_s0: cfg.condition_on_s0,
        context_dim: 0,
    }
}

struct Batch {
    clean: DMatrix<f64>,
    noisy: DMatrix<f64>,
    cond: DMatrix<f64>,
    sigma: Vec<f64>,
    index: Vec<usize>,
    gates: Vec<Vec<bool>>,
}

fn draw_batch(ds: &Dataset, layout: &Layout, cfg: &TrainConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let tokens = layout.tokens();
    let c = layout.channels();
    let mut clean = DMatrix::zeros(c, size * tokens);
    let mut cond = DMatrix::zeros(layout.cond_dim(), size);
    let mut sigma = Vec::with_capacity(size);
    let mut index = Vec::with_capacity(size);
    let mut gates = Vec::with_capacity(size);
    for b in 0..size {
        let i = rng.random_range(0..ds.len());
        let traj = &ds.trajectories[i];
        encode_into(layout, &ds.stats, traj, &mut clean, b * tokens);
        let s = cfg.schedule.sample_training_sigma(rng);
        let cv = condition(layout, &ds.stats, &traj.states[0], &[])?;
        cond.set_column(b, &nalgebra::DVector::from_vec(cv));
        gates.push(match &cfg.projector {
            Some(_) => (0..layout.horizon).map(|_| cfg.curriculum.gate(s, rng)).collect(),
            None => vec![false; layout.horizon],
        });
        sigma.push(s);
        index.push(i);
    }
    let mut noisy = clean.clone();
    for b in 0..size {
        for col in b * tokens..(b + 1) * tokens {
            for r in 0..c {
                let z: f64 = rng.sample(StandardNormal);
                noisy[(r, col)] += sigma[b] * z;
            }
        }
        pin_initial(layout, &ds.stats, &ds.trajectories[index[b]].states[0], &mut noisy, b * tokens);
    }
    Ok(Batch {
        clean,
        noisy,
        cond,
        sigma,
        index,
        gates,
    })
}

/// Projected denoiser output in normalised units, per sample.
fn project_batch(
    ds: &Dataset,
    layout: &Layout,
    kind: &ProjectorKind,
    denoised: &DMatrix<f64>,
    batch: &Batch,
) -> Result<DMatrix<f64>> {
    let tokens = layout.tokens();
    let columns: Vec<Option<DMatrix<f64>>> = (0..batch.sigma.len())
        .into_par_iter()
        .map(|b| -> Result<Option<DMatrix<f64>>> {
            let gates = &batch.gates[b];
            if layout.modality == Modality::A || !gates.iter().any(|g| *g) {
                return Ok(None);
            }
            let reference: &Trajectory = &ds.trajectories[batch.index[b]];
            let predicted = decode(layout, &ds.stats, &ds.env, denoised, b * tokens, &reference.states[0])?;
            let out = project_trajectory(&ds.env, &predicted, kind, Some(reference), &mut |t| gates[t])?;
            let mut x = denoised.columns(b * tokens, tokens).into_owned();
            let mut traj = out.trajectory;
            if layout.modality == Modality::SA && traj.actions.is_none() {
                traj.actions = predicted.actions;
            }
            encode_into(layout, &ds.stats, &traj, &mut x, 0);
            Ok(Some(x))
        })
        .collect::<Result<_>>()?;
    let mut out = denoised.clone();
    for (b, x) in columns.into_iter().enumerate() {
        if let Some(x) = x {
            out.columns_mut(b * tokens, tokens).copy_from(&x);
        }
    }
    Ok(out)
}

fn mean_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn checkpoint_of(ds: &Dataset, cfg: &TrainConfig, denoiser: WindowMlp, steps: usize, final_loss: Option<f64>) -> Checkpoint {
    Checkpoint {
        env: ds.env.clone(),
        schedule: cfg.schedule,
        curriculum: cfg.inference_curriculum,
        projector: cfg.inference_projector.clone(),
        stats: ds.stats.clone(),
        denoiser,
        meta: TrainMeta {
            steps,
            seed: cfg.seed,
            batch: cfg.batch,
            learning_rate: cfg.learning_rate,
            final_loss,
            projector: cfg.projector.as_ref().map_or("none", |p| p.name()).to_string(),
            curriculum: cfg.curriculum.name().to_string(),
        },
    }
}

/// Fresh network for `ds` under `cfg`.
pub fn init_denoiser(ds: &Dataset, cfg: &TrainConfig) -> WindowMlp {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    WindowMlp::new(layout_for(ds, cfg), cfg.radius, cfg.width, &mut rng)
}

/// Denoising loss of `denoiser` on a batch fixed by `seed`, without projection.
pub fn evaluation_loss(denoiser: &WindowMlp, ds: &Dataset, cfg: &TrainConfig, size: usize, seed: u64) -> Result<f64> {
    use super::denoiser::Denoiser;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = draw_batch(ds, denoiser.layout(), cfg, size, &mut rng)?;
    let d = denoiser.denoise(&batch.noisy, &batch.sigma, &batch.cond);
    Ok(mean_sq(&d, &batch.clean))
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(ds, cfg, init_denoiser(ds, cfg))
}

/// `L = ‖P_σ(D(τ + ε; σ)) − τ‖²` averaged over entries; simulator calls
/// inside the projection are treated as identity in the gradient.
pub fn train_from(ds: &Dataset, cfg: &TrainConfig, mut net: WindowMlp) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidInput("training needs a non-empty dataset".into()));
    }
    let layout = layout_for(ds, cfg);
    {
        use super::denoiser::Denoiser;
        if *net.layout() != layout {
            return Err(Error::Mismatch("denoiser layout does not match dataset and config".into()));
        }
    }
    if layout.modality.has_actions() && ds.trajectories.iter().any(|t| t.actions.is_none()) {
        return Err(Error::Config("modality needs dataset actions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut grad = net.zeros_like();
    let mut trace = Vec::with_capacity(cfg.steps);
    let window = 50.min(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(ds, &layout, cfg, cfg.batch, &mut rng)?;
        let (d, cache) = net.forward_cached(&batch.noisy, &batch.sigma, &batch.cond);
        let target = match &cfg.projector {
            Some(kind) => project_batch(ds, &layout, kind, &d, &batch)?,
            None => d.clone(),
        };
        let loss = mean_sq(&target, &batch.clean);
        let last_loss = trace.last().map(|r: &LossRecord| r.loss);
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(checkpoint_of(ds, cfg, net, step, last_loss)),
            });
        }
        let scale = 2.0 / target.len() as f64;
        let gy = (&target - &batch.clean) * scale;
        grad.fill_zero();
        net.backward(&cache, &gy, &mut grad);
        if let Some(clip) = cfg.grad_clip {
            let norm = grad.slices().iter().flat_map(|s| s.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let k = clip / norm;
                grad.slices_mut().into_iter().for_each(|s| s.iter_mut().for_each(|g| *g *= k));
            }
        }
        let progress = step as f64 / cfg.steps as f64;
        adam.lr = cfg.learning_rate * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        let before = net.clone();
        adam.step(net.slices_mut(), grad.slices());
        if !net.all_finite() {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(checkpoint_of(ds, cfg, before, step, last_loss)),
            });
        }
        let projected: usize = batch.gates.iter().map(|g| g.iter().filter(|v| **v).count()).sum();
        trace.push(LossRecord {
            step,
            loss,
            sigma_mean: batch.sigma.iter().sum::<f64>() / batch.sigma.len() as f64,
            projection_fraction: if layout.modality == Modality::A {
                0.0
            } else {
                projected as f64 / (batch.gates.len() * layout.horizon) as f64
            },
        });
        log::debug!("step {step} loss {loss:.5}");
    }
    let final_loss = (!trace.is_empty())
        .then(|| trace[trace.len() - window..].iter().map(|r| r.loss).sum::<f64>() / window as f64);
    Ok(TrainOutcome {
        checkpoint: checkpoint_of(ds, cfg, net, cfg.steps, final_loss),
        loss_trace: trace,
    })
}
