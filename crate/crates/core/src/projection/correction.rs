//! Learned feedback correction for the state-action projector.
//!
//! Given the gap between a predicted next state and the state reached by the
//! predicted action, the policy proposes an action correction `δa`. It is
//! trained on dataset triplets `(s_t, a_t, s_{t+1})` with planted
//! perturbations: `s^δ = f(s_t, a_t + δa)`, input `s^δ − s_{t+1}`, target `δa`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, Dataset, Env, State};
use crate::error::{Error, Result};
use crate::io::{self, Reader, Writer};
use crate::linalg;
use crate::nn::{Adam, Mlp};

const MAGIC: &[u8; 4] = b"RDCP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    /// Std of planted corrections as a fraction of the action box half-width.
    pub sigma_fraction: f64,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    /// Std of isotropic noise added to training inputs, relative to the
    /// residual RMS.
    #[serde(default)]
    pub input_jitter: f64,
    pub seed: u64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            sigma_fraction: 0.1,
            steps: 3000,
            batch: 256,
            learning_rate: 1e-3,
            hidden: 64,
            input_jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionPolicy {
    pub env_name: String,
    pub config: CorrectionConfig,
    net: Mlp,
    input_scale: Vec<f64>,
    /// Per-channel planted σ; the network predicts `δa / σ`.
    output_scale: Vec<f64>,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

impl CorrectionPolicy {
    pub fn n_states(&self) -> usize {
        self.net.n_in()
    }

    pub fn n_actions(&self) -> usize {
        self.net.n_out()
    }

    /// Raw correction for a batch of residuals, unclamped.
    pub fn correction(&self, residual: &[f64]) -> Action {
        let x = DMatrix::from_fn(residual.len(), 1, |i, _| residual[i] / self.input_scale[i]);
        let y = self.net.forward(&x);
        y.iter().zip(&self.output_scale).map(|(v, s)| v * s).collect()
    }

    /// `clamp(ã + π(s̃ − f(s, ã)))` and its successor.
    pub fn apply(&self, env: &Env, s: &[f64], a_tilde: &[f64], s_tilde: &[f64]) -> Result<(State, Action)> {
        let reached = env.step(s, a_tilde)?;
        let residual = linalg::sub(s_tilde, &reached);
        let raw: Vec<f64> = a_tilde
            .iter()
            .zip(self.correction(&residual))
            .map(|(a, d)| a + d)
            .collect();
        let (a, _) = linalg::clamp_into(&raw, &self.action_low, &self.action_high);
        Ok((env.step(s, &a)?, a))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.env_name);
        w.str(&serde_json::to_string(&self.config).expect("config serialises"));
        w.block(&self.input_scale);
        w.block(&self.output_scale);
        w.block(&self.action_low);
        w.block(&self.action_high);
        w.block(&self.loss_trace);
        w.f64(self.final_loss);
        self.net.write(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported correction policy version {version}")));
        }
        let env_name = r.str()?;
        let config = serde_json::from_str(&r.str()?)?;
        let input_scale = r.block()?;
        let output_scale = r.block()?;
        let action_low = r.block()?;
        let action_high = r.block()?;
        let loss_trace = r.block()?;
        let final_loss = r.f64()?;
        let net = Mlp::read(r)?;
        if input_scale.len() != net.n_in()
            || output_scale.len() != net.n_out()
            || action_low.len() != net.n_out()
            || action_high.len() != net.n_out()
        {
            return Err(Error::Format("correction policy dimensions disagree".into()));
        }
        Ok(Self {
            env_name,
            config,
            net,
            input_scale,
            output_scale,
            action_low,
            action_high,
            loss_trace,
            final_loss,
        })
    }

    pub(crate) fn write_to(&self, w: &mut Writer) {
        w.bytes(&self.to_bytes());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }
}

struct Sample {
    input: Vec<f64>,
    target: Vec<f64>,
}

fn draw_sample<R: Rng>(env: &Env, ds: &Dataset, sigma: &[f64], rng: &mut R) -> Result<Sample> {
    let traj = &ds.trajectories[rng.random_range(0..ds.len())];
    let t = rng.random_range(0..traj.horizon());
    let actions = traj.actions.as_ref().expect("checked by caller");
    let (s, a, next) = (&traj.states[t], &actions[t], &traj.states[t + 1]);
    let planted: Vec<f64> = a
        .iter()
        .zip(sigma)
        .map(|(x, sd)| {
            let z: f64 = StandardNormal.sample(rng);
            x + sd * z
        })
        .collect();
    let (applied, _) = env.clamp_action(&planted);
    let perturbed = env.step(s, &applied)?;
    Ok(Sample {
        input: linalg::sub(&perturbed, next),
        target: linalg::sub(&applied, a),
    })
}

fn batch_matrices(samples: &[Sample], in_scale: &[f64], out_scale: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    let x = DMatrix::from_fn(in_scale.len(), n, |i, j| samples[j].input[i] / in_scale[i]);
    let y = DMatrix::from_fn(out_scale.len(), n, |i, j| samples[j].target[i] / out_scale[i]);
    (x, y)
}

fn mse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (pred - target).norm_squared() / pred.ncols() as f64
}

/// Fit a correction policy on planted perturbations of dataset transitions.
pub fn train_correction_policy(env: &Env, ds: &Dataset, config: &CorrectionConfig) -> Result<CorrectionPolicy> {
    if ds.is_empty() || ds.trajectories.iter().any(|t| t.actions.is_none()) {
        return Err(Error::Config("correction policy training needs a dataset with actions".into()));
    }
    if ds.env.name() != env.name() {
        return Err(Error::Mismatch(format!(
            "dataset env `{}` differs from `{}`",
            ds.env.name(),
            env.name()
        )));
    }
    if !(config.sigma_fraction > 0.0) || config.batch == 0 || config.hidden == 0 {
        return Err(Error::Config("correction policy needs positive σ, batch and width".into()));
    }
    let spec = env.spec();
    let sigma: Vec<f64> = spec
        .action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(l, h)| (config.sigma_fraction * 0.5 * (h - l)).max(1e-12))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let calibration = (0..2048)
        .map(|_| draw_sample(env, ds, &sigma, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let ms = calibration.iter().map(|s| linalg::dot(&s.input, &s.input)).sum::<f64>()
        / (calibration.len() * spec.n_states) as f64;
    let rms = if ms.sqrt() > 1e-12 { ms.sqrt() } else { 1.0 };
    let input_scale = vec![rms; spec.n_states];
    let eval = &calibration[..512];
    let (eval_x, eval_y) = batch_matrices(eval, &input_scale, &sigma);

    let mut net = Mlp::new(&[spec.n_states, config.hidden, config.hidden, spec.n_actions], &mut rng);
    let mut grad = net.zeros_like();
    let mut opt = Adam::new(config.learning_rate);
    let mut loss_trace = vec![mse(&net.forward(&eval_x), &eval_y)];
    let every = (config.steps / 20).max(1);
    for step in 0..config.steps {
        let samples = (0..config.batch)
            .map(|_| draw_sample(env, ds, &sigma, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (mut x, y) = batch_matrices(&samples, &input_scale, &sigma);
        if config.input_jitter > 0.0 {
            x.iter_mut().for_each(|v| *v += config.input_jitter * rng.sample::<f64, _>(StandardNormal));
        }
        let (pred, cache) = net.forward_cached(&x);
        let gy = (pred - &y) * (2.0 / config.batch as f64);
        grad.fill_zero();
        net.backward(&cache, &gy, &mut grad);
        opt.step(net.slices_mut(), grad.slices());
        if (step + 1) % every == 0 || step + 1 == config.steps {
            loss_trace.push(mse(&net.forward(&eval_x), &eval_y));
        }
    }
    if !net.all_finite() {
        return Err(Error::InvalidInput("correction policy training diverged".into()));
    }
    let final_loss = *loss_trace.last().unwrap();
    Ok(CorrectionPolicy {
        env_name: env.name().to_string(),
        config: config.clone(),
        net,
        input_scale,
        output_scale: sigma,
        action_low: spec.action_low.clone(),
        action_high: spec.action_high.clone(),
        loss_trace,
        final_loss,
    })
}
