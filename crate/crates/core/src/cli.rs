//! Command-line front end. Flag values take precedence over `--config`
//! entries, which take precedence over built-in defaults; the resolved
//! values are echoed into every artifact header.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffusion::{
    sample_from, schedule_sigmas, select_best, train, Checkpoint, Curriculum, Modality, NoiseSchedule,
    ProjectorChoice, SampleOptions, TrainConfig,
};
use crate::dynamics::{generate_dataset, Controller, Dataset, Env, State, Trajectory};
use crate::error::{Error, Result};
use crate::evaluation::{run_experiment, ExperimentPlan};
use crate::inverse_dynamics::{id_trajectory, IdConfig, IdMethod};
use crate::io::{read_file, write_atomic};
use crate::projection::{
    project_trajectory, train_correction_policy, CorrectionConfig, CorrectionPolicy, ProjectorKind, ProjectorTag,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "reachdiff", version, about = "Diffusion trajectory planning with reachable-set projections")]
pub struct Cli {
    /// JSON file of flag defaults (keys are flag names without dashes, `-` or `_`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an admissible dataset with a scripted controller.
    GenData(GenDataArgs),
    /// Train a denoiser on a dataset.
    Train(TrainArgs),
    /// Sample trajectories from a checkpoint.
    Sample(SampleArgs),
    /// Project the trajectories of a dataset or sample file and report per-step residuals.
    Project(ProjectArgs),
    /// Check admissibility claims and measure SAE/CAE.
    Verify(VerifyArgs),
    /// Run an experiment plan and write a report bundle.
    Evaluate(EvaluateArgs),
    /// Print the noise ladder and the curriculum skip probability p(σ).
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Environment name.
    #[arg(long)]
    pub env: Option<String>,
    /// Controller; defaults to the env's natural expert.
    #[arg(long)]
    pub controller: Option<String>,
    /// Number of trajectories.
    #[arg(long)]
    pub n: Option<usize>,
    /// Horizon override.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a JSON-lines export here.
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Expected env name; checked against the dataset.
    #[arg(long)]
    pub env: Option<String>,
    /// S, SA or A.
    #[arg(long)]
    pub modality: Option<String>,
    /// Training projector: P, Pref, PA, PSA or none.
    #[arg(long)]
    pub projector: Option<String>,
    /// Training curriculum: pre, mid, post or off.
    #[arg(long)]
    pub curriculum: Option<String>,
    /// Projector used by default at inference (defaults to the training projector).
    #[arg(long)]
    pub inference_projector: Option<String>,
    /// Curriculum used by default at inference.
    #[arg(long)]
    pub inference_curriculum: Option<String>,
    /// Shrink fraction δ; enables action guidance for P and Pref.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Trade-off weight λ of Pref.
    #[arg(long)]
    pub lambda_ref: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of denoising steps stored in the checkpoint.
    #[arg(long = "N")]
    pub n_steps: Option<usize>,
    /// Correction policy file for PSA; trained from the dataset when absent.
    #[arg(long)]
    pub correction_policy: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint file to write; the loss trace goes next to it as `.loss.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Expected env name; checked against the checkpoint.
    #[arg(long)]
    pub env: Option<String>,
    /// Initial state as comma-separated values; drawn from the env when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub s0: Option<String>,
    /// Number of initial states drawn from the env when `--s0` is absent.
    #[arg(long)]
    pub initial_states: Option<usize>,
    /// Samples per initial state.
    #[arg(long)]
    pub batch: Option<usize>,
    /// P, Pref, PA, PSA or none; defaults to the checkpoint's projector.
    #[arg(long)]
    pub projector: Option<String>,
    #[arg(long)]
    pub curriculum: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda_ref: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    /// Denoising steps override.
    #[arg(long = "N")]
    pub n_steps: Option<usize>,
    /// Keep only the best sample per initial state under this metric.
    #[arg(long)]
    pub select: Option<String>,
    #[arg(long)]
    pub correction_policy: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample file to write (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Dataset or sample file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Env for sample files without a readable header.
    #[arg(long)]
    pub env: Option<String>,
    /// P, Pref, PA or PSA.
    #[arg(long, alias = "kind")]
    pub projector: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda_ref: Option<f64>,
    /// Project all state components instead of the actuated ones.
    #[arg(long)]
    pub full_state: bool,
    #[arg(long)]
    pub correction_policy: Option<PathBuf>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Dataset or sample file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Inverse-dynamics method: polytopic, blackbox, polytopic-then-blackbox or analytic-linear.
    #[arg(long)]
    pub id_method: Option<String>,
    /// Inverse-dynamics tolerance.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Experiment plan (JSON); relative paths resolve against its directory.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Replace the plan's seeds with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Number of denoising steps.
    #[arg(long = "N")]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub sigma_0: Option<f64>,
    #[arg(long)]
    pub sigma_last: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub curriculum: Option<String>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
}

/// Flag > config file > default, with every resolved value recorded.
struct Resolver {
    file: serde_json::Map<String, Value>,
    echo: BTreeMap<String, Value>,
}

fn key(name: &str) -> String {
    name.chars().filter(|c| *c != '-' && *c != '_').collect::<String>().to_lowercase()
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => match serde_json::from_slice::<Value>(&read_file(p)?)? {
                Value::Object(m) => m.into_iter().map(|(k, v)| (key(&k), v)).collect(),
                _ => return Err(Error::Config("config file must hold a JSON object".into())),
            },
            None => Default::default(),
        };
        Ok(Self {
            file,
            echo: BTreeMap::new(),
        })
    }

    fn opt<T: DeserializeOwned + Serialize>(&mut self, name: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(&key(name)) {
                Some(Value::Null) | None => None,
                Some(v) => Some(
                    serde_json::from_value(v.clone())
                        .map_err(|e| Error::Config(format!("config entry `{name}`: {e}")))?,
                ),
            },
        };
        if let Some(v) = &v {
            self.echo.insert(name.to_string(), serde_json::to_value(v)?);
        }
        Ok(v)
    }

    fn get<T: DeserializeOwned + Serialize>(&mut self, name: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = self.opt(name, flag)?.unwrap_or(default);
        self.echo.insert(name.to_string(), serde_json::to_value(&v)?);
        Ok(v)
    }

    fn required<T: DeserializeOwned + Serialize>(&mut self, name: &str, flag: Option<T>) -> Result<T> {
        self.opt(name, flag)?
            .ok_or_else(|| Error::Config(format!("missing required flag --{name}")))
    }

    fn echo(&self) -> Value {
        serde_json::to_value(&self.echo).expect("echo serialises")
    }
}

fn default_controller(env: &Env) -> &'static str {
    match env.name() {
        "unicycle" => "pd-waypoints",
        "quadrotor-lite" => "scripted-slalom",
        _ => "lqr-goal",
    }
}

fn curriculum_from(r: &mut Resolver, default: Curriculum, name_key: &str) -> Result<Curriculum> {
    let name: Option<String> = r.opt(name_key, None)?;
    let base = match name {
        Some(n) => Curriculum::by_name(&n)?,
        None => default,
    };
    let lo: Option<f64> = r.opt("sigma-min", None)?;
    let hi: Option<f64> = r.opt("sigma-max", None)?;
    if lo.is_none() && hi.is_none() {
        return Ok(base);
    }
    let start = if base.mode == crate::diffusion::CurriculumMode::Off { Curriculum::mid() } else { base };
    Curriculum::custom(lo.unwrap_or(start.sigma_min), hi.unwrap_or(start.sigma_max))
}

/// Overrides that the resolver reads lazily through `opt(name, None)`.
fn preset(r: &mut Resolver, entries: Vec<(&str, Option<Value>)>) {
    for (k, v) in entries {
        if let Some(v) = v {
            r.file.insert(key(k), v);
        }
    }
}

fn parse_state(text: &str, env: &Env) -> Result<State> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad --s0 value `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != env.n_states() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config(format!("--s0 needs {} finite values", env.n_states())));
    }
    Ok(v)
}

fn load_policy(path: Option<&Path>) -> Result<Option<Arc<CorrectionPolicy>>> {
    path.map(|p| CorrectionPolicy::load(p).map(Arc::new)).transpose()
}

/// Header line of a sample file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleHeader {
    pub env: String,
    pub horizon: usize,
    pub modality: String,
    pub projector: Option<String>,
    pub curriculum: String,
    pub sigmas: Vec<f64>,
    pub config: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleLine {
    pub index: usize,
    pub initial_state_index: usize,
    pub admissible_claim: bool,
    #[serde(flatten)]
    pub trajectory: Trajectory,
}

pub fn write_sample_file(path: &Path, header: &SampleHeader, lines: &[SampleLine]) -> Result<()> {
    let mut out = serde_json::to_string(&json!({ "header": header }))?;
    out.push('\n');
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_sample_file(path: &Path) -> Result<(SampleHeader, Vec<SampleLine>)> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::Format(e.to_string()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Error::Format("empty sample file".into()))?;
    #[derive(Deserialize)]
    struct Wrapped {
        header: SampleHeader,
    }
    let header = serde_json::from_str::<Wrapped>(first)
        .map_err(|e| Error::Format(format!("sample file header: {e}")))?
        .header;
    let body = lines
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("sample line: {e}"))))
        .collect::<Result<_>>()?;
    Ok((header, body))
}

/// Trajectories of a dataset or sample file, with each one's admissibility claim.
pub struct LoadedTrajectories {
    pub env: Env,
    pub trajectories: Vec<Trajectory>,
    pub claims: Vec<bool>,
    pub kind: &'static str,
}

pub fn load_trajectories(path: &Path) -> Result<LoadedTrajectories> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"RDDS") {
        let ds = Dataset::from_bytes_unchecked(&bytes)?;
        let n = ds.len();
        return Ok(LoadedTrajectories {
            env: ds.env,
            trajectories: ds.trajectories,
            claims: vec![true; n],
            kind: "dataset",
        });
    }
    let (header, lines) = read_sample_file(path)?;
    let env = Env::by_name(&header.env)?.with_horizon(header.horizon);
    Ok(LoadedTrajectories {
        env,
        claims: lines.iter().map(|l| l.admissible_claim).collect(),
        trajectories: lines.into_iter().map(|l| l.trajectory).collect(),
        kind: "samples",
    })
}

fn cmd_gen_data(a: GenDataArgs, r: &mut Resolver) -> Result<i32> {
    let env_name: String = r.get("env", a.env, "double-integrator".into())?;
    let env = Env::by_name(&env_name)?;
    let horizon: usize = r.get("horizon", a.horizon, env.horizon())?;
    let env = env.with_horizon(horizon);
    let controller: String = r.get("controller", a.controller, default_controller(&env).into())?;
    let n: usize = r.get("n", a.n, 256)?;
    let seed: u64 = r.get("seed", a.seed, 0)?;
    let out: PathBuf = r.required("out", a.out)?;
    let jsonl: Option<PathBuf> = r.opt("jsonl", a.jsonl)?;
    let mut ds = generate_dataset(&env, Controller::by_name(&controller)?, n, seed).map_err(runtime)?;
    let mut prov: Value = serde_json::from_str(&ds.provenance).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut prov {
        let mut echo = r.echo();
        if let Value::Object(e) = &mut echo {
            e.remove("out");
            e.remove("jsonl");
        }
        m.insert("config".into(), echo);
    }
    ds.provenance = serde_json::to_string(&prov)?;
    ds.save(&out)?;
    if let Some(p) = jsonl {
        write_atomic(&p, ds.to_jsonl()?.as_bytes())?;
    }
    println!("wrote {} trajectories of `{}` (H={}) to {}", ds.len(), env.name(), horizon, out.display());
    Ok(EXIT_OK)
}

/// Marks an error as a runtime failure even if its variant would read as usage.
fn runtime(e: Error) -> Error {
    match e {
        Error::Config(m) => Error::InvalidInput(m),
        other => other,
    }
}

fn cmd_train(a: TrainArgs, r: &mut Resolver) -> Result<i32> {
    let data: PathBuf = r.required("data", a.data)?;
    let out: PathBuf = r.required("out", a.out)?;
    let ds = Dataset::load(&data)?;
    if let Some(name) = r.opt::<String>("env", a.env)? {
        Env::by_name(&name)?;
        if name != ds.env.name() {
            return Err(Error::Config(format!("dataset holds `{}`, not `{name}`", ds.env.name())));
        }
    }
    let defaults = TrainConfig::default();
    let modality = Modality::by_name(&r.get::<String>("modality", a.modality, "SA".into())?)?;
    let projector_name: String = r.get("projector", a.projector, "none".into())?;
    let inference_name: String = r.get("inference-projector", a.inference_projector, projector_name.clone())?;
    preset(
        r,
        vec![
            ("curriculum", a.curriculum.map(Value::from)),
            ("inference-curriculum", a.inference_curriculum.map(Value::from)),
            ("sigma-min", a.sigma_min.map(Value::from)),
            ("sigma-max", a.sigma_max.map(Value::from)),
        ],
    );
    let training_default = if projector_name == "none" { Curriculum::off() } else { Curriculum::mid() };
    let curriculum = curriculum_from(r, training_default, "curriculum")?;
    let inference_curriculum = curriculum_from(r, Curriculum::post(), "inference-curriculum")?;
    let delta: Option<f64> = r.opt("delta", a.delta)?;
    let lambda: Option<f64> = r.opt("lambda-ref", a.lambda_ref)?;
    let steps: usize = r.get("steps", a.steps, defaults.steps)?;
    let batch: usize = r.get("batch", a.batch, defaults.batch)?;
    let lr: f64 = r.get("lr", a.lr, defaults.learning_rate)?;
    let width: usize = r.get("width", a.width, defaults.width)?;
    let n_steps: usize = r.get("N", a.n_steps, NoiseSchedule::default().steps)?;
    let seed: u64 = r.get("seed", a.seed, 0)?;
    let policy_path: Option<PathBuf> = r.opt("correction-policy", a.correction_policy)?;

    let mut policy = load_policy(policy_path.as_deref())?;
    if policy.is_none() && (projector_name == "PSA" || inference_name == "PSA") {
        let cfg = CorrectionConfig {
            seed,
            ..CorrectionConfig::default()
        };
        log::info!("training correction policy for PSA");
        policy = Some(Arc::new(train_correction_policy(&ds.env, &ds, &cfg).map_err(runtime)?));
    }
    let projector = ProjectorKind::by_name(&projector_name, lambda, delta, policy.clone())?;
    let inference_projector = ProjectorKind::by_name(&inference_name, lambda, delta, policy)?;
    let schedule = NoiseSchedule::with_steps(n_steps);
    schedule.validate()?;
    let cfg = TrainConfig {
        modality,
        steps,
        batch,
        learning_rate: lr,
        width,
        schedule,
        projector,
        curriculum,
        inference_projector,
        inference_curriculum,
        seed,
        ..defaults
    };
    cfg.validate()?;
    let outcome = match train(&ds, &cfg) {
        Ok(o) => o,
        Err(Error::Diverged { step, last_good }) => {
            let path = out.with_extension("last-good.ck");
            last_good.save(&path)?;
            eprintln!("training diverged at step {step}; last finite checkpoint written to {}", path.display());
            return Ok(EXIT_RUNTIME);
        }
        Err(e) => return Err(runtime(e)),
    };
    outcome.checkpoint.save(&out)?;
    let trace_path = out.with_extension("loss.csv");
    let header = format!("# {}\n", serde_json::to_string(&r.echo())?);
    let trace = header + &crate::diffusion::loss_trace_csv(&outcome.loss_trace);
    write_atomic(&trace_path, trace.as_bytes())?;
    println!(
        "trained {} steps, final loss {}; checkpoint {} and loss trace {}",
        steps,
        outcome.checkpoint.meta.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
        out.display(),
        trace_path.display()
    );
    Ok(EXIT_OK)
}

fn projector_override(
    name: Option<&str>,
    lambda: Option<f64>,
    delta: Option<f64>,
    policy: Option<Arc<CorrectionPolicy>>,
    ckpt: &Checkpoint,
) -> Result<ProjectorChoice> {
    let Some(name) = name else {
        return Ok(ProjectorChoice::Checkpoint);
    };
    let policy = policy.or_else(|| match ckpt.projector.as_ref().map(|p| &p.tag) {
        Some(ProjectorTag::PSA(p)) => Some(p.clone()),
        _ => None,
    });
    Ok(match ProjectorKind::by_name(name, lambda, delta, policy)? {
        Some(k) => ProjectorChoice::Use(k),
        None => ProjectorChoice::Off,
    })
}

fn cmd_sample(a: SampleArgs, r: &mut Resolver) -> Result<i32> {
    let ckpt_path: PathBuf = r.required("checkpoint", a.checkpoint)?;
    let out: PathBuf = r.required("out", a.out)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    if let Some(name) = r.opt::<String>("env", a.env)? {
        ckpt.check_env(&Env::by_name(&name)?.with_horizon(ckpt.env.horizon()))?;
    }
    let env = ckpt.env.clone();
    let seed: u64 = r.get("seed", a.seed, 0)?;
    let batch: usize = r.get("batch", a.batch, 8)?;
    let s0_text: Option<String> = r.opt("s0", a.s0)?;
    let n_states: usize = r.get("initial-states", a.initial_states, 1)?;
    let starts: Vec<State> = match s0_text {
        Some(t) => vec![parse_state(&t, &env)?],
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n_states).map(|_| env.sample_initial_state(&mut rng)).collect()
        }
    };
    if batch == 0 || starts.is_empty() {
        return Err(Error::Config("--batch and --initial-states must be positive".into()));
    }
    let projector: Option<String> = r.opt("projector", a.projector)?;
    let lambda: Option<f64> = r.opt("lambda-ref", a.lambda_ref)?;
    let delta: Option<f64> = r.opt("delta", a.delta)?;
    let policy = load_policy(r.opt::<PathBuf>("correction-policy", a.correction_policy)?.as_deref())?;
    let choice = projector_override(projector.as_deref(), lambda, delta, policy, &ckpt)?;
    preset(
        r,
        vec![
            ("curriculum", a.curriculum.map(Value::from)),
            ("sigma-min", a.sigma_min.map(Value::from)),
            ("sigma-max", a.sigma_max.map(Value::from)),
        ],
    );
    let curriculum = curriculum_from(r, ckpt.curriculum, "curriculum")?;
    let n_steps: Option<usize> = r.opt("N", a.n_steps)?;
    let select: Option<String> = r.opt("select", a.select)?;
    if let Some(m) = &select {
        select_best(&env, &[Trajectory::from_states(vec![vec![0.0; env.n_states()]; 2])], m)?;
    }
    let opts = SampleOptions {
        seed,
        projector: choice,
        curriculum: Some(curriculum),
        steps: n_steps,
        context: Vec::new(),
    };
    let all: Vec<State> = starts.iter().flat_map(|s| std::iter::repeat_n(s.clone(), batch)).collect();
    let out_batch = sample_from(&ckpt, &all, &opts).map_err(runtime)?;
    let mut lines = Vec::new();
    for (k, chunk) in out_batch.trajectories.chunks(batch).enumerate() {
        let picks: Vec<usize> = match &select {
            Some(m) => vec![select_best(&env, chunk, m)?],
            None => (0..chunk.len()).collect(),
        };
        for j in picks {
            let idx = k * batch + j;
            lines.push(SampleLine {
                index: lines.len(),
                initial_state_index: k,
                admissible_claim: out_batch.admissible_claim[idx],
                trajectory: out_batch.trajectories[idx].clone(),
            });
        }
    }
    let header = SampleHeader {
        env: env.name().to_string(),
        horizon: env.horizon(),
        modality: ckpt.modality().name().to_string(),
        projector: out_batch.projector.clone(),
        curriculum: out_batch.curriculum.clone(),
        sigmas: out_batch.sigmas.clone(),
        config: r.echo(),
    };
    write_sample_file(&out, &header, &lines)?;
    let claimed = lines.iter().filter(|l| l.admissible_claim).count();
    println!(
        "wrote {} trajectories to {} ({} claimed admissible)",
        lines.len(),
        out.display(),
        claimed
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ProjectedReport {
    index: usize,
    total_error: f64,
    max_hull_residual: f64,
    errors: Vec<f64>,
    hull_residuals: Vec<Option<f64>>,
    trajectory: Trajectory,
}

fn cmd_project(a: ProjectArgs, r: &mut Resolver) -> Result<i32> {
    let input: PathBuf = r.required("input", a.input)?;
    let name: String = r.get("projector", a.projector, "P".into())?;
    let lambda: Option<f64> = r.opt("lambda-ref", a.lambda_ref)?;
    let delta: Option<f64> = r.opt("delta", a.delta)?;
    let full: bool = r.get("full-state", a.full_state.then_some(true), false)?;
    let policy = load_policy(r.opt::<PathBuf>("correction-policy", a.correction_policy)?.as_deref())?;
    let out: Option<PathBuf> = r.opt("out", a.out)?;
    let kind = ProjectorKind::by_name(&name, lambda, delta, policy)?
        .ok_or_else(|| Error::Config("project needs a projector other than none".into()))?
        .with_reduction(!full);
    let loaded = load_trajectories(&input)?;
    if let Some(e) = r.opt::<String>("env", a.env)? {
        if e != loaded.env.name() {
            return Err(Error::Config(format!("input holds `{}`, not `{e}`", loaded.env.name())));
        }
    }
    let env = &loaded.env;
    let mut reports = Vec::with_capacity(loaded.trajectories.len());
    for (i, t) in loaded.trajectories.iter().enumerate() {
        let reference = matches!(kind.tag, ProjectorTag::PRef { .. }).then_some(t);
        let p = project_trajectory(env, t, &kind, reference, &mut |_| true)
            .map_err(|e| runtime(Error::Step { t: i, source: Box::new(e) }))?;
        reports.push(ProjectedReport {
            index: i,
            total_error: p.total_error(),
            max_hull_residual: p.hull_residuals.iter().flatten().cloned().fold(0.0, f64::max),
            errors: p.errors,
            hull_residuals: p.hull_residuals,
            trajectory: p.trajectory,
        });
    }
    let doc = json!({
        "header": { "env": env.name(), "horizon": env.horizon(), "input": loaded.kind, "projector": kind.name(), "config": r.echo() },
        "trajectories": reports,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    for rep in &reports {
        let steps: Vec<String> = rep
            .hull_residuals
            .iter()
            .zip(&rep.errors)
            .enumerate()
            .map(|(t, (h, e))| match h {
                Some(h) => format!("t{t}: e={e:.3e} res={h:.1e}"),
                None => format!("t{t}: e={e:.3e}"),
            })
            .collect();
        println!("trajectory {}: total error {:.4e}; {}", rep.index, rep.total_error, steps.join(", "));
    }
    if let Some(p) = out {
        write_atomic(&p, text.as_bytes())?;
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct VerifyEntry {
    index: usize,
    admissible_claim: bool,
    resimulates: Option<bool>,
    first_mismatch: Option<(usize, f64)>,
    mean_sae: f64,
    max_sae: f64,
    cae: f64,
    id_converged: bool,
    passed: bool,
}

fn cmd_verify(a: VerifyArgs, r: &mut Resolver) -> Result<i32> {
    let input: PathBuf = r.required("input", a.input)?;
    let method: String = r.get("id-method", a.id_method, "polytopic-then-blackbox".into())?;
    let eps: Option<f64> = r.opt("eps", a.eps)?;
    let seed: u64 = r.get("seed", a.seed, 0)?;
    let out: Option<PathBuf> = r.opt("out", a.out)?;
    let cfg = IdConfig {
        method: IdMethod::by_name(&method)?,
        eps,
        seed,
        ..IdConfig::default()
    };
    cfg.validate()?;
    let loaded = load_trajectories(&input)?;
    let env = &loaded.env;
    let mut entries = Vec::new();
    let mut failures = 0;
    for (i, (t, claim)) in loaded.trajectories.iter().zip(&loaded.claims).enumerate() {
        let mismatch = match &t.actions {
            Some(_) => Some(t.resimulation_mismatch(env)?),
            None => None,
        };
        let id = id_trajectory(env, t, &cfg).map_err(runtime)?;
        let resimulates = mismatch.map(|m| m.is_none());
        let passed = !*claim || resimulates == Some(true);
        if !passed {
            failures += 1;
        }
        entries.push(VerifyEntry {
            index: i,
            admissible_claim: *claim,
            resimulates,
            first_mismatch: mismatch.flatten(),
            mean_sae: id.mean_sae(),
            max_sae: id.max_sae(),
            cae: id.cae,
            id_converged: id.converged.iter().all(|c| *c),
            passed,
        });
    }
    let doc = json!({
        "header": { "env": env.name(), "horizon": env.horizon(), "input": loaded.kind, "config": r.echo() },
        "failures": failures,
        "trajectories": entries,
    });
    if let Some(p) = out {
        write_atomic(&p, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    }
    let claimed = loaded.claims.iter().filter(|c| **c).count();
    let mean_cae = entries.iter().map(|e| e.cae).sum::<f64>() / entries.len().max(1) as f64;
    println!(
        "{} trajectories, {} claimed admissible, {} failed their claim; mean CAE {:.3e}",
        entries.len(),
        claimed,
        failures,
        mean_cae
    );
    for e in entries.iter().filter(|e| !e.passed) {
        if let Some((step, dev)) = e.first_mismatch {
            eprintln!("trajectory {} claimed admissible but deviates at step {step} by {dev:e}", e.index);
        }
    }
    Ok(if failures > 0 { EXIT_VERIFY } else { EXIT_OK })
}

fn cmd_evaluate(a: EvaluateArgs, r: &mut Resolver) -> Result<i32> {
    let plan_path: PathBuf = r.required("plan", a.plan)?;
    let out: PathBuf = r.required("out", a.out)?;
    let seed: Option<u64> = r.opt("seed", a.seed)?;
    let mut plan: ExperimentPlan = serde_json::from_slice(&read_file(&plan_path)?)
        .map_err(|e| Error::Config(format!("plan {}: {e}", plan_path.display())))?;
    if let Some(s) = seed {
        plan.seeds = vec![s];
    }
    plan.resolve_paths(plan_path.parent().unwrap_or(Path::new(".")));
    plan.validate()?;
    let report = run_experiment(&plan)?;
    report.write(&out)?;
    for ag in &report.aggregates {
        println!("{} {} ({}, n={}): {:.4e} ± {:.4e}", ag.config, ag.metric, ag.subset, ag.n, ag.mean, ag.std);
    }
    Ok(EXIT_OK)
}

fn cmd_schedule(a: ScheduleArgs, r: &mut Resolver) -> Result<i32> {
    let d = NoiseSchedule::default();
    let n: usize = r.get("N", a.n_steps, d.steps)?;
    let s0: f64 = r.get("sigma-0", a.sigma_0, d.sigma_max)?;
    let sl: f64 = r.get("sigma-last", a.sigma_last, d.sigma_min)?;
    let rho: f64 = r.get("rho", a.rho, d.rho)?;
    preset(
        r,
        vec![
            ("curriculum", a.curriculum.map(Value::from)),
            ("sigma-min", a.sigma_min.map(Value::from)),
            ("sigma-max", a.sigma_max.map(Value::from)),
        ],
    );
    let curriculum = curriculum_from(r, Curriculum::mid(), "curriculum")?;
    let sigmas = schedule_sigmas(n, s0, sl, rho)?;
    println!("# {}", serde_json::to_string(&r.echo())?);
    println!("i,sigma,p_skip");
    for (i, s) in sigmas.iter().enumerate() {
        println!("{i},{s},{}", curriculum.skip_probability(*s));
    }
    Ok(EXIT_OK)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::UnknownName { .. } | Error::Config(_) => EXIT_USAGE,
        Error::Inadmissible { .. } => EXIT_VERIFY,
        _ => EXIT_RUNTIME,
    }
}

pub fn dispatch(cli: Cli) -> Result<i32> {
    let mut r = Resolver::new(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &mut r),
        Command::Train(a) => cmd_train(a, &mut r),
        Command::Sample(a) => cmd_sample(a, &mut r),
        Command::Project(a) => cmd_project(a, &mut r),
        Command::Verify(a) => cmd_verify(a, &mut r),
        Command::Evaluate(a) => cmd_evaluate(a, &mut r),
        Command::Schedule(a) => cmd_schedule(a, &mut r),
    }
}

/// Parse `argv`, run, and return the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
