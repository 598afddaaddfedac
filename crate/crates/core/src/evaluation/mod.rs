//! Batch experiments over model configs, initial states and seeds.

mod plan;
mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{sample, select_best, Checkpoint, ProjectorChoice, SampleOptions};
use crate::dynamics::{Env, State, Trajectory};
use crate::error::{Error, Result};
use crate::inverse_dynamics::id_trajectory;
use crate::io::write_atomic;
use crate::projection::{CorrectionPolicy, ProjectorKind, ProjectorTag};

pub use plan::{ExperimentPlan, ModelConfig, Scoring, METRIC_NAMES};
pub use svg::{ecdf, line_plot, Series};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub config: String,
    pub seed: u64,
    pub state_index: usize,
    pub sample_index: usize,
    /// Mean statewise error over the transitions.
    pub sae: Option<f64>,
    pub sae_max: Option<f64>,
    pub cae: Option<f64>,
    pub survival: Option<f64>,
    pub reward: Option<f64>,
    pub completion: Option<f64>,
    /// Every inverse-dynamics search reached its tolerance.
    pub id_converged: Option<bool>,
    pub admissible_claim: bool,
    pub resimulates: bool,
    /// Best of its initial state under the plan's selection metric.
    pub selected: bool,
    pub trajectory_file: String,
    pub trajectory_line: usize,
}

impl SampleRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "SAE" => self.sae,
            "CAE" => self.cae,
            "survival" => self.survival,
            "reward" => self.reward,
            "completion" => self.completion,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub config: String,
    pub metric: String,
    /// `all` or `selected`.
    pub subset: String,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub plan: ExperimentPlan,
    pub records: Vec<SampleRecord>,
    pub aggregates: Vec<Aggregate>,
    /// File name to trajectories, in line order.
    pub trajectories: BTreeMap<String, Vec<Trajectory>>,
    /// Per-step survival curve per config: fraction of samples still inside
    /// the constraint set at each time index.
    pub survival_curves: BTreeMap<String, Vec<f64>>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cell_seed(seed: u64, state_index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (state_index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// The `n` initial states of `seed`, shared by every config.
pub fn initial_states(env: &Env, seed: u64, n: usize) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| env.sample_initial_state(&mut rng)).collect()
}

fn projector_choice(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<ProjectorChoice> {
    let Some(name) = cfg.projector.as_deref() else {
        return Ok(ProjectorChoice::Checkpoint);
    };
    let policy = match &cfg.correction_policy {
        Some(p) => Some(Arc::new(CorrectionPolicy::load(p)?)),
        None => match ckpt.projector.as_ref().map(|p| &p.tag) {
            Some(ProjectorTag::PSA(p)) => Some(p.clone()),
            _ => None,
        },
    };
    Ok(match ProjectorKind::by_name(name, cfg.lambda_ref, cfg.delta, policy)? {
        Some(k) => ProjectorChoice::Use(k),
        None => ProjectorChoice::Off,
    })
}

fn load_checkpoint(cfg: &ModelConfig, env: &Env) -> Result<Checkpoint> {
    if !cfg.checkpoint.exists() {
        return Err(Error::Config(format!(
            "config `{}`: checkpoint {} does not exist",
            cfg.name,
            cfg.checkpoint.display()
        )));
    }
    let ckpt = Checkpoint::load(&cfg.checkpoint)?;
    ckpt.check_env(env)?;
    Ok(ckpt)
}

struct Cell {
    records: Vec<SampleRecord>,
    trajectories: Vec<Trajectory>,
    scored: Vec<Vec<State>>,
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<Report> {
    plan.validate()?;
    let env = plan.env()?;
    let mut models = Vec::with_capacity(plan.configs.len());
    for cfg in &plan.configs {
        let ckpt = load_checkpoint(cfg, &env)?;
        let choice = projector_choice(cfg, &ckpt)?;
        models.push((cfg, ckpt, choice, cfg.curriculum()?));
    }
    let starts: Vec<Vec<State>> = plan.seeds.iter().map(|s| initial_states(&env, *s, plan.n_initial_states)).collect();
    let cells: Vec<(usize, usize, usize)> = (0..models.len())
        .flat_map(|m| (0..plan.seeds.len()).flat_map(move |k| (0..plan.n_initial_states).map(move |i| (m, k, i))))
        .collect();
    let results: Vec<Cell> = cells
        .par_iter()
        .map(|&(m, k, i)| {
            let (cfg, ckpt, choice, curriculum) = &models[m];
            run_cell(plan, &env, cfg, ckpt, choice, *curriculum, plan.seeds[k], i, &starts[k][i])
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut trajectories: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    let mut survival_curves = BTreeMap::new();
    let mut alive: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for cell in results {
        for ((mut r, t), scored) in cell.records.into_iter().zip(cell.trajectories).zip(cell.scored) {
            let file = trajectories.entry(r.trajectory_file.clone()).or_default();
            r.trajectory_line = file.len();
            file.push(t);
            let steps = env.survival_steps(&scored);
            let entry = alive.entry(r.config.clone()).or_insert_with(|| (vec![0.0; scored.len()], 0));
            for v in entry.0.iter_mut().take(steps) {
                *v += 1.0;
            }
            entry.1 += 1;
            records.push(r);
        }
    }
    for (name, (counts, n)) in alive {
        survival_curves.insert(name, counts.into_iter().map(|c| c / n as f64).collect());
    }
    let aggregates = aggregate(plan, &records);
    Ok(Report {
        plan: plan.clone(),
        records,
        aggregates,
        trajectories,
        survival_curves,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    plan: &ExperimentPlan,
    env: &Env,
    cfg: &ModelConfig,
    ckpt: &Checkpoint,
    choice: &ProjectorChoice,
    curriculum: Option<crate::diffusion::Curriculum>,
    seed: u64,
    state_index: usize,
    s0: &[f64],
) -> Result<Cell> {
    let opts = SampleOptions {
        seed: cell_seed(seed, state_index),
        projector: choice.clone(),
        curriculum,
        ..SampleOptions::default()
    };
    let batch = sample(ckpt, s0, plan.samples_per_state, &opts)?;
    let needs_id = plan.wants("SAE") || plan.wants("CAE") || (plan.scoring == Scoring::Executed);
    let file = format!("trajectories/{}_seed{}.jsonl", sanitize(&cfg.name), seed);
    let mut records = Vec::with_capacity(batch.trajectories.len());
    let mut scored = Vec::with_capacity(batch.trajectories.len());
    for (j, traj) in batch.trajectories.iter().enumerate() {
        let id = if needs_id {
            match id_trajectory(env, traj, &plan.inverse_dynamics) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("{}: inverse dynamics failed on state {state_index} sample {j}: {e}", cfg.name);
                    None
                }
            }
        } else {
            None
        };
        let states = match plan.scoring {
            Scoring::Planned => traj.states.clone(),
            Scoring::Executed => {
                let actions = traj.actions.clone().or_else(|| id.as_ref().map(|r| r.actions.clone()));
                match actions {
                    Some(a) => env.rollout(s0, &a).map(|t| t.states).unwrap_or_else(|_| vec![vec![f64::NAN; env.n_states()]]),
                    None => vec![vec![f64::NAN; env.n_states()]],
                }
            }
        };
        let resimulates = traj.actions.is_some() && traj.is_exactly_admissible(env);
        records.push(SampleRecord {
            config: cfg.name.clone(),
            seed,
            state_index,
            sample_index: j,
            sae: plan.wants("SAE").then(|| id.as_ref().map_or(f64::NAN, |r| r.mean_sae())),
            sae_max: plan.wants("SAE").then(|| id.as_ref().map_or(f64::NAN, |r| r.max_sae())),
            cae: plan.wants("CAE").then(|| id.as_ref().map_or(f64::NAN, |r| r.cae)),
            survival: plan.wants("survival").then(|| env.survival_fraction(&states)),
            reward: plan.wants("reward").then(|| env.reward_proxy(&states)),
            completion: plan.wants("completion").then(|| env.task_completed(&states) as u8 as f64),
            id_converged: id.as_ref().map(|r| r.converged.iter().all(|c| *c)).or(needs_id.then_some(false)),
            admissible_claim: batch.admissible_claim[j],
            resimulates,
            selected: false,
            trajectory_file: file.clone(),
            trajectory_line: 0,
        });
        scored.push(states);
    }
    if let Some(metric) = &plan.selection {
        let candidates: Vec<Trajectory> = scored.iter().map(|s| Trajectory::from_states(s.clone())).collect();
        records[select_best(env, &candidates, metric)?].selected = true;
    }
    Ok(Cell {
        records,
        trajectories: batch.trajectories,
        scored,
    })
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn aggregate(plan: &ExperimentPlan, records: &[SampleRecord]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    let subsets: &[&str] = if plan.selection.is_some() { &["all", "selected"] } else { &["all"] };
    for cfg in &plan.configs {
        for metric in &plan.metrics {
            for subset in subsets {
                let values: Vec<f64> = records
                    .iter()
                    .filter(|r| r.config == cfg.name && (*subset == "all" || r.selected))
                    .filter_map(|r| r.metric(metric))
                    .collect();
                let (mean, std) = mean_std(&values);
                out.push(Aggregate {
                    config: cfg.name.clone(),
                    metric: metric.clone(),
                    subset: subset.to_string(),
                    n: values.len(),
                    mean,
                    std,
                });
            }
        }
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:e}"))
}

fn opt_bool(v: Option<bool>) -> String {
    v.map_or(String::new(), |b| b.to_string())
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    config: &'a str,
    seed: u64,
    state_index: usize,
    sample_index: usize,
    states: &'a [State],
    actions: Option<&'a Vec<Vec<f64>>>,
}

impl Report {
    pub fn aggregate(&self, config: &str, metric: &str, subset: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.config == config && a.metric == metric && a.subset == subset)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "config,seed,state_index,sample_index,sae,sae_max,cae,survival,reward,completion,id_converged,admissible_claim,resimulates,selected,trajectory_file,trajectory_line\n",
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.config,
                r.seed,
                r.state_index,
                r.sample_index,
                opt(r.sae),
                opt(r.sae_max),
                opt(r.cae),
                opt(r.survival),
                opt(r.reward),
                opt(r.completion),
                opt_bool(r.id_converged),
                r.admissible_claim,
                r.resimulates,
                r.selected,
                r.trajectory_file,
                r.trajectory_line
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("config,metric,subset,n,mean,std\n");
        for a in &self.aggregates {
            let _ = writeln!(out, "{},{},{},{},{:e},{:e}", a.config, a.metric, a.subset, a.n, a.mean, a.std);
        }
        out
    }

    fn trajectory_jsonl(&self, file: &str) -> Result<String> {
        let mut out = String::new();
        let rows = self.records.iter().filter(|r| r.trajectory_file == file);
        for (r, t) in rows.zip(&self.trajectories[file]) {
            out.push_str(&serde_json::to_string(&TrajectoryLine {
                config: &r.config,
                seed: r.seed,
                state_index: r.state_index,
                sample_index: r.sample_index,
                states: &t.states,
                actions: t.actions.as_ref(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    fn plots(&self) -> Vec<(String, String)> {
        let mut plots = Vec::new();
        for metric in ["SAE", "CAE"] {
            if !self.plan.wants(metric) {
                continue;
            }
            let series: Vec<Series> = self
                .plan
                .configs
                .iter()
                .map(|c| Series {
                    label: c.name.clone(),
                    points: ecdf(
                        &self
                            .records
                            .iter()
                            .filter(|r| r.config == c.name)
                            .filter_map(|r| r.metric(metric))
                            .collect::<Vec<_>>(),
                    ),
                })
                .collect();
            plots.push((
                format!("{}_cdf.svg", metric.to_lowercase()),
                line_plot(&format!("{metric} distribution"), metric, "fraction of samples", &series, true),
            ));
        }
        let series: Vec<Series> = self
            .plan
            .configs
            .iter()
            .filter_map(|c| {
                self.survival_curves.get(&c.name).map(|v| Series {
                    label: c.name.clone(),
                    points: v.iter().enumerate().map(|(t, a)| (t as f64, 1.0 - a)).collect(),
                })
            })
            .collect();
        plots.push((
            "violation_ratio.svg".to_string(),
            line_plot("Constraint violation ratio", "time step", "fraction violated", &series, false),
        ));
        plots
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "plan": self.plan,
            "aggregates": self.aggregates,
            "survival_curves": self.survival_curves,
        }))?)
    }

    /// Bundle layout: `plan.json`, `metrics.csv`, `summary.csv`,
    /// `summary.json`, `trajectories/*.jsonl` and `*.svg` plots.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("plan.json"), serde_json::to_string_pretty(&self.plan)?.as_bytes())?;
        write_atomic(&dir.join("metrics.csv"), self.metrics_csv().as_bytes())?;
        write_atomic(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write_atomic(&dir.join("summary.json"), self.summary_json()?.as_bytes())?;
        for file in self.trajectories.keys() {
            write_atomic(&dir.join(file), self.trajectory_jsonl(file)?.as_bytes())?;
        }
        for (name, svg) in self.plots() {
            write_atomic(&dir.join(name), svg.as_bytes())?;
        }
        Ok(())
    }
}
