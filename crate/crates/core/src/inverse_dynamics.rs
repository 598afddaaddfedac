//! Ground-truth inverse dynamics and admissibility metrics.
//!
//! `ID(s, s̃)` searches the admissible action set for the action whose
//! successor is closest to `s̃`. It is a verification tool: the statewise
//! error `SAE = ‖s̃_{t+1} − f(s_t, ID(s_t, s̃_{t+1}))‖` and the cumulative
//! error over the re-based chain both rest on it.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, Env, State, Trajectory};
use crate::error::{Error, Result};
use crate::linalg;
use crate::projection::project_to_hull;
use crate::reachability::shrink_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdMethod {
    Polytopic,
    Blackbox,
    PolytopicThenBlackbox,
    AnalyticLinear,
}

pub const ID_METHOD_NAMES: &[&str] = &["polytopic", "blackbox", "polytopic-then-blackbox", "analytic-linear"];

impl IdMethod {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "polytopic" => Ok(IdMethod::Polytopic),
            "blackbox" => Ok(IdMethod::Blackbox),
            "polytopic-then-blackbox" => Ok(IdMethod::PolytopicThenBlackbox),
            "analytic-linear" => Ok(IdMethod::AnalyticLinear),
            other => Err(Error::unknown("inverse-dynamics method", other, ID_METHOD_NAMES)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdConfig {
    pub method: IdMethod,
    /// Residual tolerance; `None` picks 1e-9 on linear envs, 1e-7 otherwise.
    pub eps: Option<f64>,
    pub polytopic_iters: usize,
    pub blackbox_iters: usize,
    /// Per-iteration shrink of the polytopic search box.
    pub delta: f64,
    pub seed: u64,
}

impl Default for IdConfig {
    fn default() -> Self {
        Self {
            method: IdMethod::PolytopicThenBlackbox,
            eps: None,
            polytopic_iters: 50,
            blackbox_iters: 500,
            delta: 0.5,
            seed: 0,
        }
    }
}

impl IdConfig {
    pub fn with_method(method: IdMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn tolerance(&self, env: &Env) -> f64 {
        self.eps
            .unwrap_or(if env.spec().linear { 1e-9 } else { 1e-7 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_some_and(|e| !(e > 0.0)) {
            return Err(Error::Config("inverse-dynamics tolerance must be positive".into()));
        }
        if self.polytopic_iters == 0 || self.blackbox_iters == 0 {
            return Err(Error::Config("inverse-dynamics iteration caps must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("shrink factor must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdResult {
    pub action: Action,
    pub successor: State,
    /// `‖s̃ − f(s, action)‖`, recomputed from the returned action.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Search<'a> {
    env: &'a Env,
    s: &'a [f64],
    target: &'a [f64],
    evals: usize,
}

impl Search<'_> {
    fn eval(&mut self, a: &[f64]) -> Result<(State, f64)> {
        self.evals += 1;
        let next = self.env.step(self.s, a)?;
        let r = linalg::dist(self.target, &next);
        Ok((next, r))
    }
}

fn polytopic(search: &mut Search, start: Action, iters: usize, delta: f64, eps: f64) -> Result<(Action, f64, usize)> {
    let full = search.env.polytope();
    let mut a = start;
    let (_, mut r) = search.eval(&a)?;
    let mut n = 0;
    let mut factor: f64 = 1.0;
    while n < iters && r > eps {
        let (shrunk, _) = shrink_unchecked(&full, &a, factor.min(1.0 - 1e-12));
        let succ = shrunk
            .vertices
            .iter()
            .map(|v| search.eval(v).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?;
        let sol = project_to_hull(search.target, &succ)?;
        let candidate = search.env.clamp_action(&linalg::combine(&sol.lambda, &shrunk.vertices)).0;
        let (_, rc) = search.eval(&candidate)?;
        if rc <= r {
            a = candidate;
            r = rc;
        }
        factor *= delta;
        n += 1;
    }
    Ok((a, r, n))
}

fn sensitivities(search: &mut Search) -> Result<Vec<f64>> {
    let spec = search.env.spec();
    let centre: Vec<f64> = spec
        .action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(l, h)| 0.5 * (l + h))
        .collect();
    (0..spec.n_actions)
        .map(|j| {
            let half = 0.5 * (spec.action_high[j] - spec.action_low[j]);
            if half <= 0.0 {
                return Ok(f64::INFINITY);
            }
            let mut hi = centre.clone();
            let mut lo = centre.clone();
            hi[j] = spec.action_high[j];
            lo[j] = spec.action_low[j];
            let (sh, _) = search.eval(&hi)?;
            let (sl, _) = search.eval(&lo)?;
            Ok((linalg::dist(&sh, &sl) / (2.0 * half)).max(1e-12))
        })
        .collect()
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn blackbox<R: Rng>(
    search: &mut Search,
    start: Action,
    iters: usize,
    eps: f64,
    rng: &mut R,
) -> Result<(Action, f64, usize)> {
    let sens = sensitivities(search)?;
    let mut a = start;
    let (_, mut r) = search.eval(&a)?;
    let mut n = 0;
    while n < iters && r > eps {
        n += 1;
        let step: Vec<f64> = sens
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * r / s * z
            })
            .collect();
        let moved = |alpha: f64| -> Action {
            let raw: Vec<f64> = a.iter().zip(&step).map(|(x, d)| x + alpha * d).collect();
            search.env.clamp_action(&raw).0
        };
        let (_, r1) = search.eval(&moved(1.0))?;
        if r1 >= r {
            continue;
        }
        let (mut lo, mut hi) = (0.0_f64, 4.0_f64);
        let mut x1 = hi - GOLDEN * (hi - lo);
        let mut x2 = lo + GOLDEN * (hi - lo);
        let mut f1 = search.eval(&moved(x1))?.1;
        let mut f2 = search.eval(&moved(x2))?.1;
        for _ in 0..40 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - GOLDEN * (hi - lo);
                f1 = search.eval(&moved(x1))?.1;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + GOLDEN * (hi - lo);
                f2 = search.eval(&moved(x2))?.1;
            }
        }
        let mut best = (1.0, r1);
        for (alpha, f) in [(x1, f1), (x2, f2)] {
            if f < best.1 {
                best = (alpha, f);
            }
        }
        a = moved(best.0);
        r = best.1;
    }
    Ok((a, r, n))
}

fn analytic_linear(search: &mut Search) -> Result<(Action, usize)> {
    let env = search.env;
    if !env.spec().linear {
        return Err(Error::Config(format!(
            "analytic-linear inverse dynamics needs a linear env, `{}` is not",
            env.name()
        )));
    }
    let spec = env.spec();
    let centre: Vec<f64> = spec
        .action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(l, h)| 0.5 * (l + h))
        .collect();
    let (base, _) = search.eval(&centre)?;
    let n = env.n_states();
    let m = env.n_actions();
    let mut b = DMatrix::zeros(n, m);
    for j in 0..m {
        let h = 0.5 * (spec.action_high[j] - spec.action_low[j]);
        let mut probe = centre.clone();
        probe[j] += h;
        let (s, _) = search.eval(&probe)?;
        for i in 0..n {
            b[(i, j)] = (s[i] - base[i]) / h;
        }
    }
    let rhs = DVector::from_fn(n, |i, _| search.target[i] - base[i]);
    let svd = b.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max();
    let da = svd.solve(&rhs, tol).expect("SVD computed with both factors");
    let raw: Vec<f64> = centre.iter().zip(da.iter()).map(|(c, d)| c + d).collect();
    Ok((env.clamp_action(&raw).0, m + 1))
}

fn check(env: &Env, s: &[f64], target: &[f64]) -> Result<()> {
    if s.len() != env.n_states() || target.len() != env.n_states() {
        return Err(Error::Mismatch("inverse-dynamics states differ from env dimension".into()));
    }
    if !linalg::all_finite(s) || !linalg::all_finite(target) {
        return Err(Error::InvalidInput("non-finite inverse-dynamics input".into()));
    }
    Ok(())
}

/// Recover the action best explaining `s → s̃`. `guess` replaces the
/// default starting point (polytope mean, or a uniform draw for black-box).
pub fn inverse_dynamics_from(
    env: &Env,
    s: &[f64],
    target: &[f64],
    guess: Option<&[f64]>,
    cfg: &IdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<IdResult> {
    cfg.validate()?;
    check(env, s, target)?;
    let eps = cfg.tolerance(env);
    let mut search = Search {
        env,
        s,
        target,
        evals: 0,
    };
    let start = |rng: &mut ChaCha8Rng, uniform: bool| -> Action {
        match guess {
            Some(g) => env.clamp_action(g).0,
            None if uniform => {
                let spec = env.spec();
                spec.action_low
                    .iter()
                    .zip(&spec.action_high)
                    .map(|(&l, &h)| if h > l { rng.random_range(l..=h) } else { l })
                    .collect()
            }
            None => env.polytope().mean(),
        }
    };
    let (action, iterations) = match cfg.method {
        IdMethod::Polytopic => {
            let (a, _, n) = polytopic(&mut search, start(rng, false), cfg.polytopic_iters, cfg.delta, eps)?;
            (a, n)
        }
        IdMethod::Blackbox => {
            let (a, _, n) = blackbox(&mut search, start(rng, true), cfg.blackbox_iters, eps, rng)?;
            (a, n)
        }
        IdMethod::PolytopicThenBlackbox => {
            let (a, r, n1) = polytopic(&mut search, start(rng, false), cfg.polytopic_iters, cfg.delta, eps)?;
            if r <= eps {
                (a, n1)
            } else {
                let (a, _, n2) = blackbox(&mut search, a, cfg.blackbox_iters, eps, rng)?;
                (a, n1 + n2)
            }
        }
        IdMethod::AnalyticLinear => analytic_linear(&mut search)?,
    };
    let successor = env.step(s, &action)?;
    let residual = linalg::dist(target, &successor);
    Ok(IdResult {
        action,
        successor,
        residual,
        iterations,
        converged: residual <= eps,
    })
}

pub fn inverse_dynamics(env: &Env, s: &[f64], target: &[f64], cfg: &IdConfig) -> Result<IdResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    inverse_dynamics_from(env, s, target, None, cfg, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// Statewise error of each predicted transition `s̃_t → s̃_{t+1}`.
    pub sae: Vec<f64>,
    /// `‖s̃_{t+1} − s_{t+1}‖` along the re-based admissible chain.
    pub chain_errors: Vec<f64>,
    /// Norm of the stacked chain errors.
    pub cae: f64,
    /// Actions driving the re-based chain.
    pub actions: Vec<Action>,
    /// Closest admissible trajectory found.
    pub admissible_states: Vec<State>,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub tolerance: f64,
}

impl AdmissibilityReport {
    pub fn mean_sae(&self) -> f64 {
        if self.sae.is_empty() {
            return 0.0;
        }
        self.sae.iter().sum::<f64>() / self.sae.len() as f64
    }

    pub fn max_sae(&self) -> f64 {
        self.sae.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Re-based inverse dynamics over a whole trajectory. Stored actions, when
/// present, seed each search; a seed reproducing the transition exactly
/// gives a zero error without any search.
pub fn id_trajectory(env: &Env, traj: &Trajectory, cfg: &IdConfig) -> Result<AdmissibilityReport> {
    cfg.validate()?;
    traj.check_shape(env)?;
    let h = traj.horizon();
    let mut chain = vec![traj.states[0].clone()];
    let mut report = AdmissibilityReport {
        sae: Vec::with_capacity(h),
        chain_errors: Vec::with_capacity(h),
        cae: 0.0,
        actions: Vec::with_capacity(h),
        admissible_states: Vec::new(),
        iterations: Vec::with_capacity(h),
        converged: Vec::with_capacity(h),
        tolerance: cfg.tolerance(env),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for t in 0..h {
        rng.set_stream(t as u64);
        let guess = traj.actions.as_ref().map(|a| a[t].as_slice());
        let target = &traj.states[t + 1];
        let local = inverse_dynamics_from(env, &traj.states[t], target, guess, cfg, &mut rng)
            .map_err(|e| Error::Step { t, source: Box::new(e) })?;
        let rebased = if chain[t] == traj.states[t] {
            local.clone()
        } else {
            inverse_dynamics_from(env, &chain[t], target, guess, cfg, &mut rng)
                .map_err(|e| Error::Step { t, source: Box::new(e) })?
        };
        report.sae.push(local.residual);
        report.chain_errors.push(rebased.residual);
        report.iterations.push(rebased.iterations);
        report.converged.push(rebased.converged);
        report.actions.push(rebased.action);
        chain.push(rebased.successor);
    }
    report.cae = linalg::norm(&report.chain_errors);
    report.admissible_states = chain;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_action_recovered_on_linear_env() {
        let env = Env::by_name("double-integrator").unwrap();
        let s = [0.3, -0.4];
        let target = env.step(&s, &[0.37]).unwrap();
        for method in [IdMethod::Polytopic, IdMethod::PolytopicThenBlackbox, IdMethod::AnalyticLinear] {
            let r = inverse_dynamics(&env, &s, &target, &IdConfig::with_method(method)).unwrap();
            assert!(r.residual < 1e-10, "{method:?}: {}", r.residual);
            assert!((r.action[0] - 0.37).abs() < 1e-8);
        }
    }

    #[test]
    fn blackbox_recovers_planted_action() {
        let env = Env::unicycle();
        let s = [0.0, 0.0, 0.2, 0.5, 0.1];
        let target = env.step(&s, &[0.3, -0.6]).unwrap();
        let r = inverse_dynamics(&env, &s, &target, &IdConfig::with_method(IdMethod::Blackbox)).unwrap();
        assert!(r.residual < 1e-7, "{}", r.residual);
    }

    #[test]
    fn fixed_point_gives_zero_action() {
        let env = Env::by_name("double-integrator").unwrap();
        let s = [0.5, 0.0];
        let r = inverse_dynamics(&env, &s, &s, &IdConfig::default()).unwrap();
        assert!(r.action[0].abs() < 1e-9);
    }

    #[test]
    fn analytic_rejects_nonlinear_env() {
        let env = Env::unicycle();
        let s = env.spec().initial_high.clone();
        let cfg = IdConfig::with_method(IdMethod::AnalyticLinear);
        assert!(matches!(inverse_dynamics(&env, &s, &s, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn known_actions_give_exact_zero_report() {
        let env = Env::by_name("double-integrator").unwrap().with_horizon(5);
        let actions = vec![vec![0.5], vec![-1.0], vec![0.25], vec![1.0], vec![0.0]];
        let traj = env.rollout(&[0.1, 0.2], &actions).unwrap();
        let rep = id_trajectory(&env, &traj, &IdConfig::default()).unwrap();
        assert!(rep.sae.iter().all(|&e| e == 0.0));
        assert_eq!(rep.cae, 0.0);
    }
}
