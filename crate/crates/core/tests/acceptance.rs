//! End-to-end acceptance checks. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reachdiff::diffusion::*;
use reachdiff::dynamics::*;
use reachdiff::evaluation::{run_experiment, ExperimentPlan, ModelConfig, Scoring};
use reachdiff::inverse_dynamics::*;
use reachdiff::projection::*;
use reachdiff::reachability::reach_vertices;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn uniform_action(env: &Env, rng: &mut ChaCha8Rng) -> Action {
    let p = env.polytope();
    p.low.iter().zip(&p.high).map(|(l, h)| rng.random_range(*l..=*h)).collect()
}

fn di(h: usize) -> Env {
    Env::by_name("double-integrator").unwrap().with_horizon(h)
}

// 1. Action-backed projectors give exactly admissible samples.
fn exact_admissibility() -> Outcome {
    let env = di(32);
    let ds = generate_dataset(&env, Controller::LqrGoal, 64, 0).unwrap();
    let cfg = TrainConfig { steps: 300, seed: 1, ..Default::default() };
    let ckpt = train(&ds, &cfg).unwrap().checkpoint;
    let policy = train_correction_policy(&env, &ds, &CorrectionConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s0s: Vec<State> = (0..32).map(|_| env.sample_initial_state(&mut rng)).collect();
    let idc = IdConfig::default();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for kind in [ProjectorKind::p_a(), ProjectorKind::p_sa(Arc::new(policy))] {
        let opts = SampleOptions {
            seed: 7,
            projector: ProjectorChoice::Use(kind.clone()),
            curriculum: Some(Curriculum::mid()),
            ..Default::default()
        };
        let batch = sample_from(&ckpt, &s0s, &opts).unwrap();
        ensure(batch.trajectories.len() == 32, "wrong batch size")?;
        for (i, tr) in batch.trajectories.iter().enumerate() {
            ensure(batch.admissible_claim[i], format!("{}: sample {i} not claimed admissible", kind.name()))?;
            ensure(tr.is_exactly_admissible(&env), format!("{}: sample {i} does not resimulate", kind.name()))?;
            let rep = id_trajectory(&env, tr, &idc).unwrap();
            let sae = rep.sae.iter().cloned().fold(0.0, f64::max);
            worst = worst.max(sae).max(rep.cae);
        }
    }
    let elapsed = t.elapsed();
    ensure(worst == 0.0, format!("SAE/CAE max {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("64/64 resimulate bit-exactly, SAE = CAE = 0, {elapsed:.1?}"))
}

// 2. Reference projection with the mid curriculum cuts the median CAE tenfold.
fn reference_projection_cae() -> Outcome {
    let env = di(16);
    let ds = generate_dataset(&env, Controller::LqrGoal, 256, 0).unwrap();
    let cfg = TrainConfig { steps: 2000, seed: 1, ..Default::default() };
    let ckpt = train(&ds, &cfg).unwrap().checkpoint;
    let idc = IdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut off, mut on) = (vec![], vec![]);
    for seed in 0..32u64 {
        let s0 = env.sample_initial_state(&mut rng);
        let a = sample(&ckpt, &s0, 1, &SampleOptions { seed, projector: ProjectorChoice::Off, ..Default::default() })
            .unwrap();
        let b = sample(
            &ckpt,
            &s0,
            1,
            &SampleOptions {
                seed,
                projector: ProjectorChoice::Use(ProjectorKind::p_ref(1.0)),
                curriculum: Some(Curriculum::mid()),
                ..Default::default()
            },
        )
        .unwrap();
        off.push(id_trajectory(&env, &a.trajectories[0], &idc).unwrap().cae);
        on.push(id_trajectory(&env, &b.trajectories[0], &idc).unwrap().cae);
    }
    let (m_off, m_on) = (median(off), median(on));
    ensure(m_on <= 0.1 * m_off, format!("median CAE off {m_off:.3e}, Pref-mid {m_on:.3e}"))?;
    Ok(format!("median CAE off {m_off:.3e}, Pref-mid {m_on:.3e}"))
}

// 3. Projecting late in the chain beats projecting at the start on the slalom.
fn quadrotor_curriculum() -> Outcome {
    let env = Env::by_name("quadrotor-lite").unwrap();
    let ds = generate_dataset(&env, Controller::ScriptedSlalom, 512, 0).unwrap();
    let cfg = TrainConfig { steps: 8000, seed: 1, ..Default::default() };
    let ckpt = train(&ds, &cfg).unwrap().checkpoint;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s0s: Vec<State> = (0..100).map(|_| env.sample_initial_state(&mut rng)).collect();
    let rate = |c: Curriculum| {
        let opts = SampleOptions {
            seed: 3,
            projector: ProjectorChoice::Use(ProjectorKind::p_a()),
            curriculum: Some(c),
            ..Default::default()
        };
        let b = sample_from(&ckpt, &s0s, &opts).unwrap();
        b.trajectories.iter().filter(|t| env.task_completed(&t.states)).count() as f64 / 100.0
    };
    let (pre, mid, post) = (rate(Curriculum::pre()), rate(Curriculum::mid()), rate(Curriculum::post()));
    let msg = format!("completion pre {pre:.2}, mid {mid:.2}, post {post:.2}");
    ensure(mid - pre >= 0.2 && post - pre >= 0.2 && (mid - post).abs() <= 0.1, msg.clone())?;
    Ok(msg)
}

// 4. Curriculum probabilities and gate frequencies.
fn curriculum_values() -> Outcome {
    let c = Curriculum::mid();
    ensure(c.skip_probability(0.3) == 1.0, "p(0.3) != 1")?;
    ensure(c.skip_probability(0.001) == 0.0, "p(0.001) != 0")?;
    let sigma = 0.5 * (0.0021 + 0.2);
    let p = c.skip_probability(sigma);
    ensure((p - 0.5).abs() <= 1e-12, format!("p(mid) = {p}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for s in [0.01, 0.05, sigma, 0.15] {
        let p = c.skip_probability(s);
        let n = 10_000;
        let hits = curriculum_gate(&c, s, n, &mut rng).iter().filter(|g| !**g).count();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let z = (hits as f64 / n as f64 - p).abs() / se;
        worst = worst.max(z);
        ensure(z <= 3.0, format!("gate frequency at σ={s} off by {z:.2} SE"))?;
    }
    Ok(format!("p values exact, gate frequencies within {worst:.2} SE"))
}

// 5. Sampler arithmetic is exact.
fn sampler_exactness() -> Outcome {
    let sig = schedule_sigmas(5, 80.0, 0.002, 7.0).unwrap();
    ensure(sig.len() == 6, format!("ladder length {}", sig.len()))?;
    ensure(sig[0] == 80.0 && sig[4] == 0.002 && sig[5] == 0.0, format!("ladder {sig:?}"))?;
    let layout = Layout {
        modality: Modality::SA,
        n_states: 2,
        n_actions: 1,
        horizon: 8,
        condition_on_s0: true,
        context_dim: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = WindowMlp::new(layout, 2, 16, &mut rng);
    let batch = 3;
    let x = DMatrix::from_fn(layout.channels(), layout.tokens() * batch, |_, _| rng.random_range(-2.0..2.0));
    let cond = DMatrix::from_fn(layout.cond_dim(), batch, |_, _| rng.random_range(-1.0..1.0));
    let mut ulps = 0u64;
    for i in 0..5 {
        let (s, sn) = (sig[i], sig[i + 1]);
        let got = denoise_step(&net, &x, s, sn, &cond).unwrap();
        let d = net.denoise(&x, &vec![s; batch], &cond);
        for ((g, xi), di) in got.iter().zip(x.iter()).zip(d.iter()) {
            let want = if sn == 0.0 { *di } else { (sn / s) * xi + (1.0 - sn / s) * di };
            let u = (g.to_bits() as i64 - want.to_bits() as i64).unsigned_abs();
            ulps = ulps.max(u);
        }
    }
    ensure(ulps <= 1, format!("step differs by {ulps} ulp"))?;
    let x0 = DMatrix::from_fn(layout.channels(), layout.tokens() * batch, |_, _| 80.0 * rng.random_range(-1.0..1.0));
    let mut before_last = None;
    let out = run_sampler(&net, &sig, x0, &cond, &mut |i, x| {
        if i == sig.len() - 3 {
            before_last = Some(x.clone());
        }
        Ok(())
    })
    .unwrap();
    let last = net.denoise(&before_last.unwrap(), &vec![sig[4]; batch], &cond);
    ensure(out == last, "final sample is not the last denoiser output")?;
    Ok(format!("ladder endpoints exact, step within {ulps} ulp, final = D(x_(N-1))"))
}

// 6. Inverse dynamics.
fn inverse_dynamics_accuracy() -> Outcome {
    let idc = IdConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut planted = 0.0f64;
    for name in ENV_NAMES {
        let env = Env::by_name(name).unwrap();
        if !env.spec().linear {
            continue;
        }
        for _ in 0..200 {
            let s = env.sample_initial_state(&mut rng);
            let a = uniform_action(&env, &mut rng);
            let target = env.step(&s, &a).unwrap();
            planted = planted.max(inverse_dynamics(&env, &s, &target, &idc).unwrap().residual);
        }
    }
    ensure(planted < 1e-10, format!("planted residual {planted:e}"))?;

    let mut worst_ratio = 0.0f64;
    for name in ENV_NAMES {
        let env = Env::by_name(name).unwrap();
        if env.n_actions() != 1 {
            continue;
        }
        let p = env.polytope();
        let (lo, hi) = (p.low[0], p.high[0]);
        for _ in 0..20 {
            let s = env.sample_initial_state(&mut rng);
            let a = uniform_action(&env, &mut rng);
            let mut target = env.step(&s, &a).unwrap();
            for v in target.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
            let n = 100_000;
            let brute = (0..n)
                .map(|k| {
                    let u = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                    dist(&env.step(&s, &[u]).unwrap(), &target)
                })
                .fold(f64::INFINITY, f64::min);
            let got = inverse_dynamics(&env, &s, &target, &idc).unwrap().residual;
            ensure(got <= 1.05 * brute + 1e-12, format!("{name}: {got:e} vs grid {brute:e}"))?;
            worst_ratio = worst_ratio.max(got / brute);
        }
    }

    let tight = IdConfig { eps: Some(1e-10), ..IdConfig::default() };
    let mut sae = 0.0f64;
    let mut per_env = Vec::new();
    for (name, controller) in [
        ("double-integrator", Controller::LqrGoal),
        ("unicycle", Controller::PdWaypoints),
        ("quadrotor-lite", Controller::ScriptedSlalom),
    ] {
        let env = Env::by_name(name).unwrap();
        let ds = generate_dataset(&env, controller, 16, 2).unwrap();
        let mut env_sae = 0.0f64;
        for tr in &ds.trajectories {
            // Without stored actions, so ID cannot start from the answer.
            let bare = Trajectory::from_states(tr.states.clone());
            let rep = id_trajectory(&env, &bare, &tight).unwrap();
            env_sae = rep.sae.iter().cloned().fold(env_sae, f64::max);
        }
        per_env.push(format!("{name} {env_sae:.1e}"));
        sae = sae.max(env_sae);
    }
    ensure(sae < 1e-8, format!("dataset SAE {}", per_env.join(", ")))?;
    Ok(format!(
        "planted residual {planted:.1e}, worst ratio to grid {worst_ratio:.4}, dataset SAE {}",
        per_env.join(", ")
    ))
}

// 7. Action-guided hull actions reproduce the projected state on linear dynamics.
fn hull_action_exactness() -> Outcome {
    let env = di(8);
    let kind = ProjectorKind::p().with_action_guidance(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = env.sample_initial_state(&mut rng);
        let a = uniform_action(&env, &mut rng);
        let mut s_tilde = env.step(&s, &uniform_action(&env, &mut rng)).unwrap();
        for v in s_tilde.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let out = project_state(&env, &s, &s_tilde, &kind, None, Some(&a)).unwrap();
        let action = out.action.ok_or("no action recovered")?;
        worst = worst.max(dist(&env.step(&s, &action).unwrap(), &out.state));
    }
    ensure(worst <= 1e-9, format!("resimulation gap {worst:e}"))?;
    Ok(format!("1000 instances, max resimulation gap {worst:.1e}"))
}

// 8. Hull membership and the benefit of skipping a projection.
fn hull_and_partial_projection() -> Outcome {
    let env = di(6);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut membership = 0.0f64;
    for _ in 0..100 {
        let s0 = env.sample_initial_state(&mut rng);
        let mut states = vec![s0];
        for _ in 0..env.horizon() {
            let prev = states.last().unwrap();
            states.push(prev.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect());
        }
        let pred = Trajectory::from_states(states);
        let out = project_trajectory(&env, &pred, &ProjectorKind::p(), None, &mut |_| true).unwrap();
        for t in 0..env.horizon() {
            ensure(out.hull_residuals[t].is_some(), "missing simplex solve")?;
            let reach = reach_vertices(&env, &out.trajectory.states[t], &env.polytope()).unwrap();
            let sol = project_to_hull(&out.trajectory.states[t + 1], &reach.vertex_successors).unwrap();
            membership = membership.max(sol.residual);
        }
    }
    ensure(membership < 1e-8, format!("hull membership residual {membership:e}"))?;

    // Admissible except for a jump into s̃_4, from which s̃_5 is reachable again.
    let env = di(5);
    let s0 = vec![0.0, 0.0];
    let mut states = vec![s0];
    for _ in 0..3 {
        states.push(env.step(states.last().unwrap(), &[0.5]).unwrap());
    }
    let mut jumped = states[3].clone();
    jumped[0] += 0.3;
    let after = env.step(&jumped, &[0.5]).unwrap();
    states.push(jumped);
    states.push(after);
    let pred = Trajectory::from_states(states);
    let full = project_trajectory(&env, &pred, &ProjectorKind::p(), None, &mut |_| true).unwrap();
    let skip = project_trajectory(&env, &pred, &ProjectorKind::p(), None, &mut |t| t != 3).unwrap();
    let (ef, es) = (full.total_error(), skip.total_error());
    ensure(es < ef, format!("skipping gives {es:e}, full {ef:e}"))?;
    Ok(format!(
        "membership residual {membership:.1e}; Σe full {ef:.4}, skip step 4 {es:.4}"
    ))
}

// 9. Byte-identical artifacts.
fn determinism() -> Outcome {
    let env = di(8);
    let d1 = generate_dataset(&env, Controller::LqrGoal, 32, 3).unwrap();
    let d2 = generate_dataset(&env, Controller::LqrGoal, 32, 3).unwrap();
    ensure(d1.to_bytes() == d2.to_bytes(), "datasets differ")?;
    let cfg = TrainConfig {
        steps: 60,
        batch: 16,
        width: 24,
        projector: Some(ProjectorKind::p()),
        inference_projector: Some(ProjectorKind::p()),
        curriculum: Curriculum::mid(),
        seed: 2,
        ..Default::default()
    };
    let c1 = train(&d1, &cfg).unwrap().checkpoint;
    let c2 = train(&d2, &cfg).unwrap().checkpoint;
    ensure(c1.to_bytes() == c2.to_bytes(), "checkpoints differ")?;

    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("di.ck");
    c1.save(&ck).unwrap();
    let plan = ExperimentPlan {
        env: "double-integrator".into(),
        horizon: Some(8),
        configs: vec![
            ModelConfig::new("off", &ck).with_projector("none"),
            ModelConfig::new("P-mid", &ck).with_projector("P").with_curriculum("mid"),
            ModelConfig::new("PA", &ck).with_projector("PA").with_curriculum("post"),
        ],
        n_initial_states: 3,
        samples_per_state: 2,
        metrics: ["SAE", "CAE", "survival", "reward"].map(String::from).to_vec(),
        seeds: vec![0, 1],
        selection: Some("reward".into()),
        scoring: Scoring::Planned,
        inverse_dynamics: IdConfig::default(),
    };
    run_experiment(&plan).unwrap().write(&tmp.path().join("a")).unwrap();
    run_experiment(&plan).unwrap().write(&tmp.path().join("b")).unwrap();
    let (fa, fb) = (read_tree(&tmp.path().join("a")), read_tree(&tmp.path().join("b")));
    ensure(!fa.is_empty() && fa == fb, "reports differ")?;
    Ok(format!("dataset, checkpoint and {} report files byte-identical", fa.len()))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((name, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 exact admissibility of PA/PSA samples", exact_admissibility),
        ("2 Pref-mid median CAE", reference_projection_cae),
        ("3 quadrotor curriculum ordering", quadrotor_curriculum),
        ("4 curriculum schedule", curriculum_values),
        ("5 sampler exactness", sampler_exactness),
        ("6 inverse dynamics", inverse_dynamics_accuracy),
        ("7 hull action resimulation", hull_action_exactness),
        ("8 hull membership and partial projection", hull_and_partial_projection),
        ("9 determinism", determinism),
    ];
    // Optional criterion numbers select a subset; other arguments are ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, f)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} ({:.1?})", t.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} ({:.1?})", t.elapsed());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
