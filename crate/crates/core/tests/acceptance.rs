//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass a criterion number to run only that one.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use qls_core::agent::dqn::{evaluate, evaluate_policy, td_target, DqnConfig, Trainer, UpdateMode};
use qls_core::agent::mlp::{argmax, Loss, Mlp, Sample};
use qls_core::agent::replay::ReplayEntry;
use qls_core::analysis::extract_decision_tree;
use qls_core::config::{Preset, RunConfig};
use qls_core::env::{sample_branch, EnvConfig, Environment, Sweeping};
use qls_core::levels::{boltzmann_populations, LevelTable, PopulationState, Temperature};
use qls_core::presets::*;
use qls_core::propagator::*;
use qls_core::pulses::*;
use qls_core::thermal::{bbr_propagate, bbr_rates};
use qls_core::workflow::{cmd_build_tm, load_environment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// 1. Resonant two-level carrier drive.
fn rabi_oscillation() -> Result<String, String> {
    let rabi = 2.0 * PI * 2.0e3;
    let h = InteractionHamiltonian {
        dim: 2,
        n_motional: 1,
        terms: vec![SparseTerm {
            row: 1,
            col: 0,
            amplitude: Complex64::new(0.5 * rabi, 0.0),
            frequency: 0.0,
        }],
    };
    let duration = 3.0 * 2.0 * PI / rabi;
    let coarse_steps = 1500;
    let ground = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
    let trace = |n: usize| -> Result<Vec<(f64, f64)>, String> {
        let mut out = Vec::new();
        // a hair above duration / n so rounding cannot add a step
        let step = duration / n as f64 * (1.0 + 1e-12);
        ok(propagate_traced(&h, &ground, duration, step, &mut |t, psi| {
            out.push((t, psi[0].norm_sqr()))
        }))?;
        Ok(out)
    };
    let coarse = trace(coarse_steps)?;
    let fine = trace(10 * coarse_steps)?;
    ensure(fine.len() == 10 * coarse.len(), || format!("{} fine vs {} coarse samples", fine.len(), coarse.len()))?;
    let mut vs_fine: f64 = 0.0;
    let mut vs_analytic: f64 = 0.0;
    for (i, &(t, p)) in coarse.iter().enumerate() {
        let (tf, pf) = fine[10 * i + 9];
        ensure((tf - t).abs() < 1e-12, || format!("time grids disagree at {t}"))?;
        vs_fine = vs_fine.max((p - pf).abs());
        vs_analytic = vs_analytic.max((p - (0.5 * rabi * t).cos().powi(2)).abs());
    }
    ensure(vs_fine <= 1e-6 && vs_analytic <= 1e-6, || {
        format!("max deviation {vs_fine:.2e} from the finer step, {vs_analytic:.2e} from cos^2")
    })?;
    Ok(format!(
        "{} steps, max deviation {vs_fine:.1e} from 10x finer, {vs_analytic:.1e} from cos^2",
        coarse_steps
    ))
}

// 2. Every compiled pulse of every preset conserves probability.
fn povm_conservation() -> Result<String, String> {
    let settings = PropagationSettings::default();
    let worst = |pairs: &[TransitionMatrixPair]| pairs.iter().map(|p| p.column_sum_error()).fold(0.0, f64::max);
    let mut parts = Vec::new();
    let mut failures = Vec::new();

    let toy = worst(&toy_actions());
    parts.push(format!("toy {toy:.0e}"));

    for j in [vec![1, 2], vec![2, 3]] {
        let m = ok(desk_model(&j, &TrapConfig::default(), &desk_merge_rule()))?;
        let t0 = Instant::now();
        let pairs = ok(compile_library(&m.library, &m.table, &settings))?;
        let secs = t0.elapsed().as_secs_f64();
        let e = worst(&pairs);
        parts.push(format!("desk {}-state {} pulses {e:.0e} in {secs:.0} s", m.table.len(), pairs.len()));
        if m.table.len() == 24 && secs >= 120.0 {
            failures.push(format!("24-state desk compile took {secs:.0} s"));
        }
        if e > 1e-6 {
            failures.push(format!("desk {:?} column error {e:.2e}", j));
        }
    }

    let table = ok(h3o_levels())?;
    let rabi = ok(h3o_rabi(&table))?;
    let lib = ok(build_pulse_library(&table, &rabi, &h3o_trap(), &MergeRule::default(), Sideband::Blue))?;
    let pairs = ok(compile_library(&lib, &table, &settings))?;
    let e = worst(&pairs);
    parts.push(format!("h3o {} pulses {e:.0e}", pairs.len()));
    if e > 1e-6 {
        failures.push(format!("h3o column error {e:.2e}"));
    }
    if toy > 1e-6 {
        failures.push(format!("toy column error {toy:.2e}"));
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(parts.join(", "))
}

// 3. Blue-sideband pi pulse on the calibration transition.
fn sideband_pi_pulse() -> Result<String, String> {
    let full = ok(h3o_levels())?;
    let rabi = ok(h3o_rabi(&full))?;
    let cal = *rabi
        .listed()
        .iter()
        .find(|e| e.calibration)
        .ok_or("no calibration row")?;
    let table = ok(LevelTable::new(vec![
        full.level(cal.initial).clone(),
        full.level(cal.final_).clone(),
    ]))?;
    let two = ok(RabiTable::new(
        vec![RabiEntry {
            initial: 0,
            final_: 1,
            rabi_rate: cal.rabi_rate,
            calibration: true,
        }],
        2,
        false,
    ))?;
    let trap = TrapConfig {
        lamb_dicke: 0.09,
        n_motional: 2,
        ..TrapConfig::default()
    };
    let lib = ok(build_pulse_library(&table, &two, &trap, &MergeRule::default(), Sideband::Blue))?;
    ensure(lib.len() == 1, || format!("{} pulses for one transition", lib.len()))?;
    let pulse = &lib.pulses[0];
    let d = ok(pi_pulse_duration(cal.rabi_rate, &trap))?;
    ensure((pulse.duration_s - d).abs() <= 1e-12 * d, || {
        format!("duration {} s, expected {d} s", pulse.duration_s)
    })?;
    let ev = ok(evolve_pulse(pulse, &lib, &table, &PropagationSettings::default()))?;
    // basis index = state * n_motional + n
    let transfer = ev.u[(trap.n_motional + 1, 0)].norm_sqr();
    ensure(transfer >= 0.99, || format!("transfer {transfer:.5}"))?;
    Ok(format!("transfer {transfer:.6} after {:.3} ms", d * 1e3))
}

// 4. Thermal relaxation reaches the Boltzmann distribution.
fn bbr_stationarity() -> Result<String, String> {
    let mut worst_l1: f64 = 0.0;
    let mut worst_col: f64 = 0.0;
    for temperature in [300.0, 1000.0] {
        let table = ok(desk_levels(&[1, 2, 3]))?;
        let einstein = ok(desk_einstein(&table))?;
        let gen = ok(bbr_rates(&einstein, &table, temperature))?;
        worst_col = worst_col.max(gen.max_column_sum_error());
        let target = ok(boltzmann_populations(&table, Temperature::Kelvin(temperature)))?;
        let rate = ok(gen.slowest_relaxation_rate(&target.p))?;
        ensure(rate.is_finite() && rate > 0.0, || format!("slowest rate {rate}"))?;
        for start in [PopulationState::pure(table.len(), 0), PopulationState::uniform(table.len())] {
            let end = ok(bbr_propagate(&start, &gen, 10.0 / rate))?;
            let l1: f64 = end.p.iter().zip(&target.p).map(|(a, b)| (a - b).abs()).sum();
            worst_l1 = worst_l1.max(l1);
        }
    }
    ensure(worst_col <= 1e-12 && worst_l1 < 1e-4, || {
        format!("column sums off by {worst_col:.1e}, L1 to Boltzmann {worst_l1:.2e}")
    })?;
    Ok(format!("L1 to Boltzmann {worst_l1:.1e}, column sums within {worst_col:.0e}"))
}

// 5. Analytic gradients against central differences.
fn gradient_check() -> Result<String, String> {
    let mut rng = seeded(5);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for trial in 0..20 {
        let n_hidden = 2 + trial % 2;
        let mut widths = vec![rng.gen_range(2..7)];
        for _ in 0..n_hidden {
            widths.push(rng.gen_range(3..9));
        }
        widths.push(rng.gen_range(2..5));
        let mlp = ok(Mlp::new(&widths, &mut rng))?;
        let states: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let batch: Vec<Sample> = states
            .iter()
            .map(|s| Sample {
                state: s,
                action: rng.gen_range(0..*widths.last().unwrap()),
                target: rng.gen_range(-3.0..3.0),
            })
            .collect();
        for loss in [Loss::SquaredL2, Loss::SmoothL1] {
            let (_, grad) = ok(mlp.loss_and_gradient(&batch, loss))?;
            for i in 0..grad.len() {
                let h = 1e-5;
                let mut plus = mlp.clone();
                plus.params_mut()[i] += h;
                let mut minus = mlp.clone();
                minus.params_mut()[i] -= h;
                let fd = (ok(plus.loss_and_gradient(&batch, loss))?.0 - ok(minus.loss_and_gradient(&batch, loss))?.0)
                    / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    ensure(worst <= 1e-4, || format!("worst relative gradient error {worst:.2e}"))?;
    Ok(format!("{checked} parameters, worst relative error {worst:.1e}"))
}

/// Random stochastic pulse pair: every column of A0 + A1 sums to one.
fn random_pair(n: usize, rng: &mut ChaCha8Rng, id: usize) -> TransitionMatrixPair {
    let mut a0 = DMatrix::zeros(n, n);
    let mut a1 = DMatrix::zeros(n, n);
    for j in 0..n {
        let w: Vec<f64> = (0..2 * n).map(|_| rng.gen::<f64>().powi(3)).collect();
        let s: f64 = w.iter().sum();
        for i in 0..n {
            a0[(i, j)] = w[i] / s;
            a1[(i, j)] = w[n + i] / s;
        }
    }
    TransitionMatrixPair { a0, a1, pulse_id: id }
}

fn random_state(n: usize, rng: &mut ChaCha8Rng) -> PopulationState {
    let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(2)).collect();
    let s: f64 = w.iter().sum();
    PopulationState::new(w.into_iter().map(|x| x / s).collect()).expect("normalized")
}

// 6. The branch-averaged target is the expectation of the sampled one.
fn qmdp_is_expected_mdp() -> Result<String, String> {
    let mut rng = seeded(6);
    let n = 5;
    let n_actions = 4;
    let actions: Vec<_> = (0..n_actions).map(|a| random_pair(n, &mut rng, a)).collect();
    let config = EnvConfig {
        purity_threshold: 0.1,
        overlap_penalty: 0.5,
        ..EnvConfig::default()
    };
    let env = ok(Environment::new(config, PopulationState::uniform(n), actions, vec![1e-3; n_actions], None))?;
    let online = ok(Mlp::new(&[n, 16, 16, n_actions], &mut rng))?;
    let target = ok(Mlp::new(&[n, 16, 16, n_actions], &mut rng))?;
    let samples = 10_000;
    let mut worst_sigma: f64 = 0.0;
    let mut outside = 0;
    for _ in 0..100 {
        let state = random_state(n, &mut rng);
        let action = rng.gen_range(0..n_actions);
        let branches = ok(env.step_branches(&state, action))?;
        let k_any = if branches[0].reachable { 0 } else { 1 };
        let qmdp = ok(td_target(
            &ok(ReplayEntry::from_branches(&state.p, action, &branches, k_any))?,
            &online,
            &target,
            UpdateMode::Qmdp,
        ))?;
        let mut per_outcome = [0.0; 2];
        for (k, b) in branches.iter().enumerate() {
            if b.reachable {
                let entry = ok(ReplayEntry::from_branches(&state.p, action, &branches, k))?;
                per_outcome[k] = ok(td_target(&entry, &online, &target, UpdateMode::Mdp))?;
            }
        }
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..samples {
            let y = per_outcome[sample_branch(&branches, &mut rng)];
            sum += y;
            sum_sq += y * y;
        }
        let mean = sum / samples as f64;
        let var = (sum_sq / samples as f64 - mean * mean).max(0.0);
        let sigma = (var / samples as f64).sqrt();
        let dev = (mean - qmdp).abs();
        if sigma == 0.0 {
            if dev > 1e-12 * (1.0 + qmdp.abs()) {
                outside += 1;
            }
        } else {
            worst_sigma = worst_sigma.max(dev / sigma);
            if dev > 3.0 * sigma {
                outside += 1;
            }
        }
    }
    ensure(outside == 0, || format!("{outside} of 100 pairs outside 3 sigma (worst {worst_sigma:.2})"))?;
    Ok(format!("100 pairs, worst deviation {worst_sigma:.2} sigma"))
}

/// Belief update computed directly from the matrices.
fn toy_branches(actions: &[TransitionMatrixPair], p: &[f64], a: usize) -> Vec<(f64, Vec<f64>, bool)> {
    let mut out = Vec::new();
    let pair = &actions[a];
    for m in [&pair.a0, &pair.a1] {
        let v: Vec<f64> = (0..p.len()).map(|i| (0..p.len()).map(|j| m[(i, j)] * p[j]).sum()).collect();
        let mass: f64 = v.iter().sum();
        if mass < 1e-12 {
            continue;
        }
        let next: Vec<f64> = v.iter().map(|x| x / mass).collect();
        let done = next.iter().cloned().fold(0.0, f64::max) >= 1.0 - toy_config().purity_threshold;
        out.push((mass, next, done));
    }
    out
}

fn key(p: &[f64], horizon: usize) -> (Vec<i64>, usize) {
    (p.iter().map(|x| (x * 1e12).round() as i64).collect(), horizon)
}

/// Minimal expected number of pulses with `horizon` pulses left, and the
/// optimal actions.
struct ValueIteration {
    actions: Vec<TransitionMatrixPair>,
    memo: HashMap<(Vec<i64>, usize), (f64, Vec<f64>)>,
}

impl ValueIteration {
    fn q(&mut self, p: &[f64], horizon: usize) -> Vec<f64> {
        if horizon == 0 {
            return vec![0.0; self.actions.len()];
        }
        let k = key(p, horizon);
        if let Some((_, q)) = self.memo.get(&k) {
            return q.clone();
        }
        let mut q = Vec::new();
        for a in 0..self.actions.len() {
            let mut v = 1.0;
            for (prob, next, done) in toy_branches(&self.actions, p, a) {
                if !done {
                    v += prob * self.value(&next, horizon - 1);
                }
            }
            q.push(v);
        }
        let best = q.iter().cloned().fold(f64::INFINITY, f64::min);
        self.memo.insert(k, (best, q.clone()));
        q
    }

    fn value(&mut self, p: &[f64], horizon: usize) -> f64 {
        self.q(p, horizon).into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Exact expected length of a state-feedback (or step-indexed) policy.
fn policy_length(
    actions: &[TransitionMatrixPair],
    policy: &dyn Fn(&[f64], usize) -> usize,
    p: &[f64],
    step: usize,
    max_steps: usize,
) -> f64 {
    if step == max_steps {
        return 0.0;
    }
    let a = policy(p, step);
    let mut v = 1.0;
    for (prob, next, done) in toy_branches(actions, p, a) {
        if !done {
            v += prob * policy_length(actions, policy, &next, step + 1, max_steps);
        }
    }
    v
}

fn toy_dqn() -> DqnConfig {
    DqnConfig {
        n_training: 400,
        hidden: vec![32, 32],
        batch_size: 32,
        learning_starts: 32,
        ..DqnConfig::default()
    }
}

// 7. Trained agent on the toy matches exhaustive value iteration.
fn toy_policy_optimality() -> Result<String, String> {
    let env = toy_environment();
    let actions = toy_actions();
    let max_steps = env.config.max_steps;
    let t0 = Instant::now();
    let mut trainer = ok(Trainer::new(toy_dqn(), 3, 2, 7))?;
    ok(trainer.train(&env, |_| Ok(())))?;
    let train_secs = t0.elapsed().as_secs_f64();
    ensure(train_secs < 300.0, || format!("training took {train_secs:.0} s"))?;
    let mlp = trainer.online.clone();
    let greedy = |p: &[f64]| argmax(&mlp.forward(p).expect("toy width"));

    let mut vi = ValueIteration {
        actions: actions.clone(),
        memo: HashMap::new(),
    };
    let optimum = vi.value(&TOY_INITIAL, max_steps);
    // walk the beliefs the greedy policy reaches with non-negligible probability
    let mut frontier = vec![(TOY_INITIAL.to_vec(), 1.0, 0usize)];
    let mut visited = 0;
    while let Some((p, mass, step)) = frontier.pop() {
        if step == max_steps || mass < 1e-6 {
            continue;
        }
        visited += 1;
        let q = vi.q(&p, max_steps - step);
        let best = q.iter().cloned().fold(f64::INFINITY, f64::min);
        let a = greedy(&p);
        ensure(q[a] <= best + 1e-9 * (1.0 + best), || {
            format!("greedy action {a} at {p:?} costs {:.6} vs optimal {best:.6}", q[a])
        })?;
        for (prob, next, done) in toy_branches(&actions, &p, a) {
            if !done {
                frontier.push((next, mass * prob, step + 1));
            }
        }
    }
    let exact = policy_length(&actions, &|p, _| greedy(p), &TOY_INITIAL, 0, max_steps);
    let eval = ok(evaluate(&mlp, &env, 10_000, 70))?;
    let mc = eval.mean_length();
    let rel = (mc - exact).abs() / exact;
    ensure((exact - optimum).abs() < 1e-9 && rel <= 0.05, || {
        format!("greedy exact {exact:.4}, optimum {optimum:.4}, Monte Carlo {mc:.4}")
    })?;
    Ok(format!(
        "optimal at {visited} beliefs, expected length {exact:.4}, Monte Carlo {mc:.4} ({:.1}%), trained in {train_secs:.1} s",
        100.0 * rel
    ))
}

// 8. Sweeping on the toy against the absorbing-chain expectation.
fn sweeping_baseline() -> Result<String, String> {
    let env = toy_environment();
    let actions = toy_actions();
    let max_steps = env.config.max_steps;
    let exact = policy_length(&actions, &|_, t| t % 2, &TOY_INITIAL, 0, max_steps);
    let eval = ok(evaluate_policy(&Sweeping { n_actions: 2 }, &env, 10_000, 8, false))?;
    let mc = eval.mean_length();
    let rel = (mc - exact).abs() / exact;
    ensure(rel <= 0.02, || format!("Monte Carlo {mc:.4} vs exact {exact:.4}"))?;
    Ok(format!("Monte Carlo {mc:.4} vs exact {exact:.4} ({:.2}%)", 100.0 * rel))
}

// 9. Bundled H3O+ tables.
fn h3o_ingestion() -> Result<String, String> {
    let table = ok(h3o_levels())?;
    let rabi = ok(h3o_rabi(&table))?;
    ensure(table.len() == 130, || format!("{} levels", table.len()))?;
    let i = table.find_key("1:1:+:1/2:1").ok_or("level (1, 1, +, 1/2, 1) missing")?;
    let e = table.energy_hz(i);
    ensure((e - 5.441e3).abs() < 0.5, || format!("energy {e} Hz"))?;
    let starred: Vec<_> = rabi.listed().iter().filter(|r| r.calibration).collect();
    ensure(starred.len() == 1, || format!("{} calibration rows", starred.len()))?;
    let omega = starred[0].rabi_rate / (2.0 * PI);
    ensure((omega - 2.0e3).abs() < 1e-9, || format!("calibration rate {omega} Hz"))?;
    for r in rabi.listed() {
        ok(check_selection_rules(table.label(r.initial), table.label(r.final_)))?;
    }
    Ok(format!("{} levels, {} Rabi rows, E = {e:.1} Hz", table.len(), rabi.listed().len()))
}

struct DeskRun {
    env: Environment,
    mlp: Mlp,
    rl_mean: f64,
    sweep_mean: f64,
}

fn desk_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::new(Preset::CahDesk, 1);
    cfg.out = dir.to_path_buf();
    cfg.j_values = Some(vec![1, 2]);
    cfg.dqn.n_training = 3000;
    cfg
}

/// Snapshot every `SNAPSHOT_EVERY` training episodes and keep the one with the
/// lowest greedy mean on a validation stream disjoint from the test seeds.
fn train_desk(cfg: &RunConfig) -> Result<(Environment, Mlp), String> {
    let (env, _) = ok(load_environment(cfg))?;
    let mut trainer = ok(Trainer::new(cfg.dqn.clone(), env.n_states(), env.n_actions(), cfg.seed))?;
    let mut best = (f64::INFINITY, trainer.online.clone());
    while trainer.episode < cfg.dqn.n_training {
        let stop = trainer.episode + SNAPSHOT_EVERY;
        ok(trainer.train_until(&env, stop, |_| Ok(())))?;
        let mean = ok(evaluate(&trainer.online, &env, VALIDATION_EPISODES, VALIDATION_SEED))?.mean_length();
        if mean < best.0 {
            best = (mean, trainer.online.clone());
        }
    }
    Ok((env, best.1))
}

const SNAPSHOT_EVERY: usize = 300;
const VALIDATION_EPISODES: usize = 200;
const VALIDATION_SEED: u64 = 999;
const TEST_SEED: u64 = 100;

static DESK: OnceLock<Result<DeskRun, String>> = OnceLock::new();

fn desk_run() -> &'static Result<DeskRun, String> {
    DESK.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = desk_config(dir.path());
        ok(cmd_build_tm(&cfg))?;
        let (env, mlp) = train_desk(&cfg)?;
        let rl_mean = ok(evaluate(&mlp, &env, 1000, TEST_SEED))?.mean_length();
        let sweep = Sweeping { n_actions: env.n_actions() };
        let sweep_mean = ok(evaluate_policy(&sweep, &env, 1000, TEST_SEED, false))?.mean_length();
        Ok(DeskRun {
            env,
            mlp,
            rl_mean,
            sweep_mean,
        })
    })
}

// 10. Learned policy beats sweeping; thermal radiation slows preparation.
fn relative_performance() -> Result<String, String> {
    let run = desk_run().as_ref().map_err(|e| e.clone())?;
    ensure(run.rl_mean <= run.sweep_mean, || {
        format!("learned {:.3} vs sweeping {:.3}", run.rl_mean, run.sweep_mean)
    })?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = desk_config(dir.path());
    ok(cmd_build_tm(&cfg))?;
    let mut means = Vec::new();
    for temperature in BBR_TEMPERATURES {
        cfg.env.bbr_enabled = true;
        cfg.env.bbr_temperature_k = temperature;
        let (env, mlp) = train_desk(&cfg)?;
        means.push(ok(evaluate(&mlp, &env, 1000, TEST_SEED))?.mean_length());
    }
    ensure(means[0] <= means[1], || {
        format!(
            "mean length {:.3} at {} K but {:.3} at {} K",
            means[0], BBR_TEMPERATURES[0], means[1], BBR_TEMPERATURES[1]
        )
    })?;
    Ok(format!(
        "learned {:.2} vs sweeping {:.2}; with BBR {:.2} at {} K, {:.2} at {} K",
        run.rl_mean, run.sweep_mean, means[0], BBR_TEMPERATURES[0], means[1], BBR_TEMPERATURES[1]
    ))
}

const BBR_TEMPERATURES: [f64; 2] = [0.0, 400.0];

// 11. Decision-tree mass and depth against greedy roll-outs.
fn tree_audit() -> Result<String, String> {
    let run = desk_run().as_ref().map_err(|e| e.clone())?;
    let t0 = Instant::now();
    let max_steps = run.env.config.max_steps;
    let tree = ok(extract_decision_tree(&run.mlp, &run.env, 1e-7, max_steps))?;
    let mass = tree.total_mass();
    let eval = ok(evaluate(&run.mlp, &run.env, 10_000, 111))?;
    let secs = t0.elapsed().as_secs_f64();
    let (depth, mc, se) = (tree.expected_depth(), eval.mean_length(), eval.std_error());
    ensure((mass - 1.0).abs() <= 1e-6, || format!("total mass {mass:.9}"))?;
    ensure((depth - mc).abs() <= 3.0 * se, || {
        format!("tree depth {depth:.4} vs Monte Carlo {mc:.4} +- {se:.4}")
    })?;
    ensure(secs < 120.0, || format!("audit took {secs:.0} s"))?;
    Ok(format!(
        "{} nodes, mass {mass:.9}, depth {depth:.3} vs Monte Carlo {mc:.3} +- {se:.3}, pruned {:.1e}",
        tree.nodes.len(),
        tree.pruned_mass
    ))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let only: Option<usize> = args.iter().find_map(|a| a.parse().ok());
    let criteria: [(&str, Duration, Check); 11] = [
        ("rabi oscillation", Duration::from_secs(10), rabi_oscillation),
        ("povm conservation", Duration::from_secs(1800), povm_conservation),
        ("sideband pi pulse", Duration::from_secs(10), sideband_pi_pulse),
        ("bbr stationarity", Duration::from_secs(10), bbr_stationarity),
        ("gradient check", Duration::from_secs(30), gradient_check),
        ("qmdp expected mdp", Duration::from_secs(60), qmdp_is_expected_mdp),
        ("toy policy optimality", Duration::from_secs(300), toy_policy_optimality),
        ("sweeping baseline", Duration::from_secs(60), sweeping_baseline),
        ("h3o ingestion", Duration::from_secs(5), h3o_ingestion),
        ("relative performance", Duration::from_secs(1800), relative_performance),
        ("decision tree audit", Duration::from_secs(1800), tree_audit),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.is_some_and(|n| n != number) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t0.elapsed();
        let result = match result {
            Ok(_) if elapsed > *limit => Err(format!("took {:.1} s, limit {} s", elapsed.as_secs_f64(), limit.as_secs())),
            r => r,
        };
        let (status, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {number:>2} {name:<22} {detail} [{:.1} s]", elapsed.as_secs_f64());
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
