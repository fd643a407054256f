//! Measurement-driven state preparation as a Markov decision process.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::{boltzmann_populations, LevelTable, PopulationState, Temperature};
use crate::propagator::TransitionMatrixPair;
use crate::pulses::PulseLibrary;
use crate::thermal::BbrGenerator;

/// Branches below this probability are never sampled.
pub const UNREACHABLE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub purity_threshold: f64,
    pub step_reward: f64,
    pub overlap_penalty: f64,
    /// Defaults to 1 - 1/N when absent.
    pub overlap_threshold: Option<f64>,
    pub bbr_enabled: bool,
    pub bbr_temperature_k: f64,
    /// Measurement and cooling time added to every BBR exposure, s.
    pub t_meas: f64,
    pub max_steps: usize,
    /// 0 selects the single lowest state.
    pub initial_temperature_k: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            purity_threshold: 0.01,
            step_reward: -1.0,
            overlap_penalty: 0.0,
            overlap_threshold: None,
            bbr_enabled: false,
            bbr_temperature_k: 300.0,
            t_meas: 0.0,
            max_steps: 200,
            initial_temperature_k: 300.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.purity_threshold > 0.0 && self.purity_threshold < 1.0) {
            return Err(Error::config("purity_threshold must lie in (0, 1)"));
        }
        if !self.step_reward.is_finite() {
            return Err(Error::config("step_reward must be finite"));
        }
        if !(self.overlap_penalty >= 0.0) || !self.overlap_penalty.is_finite() {
            return Err(Error::config("overlap_penalty must be finite and >= 0"));
        }
        if let Some(t) = self.overlap_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config("overlap_threshold must lie in [0, 1]"));
            }
        }
        if !(self.bbr_temperature_k >= 0.0) || !self.bbr_temperature_k.is_finite() {
            return Err(Error::config("bbr_temperature_k must be finite and >= 0"));
        }
        if !(self.t_meas >= 0.0) || !self.t_meas.is_finite() {
            return Err(Error::config("t_meas must be finite and >= 0"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        if !(self.initial_temperature_k >= 0.0) {
            return Err(Error::config("initial_temperature_k must be >= 0"));
        }
        Ok(())
    }

    pub fn initial_temperature(&self) -> Temperature {
        if self.initial_temperature_k == 0.0 {
            Temperature::Zero
        } else if self.initial_temperature_k.is_infinite() {
            Temperature::Infinite
        } else {
            Temperature::Kelvin(self.initial_temperature_k)
        }
    }
}

/// Boltzmann start state; at zero temperature the lowest level is occupied.
pub fn reset(config: &EnvConfig, table: &LevelTable) -> Result<PopulationState> {
    config.validate()?;
    boltzmann_populations(table, config.initial_temperature())
}

/// Cosine similarity of two population vectors.
pub fn overlap(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::numerical("overlap of vectors with different lengths"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::numerical("overlap of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub probability: f64,
    /// Post-measurement, post-BBR state. Equals the input state when unreachable.
    pub next: PopulationState,
    pub reward: f64,
    pub terminated: bool,
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: PopulationState,
    pub outcome: usize,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub p0: f64,
    pub p1: f64,
}

/// Everything needed to step: per-pulse matrices, durations and optional BBR maps.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: EnvConfig,
    pub initial: PopulationState,
    actions: Vec<TransitionMatrixPair>,
    durations: Vec<f64>,
    bbr_maps: Option<Vec<DMatrix<f64>>>,
}

impl Environment {
    pub fn new(
        config: EnvConfig,
        initial: PopulationState,
        actions: Vec<TransitionMatrixPair>,
        durations: Vec<f64>,
        bbr: Option<&BbrGenerator>,
    ) -> Result<Self> {
        config.validate()?;
        initial.validate()?;
        if actions.is_empty() {
            return Err(Error::config("environment needs at least one action"));
        }
        if durations.len() != actions.len() {
            return Err(Error::config("one duration per action is required"));
        }
        let n = initial.len();
        for (i, a) in actions.iter().enumerate() {
            if a.n_states() != n || a.a1.nrows() != n || a.a0.ncols() != n {
                return Err(Error::config(format!("action {i} has the wrong dimension")));
            }
        }
        let bbr_maps = match (config.bbr_enabled, bbr) {
            (false, _) => None,
            (true, None) => return Err(Error::config("BBR enabled but no generator supplied")),
            (true, Some(gen)) => {
                if gen.n_states() != n {
                    return Err(Error::config("BBR generator has the wrong dimension"));
                }
                Some(
                    durations
                        .iter()
                        .map(|d| gen.step_matrix(d + config.t_meas))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(Environment {
            config,
            initial,
            actions,
            durations,
            bbr_maps,
        })
    }

    /// Build from a compiled library and its level table.
    pub fn from_library(
        config: EnvConfig,
        table: &LevelTable,
        library: &PulseLibrary,
        pairs: Vec<TransitionMatrixPair>,
        bbr: Option<&BbrGenerator>,
    ) -> Result<Self> {
        let initial = reset(&config, table)?;
        let durations = library.pulses.iter().map(|p| p.duration_s).collect();
        Environment::new(config, initial, pairs, durations, bbr)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn action(&self, a: usize) -> &TransitionMatrixPair {
        &self.actions[a]
    }

    pub fn duration(&self, a: usize) -> f64 {
        self.durations[a]
    }

    pub fn overlap_threshold(&self) -> f64 {
        self.config
            .overlap_threshold
            .unwrap_or(1.0 - 1.0 / self.n_states() as f64)
    }

    pub fn is_terminal(&self, state: &PopulationState) -> bool {
        state.max_component().1 >= 1.0 - self.config.purity_threshold
    }

    /// Both measurement branches of `action` applied to `state`.
    pub fn step_branches(&self, state: &PopulationState, action: usize) -> Result<[Branch; 2]> {
        if action >= self.actions.len() {
            return Err(Error::config(format!(
                "action {action} outside library of {}",
                self.actions.len()
            )));
        }
        let n = self.n_states();
        if state.len() != n {
            return Err(Error::numerical("state has the wrong dimension"));
        }
        let pair = &self.actions[action];
        let raw = [mat_vec(&pair.a0, &state.p), mat_vec(&pair.a1, &state.p)];
        let mass = [raw[0].iter().sum::<f64>(), raw[1].iter().sum::<f64>()];
        let total = mass[0] + mass[1];
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::numerical(format!("action {action} annihilates the state")));
        }
        let elapsed = self.durations[action] + self.config.t_meas;
        let threshold = self.overlap_threshold();
        let mut out = Vec::with_capacity(2);
        for k in 0..2 {
            let probability = (mass[k] / total).max(0.0);
            if probability < UNREACHABLE {
                out.push(Branch {
                    probability,
                    next: state.clone(),
                    reward: self.config.step_reward,
                    terminated: false,
                    reachable: false,
                });
                continue;
            }
            let p: Vec<f64> = raw[k].iter().map(|x| (x / mass[k]).max(0.0)).collect();
            let measured = normalized(p, state.step_time + elapsed);
            let mut reward = self.config.step_reward;
            if overlap(&state.p, &measured.p)? > threshold {
                reward -= self.config.overlap_penalty;
            }
            let next = match &self.bbr_maps {
                Some(maps) => apply_map(&maps[action], &measured),
                None => measured,
            };
            let terminated = self.is_terminal(&next);
            out.push(Branch {
                probability,
                next,
                reward,
                terminated,
                reachable: true,
            });
        }
        let b1 = out.pop().expect("two branches");
        let b0 = out.pop().expect("two branches");
        Ok([b0, b1])
    }

    /// Sample one branch. `step_index` counts from 0 and drives truncation.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &PopulationState,
        action: usize,
        step_index: usize,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let branches = self.step_branches(state, action)?;
        let k = sample_branch(&branches, rng);
        let [b0, b1] = branches;
        let (p0, p1) = (b0.probability, b1.probability);
        let chosen = if k == 0 { b0 } else { b1 };
        let truncated = !chosen.terminated && step_index + 1 >= self.config.max_steps;
        Ok(StepOutcome {
            next: chosen.next,
            outcome: k,
            reward: chosen.reward,
            terminated: chosen.terminated,
            truncated,
            p0,
            p1,
        })
    }
}

/// Draw k with probability p_k, never choosing an unreachable branch.
pub fn sample_branch<R: Rng + ?Sized>(branches: &[Branch; 2], rng: &mut R) -> usize {
    if !branches[0].reachable {
        return 1;
    }
    if !branches[1].reachable {
        return 0;
    }
    let u: f64 = rng.gen();
    if u < branches[0].probability {
        0
    } else {
        1
    }
}

fn mat_vec(m: &DMatrix<f64>, p: &[f64]) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; n];
    for (j, &pj) in p.iter().enumerate() {
        if pj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * pj;
        }
    }
    out
}

fn normalized(mut p: Vec<f64>, step_time: f64) -> PopulationState {
    let s: f64 = p.iter().sum();
    for x in &mut p {
        *x /= s;
    }
    PopulationState { p, step_time }
}

fn apply_map(map: &DMatrix<f64>, state: &PopulationState) -> PopulationState {
    let p = mat_vec(map, &state.p).into_iter().map(|x| x.max(0.0)).collect();
    normalized(p, state.step_time)
}

/// Chooses an action from the current state and the number of pulses applied so far.
pub trait Policy {
    fn action(&self, state: &PopulationState, step_index: usize) -> usize;
}

/// Cycles through the library in order, one pulse per step.
#[derive(Debug, Clone, Copy)]
pub struct Sweeping {
    pub n_actions: usize,
}

pub fn sweeping_policy(step_index: usize, n_actions: usize) -> usize {
    step_index % n_actions
}

impl Policy for Sweeping {
    fn action(&self, _state: &PopulationState, step_index: usize) -> usize {
        sweeping_policy(step_index, self.n_actions)
    }
}

impl<F: Fn(&PopulationState, usize) -> usize> Policy for F {
    fn action(&self, state: &PopulationState, step_index: usize) -> usize {
        self(state, step_index)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    /// State before the pulse; empty unless snapshots were requested.
    pub state: Vec<f64>,
    pub action: usize,
    pub outcome: usize,
    pub reward: f64,
    /// Largest population after the step.
    pub purity: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<EpisodeStep>,
    pub terminal_state: Option<usize>,
    pub truncated: bool,
}

impl EpisodeRecord {
    pub fn length(&self) -> usize {
        self.steps.len()
    }

    pub fn finished(&self) -> bool {
        self.terminal_state.is_some()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

pub fn run_episode<P: Policy + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    env: &Environment,
    rng: &mut R,
    keep_states: bool,
) -> Result<EpisodeRecord> {
    let mut state = env.initial.clone();
    let mut steps = Vec::new();
    if env.is_terminal(&state) {
        return Ok(EpisodeRecord {
            steps,
            terminal_state: Some(state.max_component().0),
            truncated: false,
        });
    }
    for t in 0..env.config.max_steps {
        let a = policy.action(&state, t);
        let out = env.step(&state, a, t, rng)?;
        steps.push(EpisodeStep {
            state: if keep_states { state.p.clone() } else { Vec::new() },
            action: a,
            outcome: out.outcome,
            reward: out.reward,
            purity: out.next.max_component().1,
            terminated: out.terminated,
        });
        state = out.next;
        if out.terminated {
            return Ok(EpisodeRecord {
                steps,
                terminal_state: Some(state.max_component().0),
                truncated: false,
            });
        }
    }
    Ok(EpisodeRecord {
        steps,
        terminal_state: None,
        truncated: true,
    })
}

/// Rows `episode,step,action,k,reward,purity,terminated`.
pub fn write_episode_log<W: Write>(records: &[EpisodeRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::data(e.to_string());
    w.write_record(["episode", "step", "action", "k", "reward", "purity", "terminated"])
        .map_err(wrap)?;
    for (e, rec) in records.iter().enumerate() {
        for (t, s) in rec.steps.iter().enumerate() {
            w.write_record([
                e.to_string(),
                (t + 1).to_string(),
                s.action.to_string(),
                s.outcome.to_string(),
                format!("{:?}", s.reward),
                format!("{:?}", s.purity),
                (s.terminated as u8).to_string(),
            ])
            .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}
