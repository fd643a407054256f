//! Deep-Q training with replay, a soft-updated target network and
//! branch-averaged (qMDP) or sampled (MDP) temporal-difference targets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{argmax, Loss, Mlp, Sample};
use super::optim::{Optimizer, OptimizerKind};
use super::replay::{ReplayBuffer, ReplayEntry};
use crate::env::{run_episode, sample_branch, EpisodeRecord, Environment, Policy};
use crate::error::{Error, Result};
use crate::levels::PopulationState;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Bootstrap from the sampled outcome only.
    Mdp,
    /// Average both outcomes with their exact probabilities.
    Qmdp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub learning_rate: f64,
    pub soft_update: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Decay constant as a fraction of the number of training episodes.
    pub eps_decay_fraction: f64,
    pub n_training: usize,
    pub loss: Loss,
    pub update_mode: UpdateMode,
    pub discount: f64,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Updates start once the buffer holds this many transitions.
    pub learning_starts: usize,
    /// Episodes between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            learning_rate: 5e-4,
            soft_update: 1e-3,
            batch_size: 64,
            buffer_capacity: 100_000,
            eps_start: 1.0,
            eps_end: 0.025,
            eps_decay_fraction: 0.3,
            n_training: 1000,
            loss: Loss::SmoothL1,
            update_mode: UpdateMode::Qmdp,
            discount: 1.0,
            hidden: vec![128, 128],
            optimizer: OptimizerKind::Adam,
            learning_starts: 64,
            checkpoint_every: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.soft_update > 0.0 && self.soft_update <= 1.0) {
            return Err(Error::config("soft_update must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::config("batch_size and buffer_capacity must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::config("exploration rates must lie in [0, 1]"));
        }
        if self.eps_end > self.eps_start {
            return Err(Error::config("eps_end must not exceed eps_start"));
        }
        if !(self.eps_decay_fraction > 0.0) || !self.eps_decay_fraction.is_finite() {
            return Err(Error::config("eps_decay_fraction must be positive"));
        }
        if self.discount != 1.0 {
            return Err(Error::config("discount is fixed at 1 for this episodic task"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn widths(&self, n_states: usize, n_actions: usize) -> Vec<usize> {
        let mut w = vec![n_states];
        w.extend(&self.hidden);
        w.push(n_actions);
        w
    }
}

/// Exploration rate after `episode` training episodes.
pub fn epsilon(episode: usize, config: &DqnConfig) -> f64 {
    let tau = config.eps_decay_fraction * config.n_training.max(1) as f64;
    config.eps_end + (config.eps_start - config.eps_end) * (-(episode as f64) / tau).exp()
}

pub fn select_action<R: Rng + ?Sized>(qvalues: &[f64], eps: f64, rng: &mut R) -> usize {
    if eps > 0.0 && rng.gen::<f64>() < eps {
        rng.gen_range(0..qvalues.len())
    } else {
        argmax(qvalues)
    }
}

/// Targets for a batch. Next-state values use the online network's argmax
/// evaluated by the target network; terminal branches bootstrap 0.
pub fn td_targets(entries: &[&ReplayEntry], online: &Mlp, target: &Mlp, mode: UpdateMode) -> Result<Vec<f64>> {
    let mut next_states: Vec<&[f64]> = Vec::new();
    let mut slots: Vec<Vec<Option<usize>>> = Vec::with_capacity(entries.len());
    for e in entries {
        let mut s = Vec::with_capacity(e.branches.len());
        for (k, b) in e.branches.iter().enumerate() {
            let used = match mode {
                UpdateMode::Qmdp => true,
                UpdateMode::Mdp => k == e.sampled,
            };
            if used && !b.terminal {
                s.push(Some(next_states.len()));
                next_states.push(&b.next);
            } else {
                s.push(None);
            }
        }
        slots.push(s);
    }
    let q_online = online.forward_batch(&next_states)?;
    let q_target = target.forward_batch(&next_states)?;
    let bootstrap = |col: usize| {
        let a = argmax(q_online.column(col).as_slice());
        q_target[(a, col)]
    };
    let mut out = Vec::with_capacity(entries.len());
    for (e, s) in entries.iter().zip(&slots) {
        let value_of = |k: usize| e.branches[k].reward + s[k].map(bootstrap).unwrap_or(0.0);
        let y = match mode {
            UpdateMode::Mdp => value_of(e.sampled),
            UpdateMode::Qmdp => (0..e.branches.len())
                .map(|k| e.branches[k].probability * value_of(k))
                .sum(),
        };
        out.push(y);
    }
    Ok(out)
}

pub fn td_target(entry: &ReplayEntry, online: &Mlp, target: &Mlp, mode: UpdateMode) -> Result<f64> {
    Ok(td_targets(&[entry], online, target, mode)?[0])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub lengths: Vec<usize>,
    pub returns: Vec<f64>,
}

impl TrainingCurve {
    /// Mean over the most recent `window` episodes ending at each episode.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.lengths.len());
        let mut sum = 0.0;
        for (i, &l) in self.lengths.iter().enumerate() {
            sum += l as f64;
            if i >= window {
                sum -= self.lengths[i - window] as f64;
            }
            out.push(sum / (i + 1).min(window) as f64);
        }
        out
    }
}

pub const CHECKPOINT_FORMAT: &str = "qls-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: DqnConfig,
    pub widths: Vec<usize>,
    pub online: Vec<f64>,
    pub target: Vec<f64>,
    pub optimizer: Optimizer,
    pub buffer: ReplayBuffer,
    pub env_rng: ChaCha8Rng,
    pub explore_rng: ChaCha8Rng,
    pub replay_rng: ChaCha8Rng,
    pub episode: usize,
    pub updates: u64,
    pub curve: TrainingCurve,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::data(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header =
            serde_json::from_str(s).map_err(|e| Error::data(format!("checkpoint: {e}")))?;
        if h.format != CHECKPOINT_FORMAT || h.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "incompatible checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                h.format, h.version
            )));
        }
        serde_json::from_str(s).map_err(|e| Error::data(format!("checkpoint: {e}")))
    }

    pub fn network(&self) -> Result<Mlp> {
        Mlp::from_params(&self.widths, self.online.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: DqnConfig,
    pub online: Mlp,
    pub target: Mlp,
    optimizer: Optimizer,
    buffer: ReplayBuffer,
    env_rng: ChaCha8Rng,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    pub episode: usize,
    pub updates: u64,
    pub curve: TrainingCurve,
}

impl Trainer {
    pub fn new(config: DqnConfig, n_states: usize, n_actions: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let widths = config.widths(n_states, n_actions);
        let online = Mlp::new(&widths, &mut rng::stream(seed, rng::AGENT_INIT))?;
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate, online.params().len());
        Ok(Trainer {
            target: online.clone(),
            online,
            optimizer,
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            env_rng: rng::stream(seed, rng::ENV),
            explore_rng: rng::stream(seed, rng::EXPLORATION),
            replay_rng: rng::stream(seed, rng::REPLAY),
            episode: 0,
            updates: 0,
            curve: TrainingCurve::default(),
            config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            widths: self.online.widths().to_vec(),
            online: self.online.params().to_vec(),
            target: self.target.params().to_vec(),
            optimizer: self.optimizer.clone(),
            buffer: self.buffer.clone(),
            env_rng: self.env_rng.clone(),
            explore_rng: self.explore_rng.clone(),
            replay_rng: self.replay_rng.clone(),
            episode: self.episode,
            updates: self.updates,
            curve: self.curve.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        c.config.validate()?;
        Ok(Trainer {
            online: Mlp::from_params(&c.widths, c.online)?,
            target: Mlp::from_params(&c.widths, c.target)?,
            optimizer: c.optimizer,
            buffer: c.buffer,
            env_rng: c.env_rng,
            explore_rng: c.explore_rng,
            replay_rng: c.replay_rng,
            episode: c.episode,
            updates: c.updates,
            curve: c.curve,
            config: c.config,
        })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    fn check_env(&self, env: &Environment) -> Result<()> {
        if env.n_states() != self.online.n_inputs() || env.n_actions() != self.online.n_outputs() {
            return Err(Error::config("network shape does not match the environment"));
        }
        Ok(())
    }

    /// Train until `config.n_training` episodes; `on_checkpoint` runs on the
    /// checkpoint schedule.
    pub fn train<F>(&mut self, env: &Environment, on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        self.train_until(env, self.config.n_training, on_checkpoint)
    }

    pub fn train_until<F>(&mut self, env: &Environment, stop: usize, mut on_checkpoint: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        self.check_env(env)?;
        let stop = stop.min(self.config.n_training);
        while self.episode < stop {
            self.run_training_episode(env)?;
            self.episode += 1;
            let every = self.config.checkpoint_every;
            if every > 0 && self.episode % every == 0 {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    fn run_training_episode(&mut self, env: &Environment) -> Result<()> {
        let eps = epsilon(self.episode, &self.config);
        let mut state = env.initial.clone();
        let mut length = 0;
        let mut ret = 0.0;
        if !env.is_terminal(&state) {
            for _ in 0..env.config.max_steps {
                let q = self.online.forward(&state.p)?;
                let a = select_action(&q, eps, &mut self.explore_rng);
                let branches = env.step_branches(&state, a)?;
                let k = sample_branch(&branches, &mut self.env_rng);
                self.buffer
                    .push(ReplayEntry::from_branches(&state.p, a, &branches, k)?);
                let [b0, b1] = branches;
                let chosen = if k == 0 { b0 } else { b1 };
                length += 1;
                ret += chosen.reward;
                if self.buffer.len() >= self.config.learning_starts.max(1) {
                    self.update()?;
                }
                state = chosen.next;
                if chosen.terminated {
                    break;
                }
            }
        }
        self.curve.lengths.push(length);
        self.curve.returns.push(ret);
        Ok(())
    }

    fn update(&mut self) -> Result<()> {
        let batch = self.buffer.sample(self.config.batch_size, &mut self.replay_rng);
        let targets = td_targets(&batch, &self.online, &self.target, self.config.update_mode)?;
        let samples: Vec<Sample> = batch
            .iter()
            .zip(&targets)
            .map(|(e, &t)| Sample {
                state: &e.state,
                action: e.action,
                target: t,
            })
            .collect();
        let (loss, grad) = self.online.loss_and_gradient(&samples, self.config.loss)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!(
                "training diverged at episode {} (loss {loss})",
                self.episode
            )));
        }
        self.optimizer.step(self.online.params_mut(), &grad)?;
        if !self.online.is_finite() {
            return Err(Error::numerical(format!("non-finite weights at episode {}", self.episode)));
        }
        self.target.soft_update_from(&self.online, self.config.soft_update)?;
        self.updates += 1;
        Ok(())
    }
}

/// Greedy action from the network.
pub struct Greedy<'a>(pub &'a Mlp);

impl Policy for Greedy<'_> {
    fn action(&self, state: &PopulationState, _step_index: usize) -> usize {
        let q = self.0.forward(&state.p).expect("network width checked against the environment");
        argmax(&q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<EpisodeRecord>,
}

impl Evaluation {
    pub fn lengths(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.length()).collect()
    }

    pub fn mean_length(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.length() as f64).sum::<f64>() / self.records.len() as f64
    }

    /// Standard error of the mean length.
    pub fn std_error(&self) -> f64 {
        let n = self.records.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = self.mean_length();
        let var = self
            .records
            .iter()
            .map(|r| (r.length() as f64 - m).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }

    pub fn finished_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.finished()).count() as f64 / self.records.len() as f64
    }
}

/// Roll out `n_episodes` with per-episode random streams, in parallel.
pub fn evaluate_policy<P: Policy + Sync + ?Sized>(
    policy: &P,
    env: &Environment,
    n_episodes: usize,
    seed: u64,
    keep_states: bool,
) -> Result<Evaluation> {
    let records = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::episode_stream(seed, rng::EVALUATION, i as u64);
            run_episode(policy, env, &mut r, keep_states)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { records })
}

/// Greedy (no exploration) evaluation of a trained network.
pub fn evaluate(mlp: &Mlp, env: &Environment, n_episodes: usize, seed: u64) -> Result<Evaluation> {
    if env.n_states() != mlp.n_inputs() || env.n_actions() != mlp.n_outputs() {
        return Err(Error::config("network shape does not match the environment"));
    }
    evaluate_policy(&Greedy(mlp), env, n_episodes, seed, false)
}
