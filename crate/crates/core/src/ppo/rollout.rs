//! Environment interface, experience collection and rollout batches.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dist::MaskedDistribution;
use super::gae::gae;
use super::net::PolicyParams;
use super::PpoError;
use crate::phase_graph::PhaseMask;

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode reached a terminal state (no bootstrap).
    pub terminated: bool,
    /// The episode was cut off by a time limit (bootstrap from the last state).
    pub truncated: bool,
}

/// Episodic environment with a discrete, maskable action space.
pub trait Env {
    type Error: std::error::Error + Send + Sync + 'static;

    fn observation_len(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, Self::Error>;
    /// Actions the policy may choose in the current state.
    fn action_mask(&self) -> PhaseMask;
    fn step(&mut self, action: usize) -> Result<EnvStep, Self::Error>;
}

fn env_error<E: std::error::Error + Send + Sync + 'static>(e: E) -> PpoError {
    PpoError::Env(Box::new(e))
}

/// Aligned per-step training data.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub observations: Array2<f64>,
    pub actions: Vec<usize>,
    pub masks: Vec<PhaseMask>,
    pub log_prob_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

impl RolloutBatch {
    pub fn with_capacity(obs_len: usize, capacity: usize) -> Self {
        let mut observations = Array2::zeros((0, obs_len));
        observations.reserve_rows(capacity).expect("capacity fits");
        RolloutBatch {
            observations,
            actions: Vec::with_capacity(capacity),
            masks: Vec::with_capacity(capacity),
            log_prob_old: Vec::with_capacity(capacity),
            rewards: Vec::with_capacity(capacity),
            values: Vec::with_capacity(capacity),
            advantages: Vec::with_capacity(capacity),
            value_targets: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Appends a transition; advantages and targets are filled in later.
    pub fn push(&mut self, obs: &[f64], action: usize, mask: PhaseMask, log_prob: f64, reward: f64, value: f64) {
        self.observations.push_row(ndarray::ArrayView1::from(obs)).expect("observation length");
        self.actions.push(action);
        self.masks.push(mask);
        self.log_prob_old.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
    }

    /// Checks the alignment and sampling invariants.
    pub fn validate(&self) -> Result<(), PpoError> {
        let n = self.len();
        let lens = [
            self.observations.nrows(),
            self.masks.len(),
            self.log_prob_old.len(),
            self.rewards.len(),
            self.values.len(),
            self.advantages.len(),
            self.value_targets.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(PpoError::Shape(format!("misaligned batch: {n} actions, other lengths {lens:?}")));
        }
        if let Some(i) = (0..n).find(|&i| !self.masks[i].get_index(self.actions[i])) {
            return Err(PpoError::Shape(format!("action {} at row {i} violates its mask", self.actions[i])));
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> RolloutBatch {
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect();
        RolloutBatch {
            observations: self.observations.select(Axis(0), rows),
            actions: rows.iter().map(|&i| self.actions[i]).collect(),
            masks: rows.iter().map(|&i| self.masks[i]).collect(),
            log_prob_old: pick(&self.log_prob_old),
            rewards: pick(&self.rewards),
            values: pick(&self.values),
            advantages: pick(&self.advantages),
            value_targets: pick(&self.value_targets),
        }
    }

    pub fn concat(parts: Vec<RolloutBatch>) -> RolloutBatch {
        if parts.is_empty() {
            return RolloutBatch::default();
        }
        let views: Vec<_> = parts.iter().map(|p| p.observations.view()).collect();
        let observations = concatenate(Axis(0), &views).expect("equal observation widths");
        let mut out = RolloutBatch { observations, ..Default::default() };
        for p in parts {
            out.actions.extend(p.actions);
            out.masks.extend(p.masks);
            out.log_prob_old.extend(p.log_prob_old);
            out.rewards.extend(p.rewards);
            out.values.extend(p.values);
            out.advantages.extend(p.advantages);
            out.value_targets.extend(p.value_targets);
        }
        out
    }

    /// Shifts and scales advantages to mean 0 and standard deviation 1.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len();
        if n < 2 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n as f64;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-8);
        for a in &mut self.advantages {
            *a = (*a - mean) / std;
        }
    }
}

/// Discounting for advantage estimation. Rewards are multiplied by
/// `reward_scale` before entering the batch; episode totals stay unscaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageParams {
    pub gamma: f64,
    pub lambda: f64,
    pub reward_scale: f64,
}

impl AdvantageParams {
    pub fn new(gamma: f64, lambda: f64) -> Self {
        AdvantageParams { gamma, lambda, reward_scale: 1.0 }
    }
}

/// One environment with its own RNG stream and running episode state.
#[derive(Debug)]
pub struct RolloutWorker<E> {
    env: E,
    rng: ChaCha8Rng,
    obs: Option<Vec<f64>>,
    episode_return: f64,
    episode_len: usize,
    pub completed: Vec<EpisodeStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub total_reward: f64,
    pub length: usize,
}

impl<E: Env> RolloutWorker<E> {
    pub fn new(env: E, seed: u64) -> Self {
        RolloutWorker {
            env,
            rng: ChaCha8Rng::seed_from_u64(seed),
            obs: None,
            episode_return: 0.0,
            episode_len: 0,
            completed: Vec::new(),
        }
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn env_mut(&mut self) -> &mut E {
        &mut self.env
    }

    /// Runs `steps` environment steps with actions sampled from `params`,
    /// resetting with fresh seeds at episode ends. Advantages are computed
    /// per segment; time-limit truncation and the cut at the end of the
    /// batch bootstrap from the value of the next state.
    pub fn collect(&mut self, params: &PolicyParams, steps: usize, adv: &AdvantageParams) -> Result<RolloutBatch, PpoError> {
        let mut batch = RolloutBatch::with_capacity(self.env.observation_len(), steps);
        let mut seg_start = 0;
        for _ in 0..steps {
            let obs = match self.obs.take() {
                Some(o) => o,
                None => {
                    let seed = self.rng.random();
                    self.env.reset(seed).map_err(env_error)?
                }
            };
            let mask = self.env.action_mask();
            let (logits, value) = params.forward(&obs);
            let dist = MaskedDistribution::new(&logits, &mask)?;
            let action = dist.sample(&mut self.rng);
            let step = self.env.step(action).map_err(env_error)?;
            batch.push(&obs, action, mask, dist.log_prob(action), step.reward * adv.reward_scale, value);
            self.episode_return += step.reward;
            self.episode_len += 1;
            if step.terminated || step.truncated {
                let boot = if step.terminated { 0.0 } else { params.forward(&step.observation).1 };
                self.finish_segment(&mut batch, seg_start, boot, adv);
                seg_start = batch.len();
                self.completed.push(EpisodeStats { total_reward: self.episode_return, length: self.episode_len });
                self.episode_return = 0.0;
                self.episode_len = 0;
            } else {
                self.obs = Some(step.observation);
            }
        }
        if seg_start < batch.len() {
            let boot = params.forward(self.obs.as_ref().expect("episode in progress")).1;
            self.finish_segment(&mut batch, seg_start, boot, adv);
        }
        Ok(batch)
    }

    fn finish_segment(&self, batch: &mut RolloutBatch, start: usize, boot: f64, adv: &AdvantageParams) {
        let (a, targets) = gae(&batch.rewards[start..], &batch.values[start..], boot, adv.gamma, adv.lambda);
        batch.advantages.extend(a);
        batch.value_targets.extend(targets);
    }
}

/// Collects `steps_per_worker` from every worker in parallel and
/// concatenates the results in worker order.
pub fn collect_parallel<E: Env + Send>(
    workers: &mut [RolloutWorker<E>],
    params: &PolicyParams,
    steps_per_worker: usize,
    adv: &AdvantageParams,
) -> Result<RolloutBatch, PpoError> {
    let parts: Result<Vec<_>, _> = workers.par_iter_mut().map(|w| w.collect(params, steps_per_worker, adv)).collect();
    Ok(RolloutBatch::concat(parts?))
}
