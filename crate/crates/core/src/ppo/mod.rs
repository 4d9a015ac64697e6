//! Proximal policy optimization with invalid-action masking.
//!
//! The policy samples only from phases the environment's mask allows; the
//! entropy bonus is taken over that support. Network, backpropagation and
//! optimizer are plain `ndarray` code.

mod adam;
mod dist;
mod gae;
mod loss;
mod net;
mod rollout;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use dist::MaskedDistribution;
pub use gae::gae;
pub use loss::{ppo_loss, ppo_loss_and_grad, LossCoeffs, LossDiagnostics};
pub use net::{Dense, ForwardCache, PolicyParams};
pub use rollout::{collect_parallel, AdvantageParams, Env, EnvStep, EpisodeStats, RolloutBatch, RolloutWorker};

use crate::phase_graph::PhaseMask;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("action mask allows no action")]
    EmptyMask,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("environment: {0}")]
    Env(Box<dyn std::error::Error + Send + Sync>),
}

/// PPO hyperparameters; serialized names follow the usual PPO config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub train_batch_size: usize,
    pub num_sgd_iter: usize,
    pub gamma: f64,
    #[serde(rename = "lambda")]
    pub gae_lambda: f64,
    pub vf_loss_coeff: f64,
    pub lr: f64,
    pub clip_eps: f64,
    pub entropy_coeff: f64,
    pub minibatch_size: usize,
    pub episode_total: usize,
    pub fcnet_hiddens: Vec<usize>,
    pub num_workers: usize,
    pub normalize_advantages: bool,
    /// Multiplies rewards before advantage estimation.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            train_batch_size: 2048,
            num_sgd_iter: 20,
            gamma: 0.98,
            gae_lambda: 0.95,
            vf_loss_coeff: 0.005,
            lr: 5e-5,
            clip_eps: 0.2,
            entropy_coeff: 0.0,
            minibatch_size: 256,
            episode_total: 2500,
            fcnet_hiddens: vec![128, 128],
            num_workers: 4,
            normalize_advantages: true,
            reward_scale: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.lr > 0.0 && self.reward_scale > 0.0 && self.vf_loss_coeff >= 0.0 && self.entropy_coeff >= 0.0) {
            return bad("lr and reward_scale must be positive, loss coefficients non-negative");
        }
        if self.num_workers == 0 || !self.train_batch_size.is_multiple_of(self.num_workers) {
            return bad("train_batch_size must split evenly across a positive number of workers");
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.train_batch_size || self.num_sgd_iter == 0 {
            return bad("minibatch_size must be in 1..=train_batch_size and num_sgd_iter positive");
        }
        Ok(())
    }

    pub fn loss_coeffs(&self) -> LossCoeffs {
        LossCoeffs { clip_eps: self.clip_eps, vf_loss_coeff: self.vf_loss_coeff, entropy_coeff: self.entropy_coeff }
    }

    pub fn advantage_params(&self) -> AdvantageParams {
        AdvantageParams { gamma: self.gamma, lambda: self.gae_lambda, reward_scale: self.reward_scale }
    }
}

/// Masked policy output for one observation.
pub fn forward(params: &PolicyParams, obs: &[f64], mask: &PhaseMask) -> Result<(MaskedDistribution, f64), PpoError> {
    if obs.len() != params.input_len() {
        return Err(PpoError::Shape(format!("observation of length {}, network expects {}", obs.len(), params.input_len())));
    }
    let (logits, value) = params.forward(obs);
    Ok((MaskedDistribution::new(&logits, mask)?, value))
}

/// `num_sgd_iter` epochs of shuffled minibatch Adam steps on one batch.
/// The behaviour policy is fixed by the batch's recorded log-probabilities.
/// Returns the loss diagnostics averaged over all minibatches.
pub fn update<R: Rng>(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &RolloutBatch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossDiagnostics, PpoError> {
    batch.validate()?;
    let mut batch = batch.clone();
    if cfg.normalize_advantages {
        batch.normalize_advantages();
    }
    let coeffs = cfg.loss_coeffs();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut mean = LossDiagnostics::default();
    let mut count = 0.0;
    for _ in 0..cfg.num_sgd_iter {
        order.shuffle(rng);
        for rows in order.chunks(cfg.minibatch_size) {
            let mb = batch.select(rows);
            let (d, grad) = ppo_loss_and_grad(params, &mb, &coeffs)?;
            adam.step(params, &grad);
            count += 1.0;
            for (m, v) in [
                (&mut mean.loss, d.loss),
                (&mut mean.surrogate, d.surrogate),
                (&mut mean.value_loss, d.value_loss),
                (&mut mean.entropy, d.entropy),
                (&mut mean.clip_fraction, d.clip_fraction),
                (&mut mean.kl_estimate, d.kl_estimate),
            ] {
                *m += (v - *m) / count;
            }
        }
    }
    Ok(mean)
}

/// Summary of one collect-and-update iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    /// Environment steps collected so far.
    pub env_steps: usize,
    /// Episodes completed so far.
    pub episodes: usize,
    /// Total rewards of episodes completed during this iteration.
    pub episode_rewards: Vec<f64>,
    pub loss: LossDiagnostics,
}

impl IterationStats {
    pub fn mean_episodic_reward(&self) -> Option<f64> {
        (!self.episode_rewards.is_empty())
            .then(|| self.episode_rewards.iter().sum::<f64>() / self.episode_rewards.len() as f64)
    }
}

/// Synchronous PPO: parallel collection, then an exclusive update.
pub struct Trainer<E> {
    pub cfg: TrainConfig,
    pub params: PolicyParams,
    adam: Adam,
    workers: Vec<RolloutWorker<E>>,
    rng: ChaCha8Rng,
    iteration: usize,
    env_steps: usize,
    episodes: usize,
}

impl<E: Env + Send> Trainer<E> {
    /// One environment per worker; every random stream derives from `seed`.
    pub fn new(cfg: TrainConfig, envs: Vec<E>, seed: u64) -> Result<Self, PpoError> {
        cfg.validate()?;
        if envs.len() != cfg.num_workers {
            return Err(PpoError::Config(format!("{} environments for {} workers", envs.len(), cfg.num_workers)));
        }
        let (obs_len, n_actions) = (envs[0].observation_len(), envs[0].num_actions());
        if envs.iter().any(|e| e.observation_len() != obs_len || e.num_actions() != n_actions) {
            return Err(PpoError::Shape("environments disagree on observation or action size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParams::new(obs_len, &cfg.fcnet_hiddens, n_actions, &mut rng);
        let workers = envs.into_iter().map(|e| RolloutWorker::new(e, rng.random())).collect();
        Ok(Trainer { adam: Adam::new(&params, cfg.lr), cfg, params, workers, rng, iteration: 0, env_steps: 0, episodes: 0 })
    }

    pub fn workers(&self) -> &[RolloutWorker<E>] {
        &self.workers
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn iterate(&mut self) -> Result<IterationStats, PpoError> {
        let per_worker = self.cfg.train_batch_size / self.cfg.num_workers;
        let batch = collect_parallel(&mut self.workers, &self.params, per_worker, &self.cfg.advantage_params())?;
        let loss = update(&mut self.params, &mut self.adam, &batch, &self.cfg, &mut self.rng)?;
        let episode_rewards: Vec<f64> =
            self.workers.iter_mut().flat_map(|w| w.completed.drain(..)).map(|e| e.total_reward).collect();
        self.iteration += 1;
        self.env_steps += batch.len();
        self.episodes += episode_rewards.len();
        Ok(IterationStats {
            iteration: self.iteration,
            env_steps: self.env_steps,
            episodes: self.episodes,
            episode_rewards,
            loss,
        })
    }

    /// Iterates until `episode_total` episodes have completed.
    pub fn train(&mut self, mut on_iteration: impl FnMut(&IterationStats)) -> Result<(), PpoError> {
        while self.episodes < self.cfg.episode_total {
            let stats = self.iterate()?;
            on_iteration(&stats);
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON dump of the network with an explicit shape header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub input_len: usize,
    pub hidden: Vec<usize>,
    pub num_actions: usize,
    pub params: PolicyParams,
    /// Free-form data stored alongside, e.g. the controller kind.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, meta: serde_json::Value) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            input_len: params.input_len(),
            hidden: params.hidden_sizes(),
            num_actions: params.num_actions(),
            params,
            meta,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PpoError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(PpoError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        ck.params.validate()?;
        if (ck.params.input_len(), ck.params.hidden_sizes(), ck.params.num_actions())
            != (ck.input_len, ck.hidden.clone(), ck.num_actions)
        {
            return Err(PpoError::Checkpoint("shape header does not match the stored weights".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), PpoError> {
        std::fs::write(path, self.to_json()).map_err(|e| PpoError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, PpoError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PpoError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::rollout::tests::{Bandit, BANDIT_REWARDS};
    use super::*;
    use crate::intersection::PhaseId;

    #[test]
    fn table_defaults() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.train_batch_size, c.num_sgd_iter, c.minibatch_size), (2048, 20, 256));
        assert_eq!((c.gamma, c.gae_lambda, c.vf_loss_coeff, c.lr), (0.98, 0.95, 0.005, 5e-5));
        let json = serde_json::to_value(&c).unwrap();
        assert_eq!(json["lambda"], 0.95);
        let back: TrainConfig = serde_json::from_str(r#"{"lambda": 0.9, "clip_eps": 0.1}"#).unwrap();
        assert_eq!((back.gae_lambda, back.clip_eps, back.gamma), (0.9, 0.1, 0.98));
    }

    #[test]
    fn rejects_bad_config() {
        for c in [
            TrainConfig { gamma: 1.5, ..Default::default() },
            TrainConfig { clip_eps: 0.0, ..Default::default() },
            TrainConfig { num_workers: 3, ..Default::default() },
            TrainConfig { minibatch_size: 4096, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(PpoError::Config(_))));
        }
    }

    #[test]
    fn forward_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PolicyParams::new(4, &[5], 3, &mut rng);
        assert!(matches!(forward(&p, &[0.0; 3], &PhaseMask::full(3)), Err(PpoError::Shape(_))));
        let (d, _) = forward(&p, &[0.0; 4], &PhaseMask::single(3, PhaseId(3))).unwrap();
        assert_eq!(d.probs(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_advantage_update_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = PolicyParams::new(2, &[6], 3, &mut rng);
        let mut w = RolloutWorker::new(Bandit::new(10), 0);
        let mut b = w.collect(&p, 64, &AdvantageParams::new(0.9, 0.9)).unwrap();
        b.advantages.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..b.len() {
            b.value_targets[i] = p.forward(b.observations.row(i).as_slice().unwrap()).1;
        }
        let cfg = TrainConfig {
            train_batch_size: 64,
            minibatch_size: 64,
            num_sgd_iter: 1,
            normalize_advantages: false,
            lr: 1e-2,
            ..Default::default()
        };
        let before = p.clone();
        let mut adam = Adam::new(&p, cfg.lr);
        update(&mut p, &mut adam, &b, &cfg, &mut rng).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn bandit_converges_to_best_allowed_arm() {
        let cfg = TrainConfig {
            train_batch_size: 256,
            minibatch_size: 64,
            num_sgd_iter: 4,
            num_workers: 2,
            lr: 3e-3,
            gamma: 0.0,
            gae_lambda: 0.0,
            vf_loss_coeff: 0.5,
            fcnet_hiddens: vec![16],
            episode_total: usize::MAX,
            ..Default::default()
        };
        let mut t = Trainer::new(cfg, vec![Bandit::new(16), Bandit::new(16)], 5).unwrap();
        for _ in 0..60 {
            t.iterate().unwrap();
        }
        let mask1 = Bandit { state: 1, t: 0, horizon: 1 }.action_mask();
        let (d0, _) = forward(&t.params, &[1.0, 0.0], &PhaseMask::full(3)).unwrap();
        let (d1, _) = forward(&t.params, &[0.0, 1.0], &mask1).unwrap();
        // analytic optimum: arm 0 in state 0, arm 2 (best allowed) in state 1
        assert_eq!(BANDIT_REWARDS[0].iter().copied().fold(f64::MIN, f64::max), BANDIT_REWARDS[0][0]);
        assert!(BANDIT_REWARDS[1][2] > BANDIT_REWARDS[1][0]);
        assert!(d0.prob(0) > 0.95, "{:?}", d0.probs());
        assert!(d1.prob(2) > 0.95, "{:?}", d1.probs());
        assert_eq!(d1.prob(1), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::new(27, &[16, 16], 8, &mut rng);
        let ck = Checkpoint::new(p, serde_json::json!({"controller": "b"}));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let mut tampered: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
        tampered["num_actions"] = 7.into();
        assert!(Checkpoint::from_json(&tampered.to_string()).is_err());
    }
}
