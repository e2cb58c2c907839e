//! DDPG with prioritized replay.
//!
//! One training tick is, in order: sample a prioritized batch, one critic step
//! on the importance-weighted squared TD error, one actor step along
//! `∇_Θ φ(s) · ∇ₐQ(s, φ(s))`, priority refresh with the TD errors, and soft
//! updates of both target networks.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{episode_seed, Env, EnvError, EnvKind, EnvParams, Policy, Transition};
use crate::nn::{Activation, Adam, GradientSet, MlpNet, NnError, OutputActivation, Tape};
use crate::reference::monte_carlo_value;
use crate::replay::{anneal_beta, PerConfig, PrioritizedBuffer, PriorityMode, ReplayError, SampledBatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in episode {episode}: {reason}")]
    Diverged {
        episode: usize,
        reason: String,
        history: Vec<EpisodeRecord>,
    },
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, TrainError::Diverged { .. })
    }
}

/// When to declare a run diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceConfig {
    /// Position bound for environments without a hard position cap, checked on
    /// a noise-free rollout of the actor after every training episode.
    pub max_abs_position: f64,
    /// Maxpos only: a training episode in which the actor's own (noise-free)
    /// trade sits at its output bound for more than this fraction of steps
    /// means the policy has collapsed onto the tanh saturation.
    pub max_saturated_fraction: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            max_abs_position: 50.0,
            max_saturated_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub discount: f64,
    pub update_period: usize,
    pub batch_size: usize,
    pub tau_critic: f64,
    pub tau_actor: f64,
    pub pretrain_steps: usize,
    pub episodes: usize,
    pub episode_length: usize,
    pub explore_rho: f64,
    pub explore_sigma: f64,
    pub max_trade: f64,
    pub hidden_layers: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Multiplier on the initial weights of the actor's output layer.
    pub actor_output_init_scale: f64,
    /// Rescale each critic gradient to at most this global L2 norm.
    pub critic_grad_clip: Option<f64>,
    /// Rescale each actor gradient to at most this global L2 norm.
    pub actor_grad_clip: Option<f64>,
    /// Bootstrap through the artificial horizon cut at the end of an episode.
    pub bootstrap_terminal: bool,
    /// Evaluate the noise-free actor every this many episodes (0 = never).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    pub eval_seed: u64,
    pub seed: u64,
    pub per: PerConfig,
    pub divergence: DivergenceConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            discount: 0.99,
            update_period: 1,
            batch_size: 64,
            tau_critic: 5e-3,
            tau_actor: 5e-3,
            pretrain_steps: 5000,
            episodes: 300,
            episode_length: 1000,
            explore_rho: 0.1,
            explore_sigma: 0.3,
            max_trade: 8.0,
            hidden_layers: vec![64, 64],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            actor_output_init_scale: 1e-2,
            critic_grad_clip: None,
            actor_grad_clip: None,
            bootstrap_terminal: true,
            eval_every: 10,
            eval_episodes: 2,
            eval_horizon: 5000,
            eval_seed: 0xE7A1,
            seed: 0,
            per: PerConfig::default(),
            divergence: DivergenceConfig::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_owned()));
        let unit_open = |x: f64| x > 0.0 && x < 1.0;
        if !(self.discount >= 0.0 && self.discount < 1.0) {
            return bad("discount must lie in [0, 1)");
        }
        if !unit_open(self.tau_critic) && self.tau_critic != 1.0 {
            return bad("tau_critic must lie in (0, 1]");
        }
        if !unit_open(self.tau_actor) && self.tau_actor != 1.0 {
            return bad("tau_actor must lie in (0, 1]");
        }
        if self.update_period == 0 || self.batch_size == 0 || self.episode_length == 0 {
            return bad("update_period, batch_size and episode_length must be positive");
        }
        if !(self.explore_rho > 0.0 && self.explore_rho <= 1.0) {
            return bad("explore_rho must lie in (0, 1]");
        }
        if !(self.explore_sigma >= 0.0) {
            return bad("explore_sigma must be >= 0");
        }
        if !(self.max_trade > 0.0) {
            return bad("max_trade must be positive");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.eval_every > 0 && (self.eval_episodes == 0 || self.eval_horizon == 0) {
            return bad("eval_episodes and eval_horizon must be positive when evaluating");
        }
        if !(0.0..=1.0).contains(&self.per.beta0) {
            return bad("per.beta0 must lie in [0, 1]");
        }
        Ok(())
    }

    /// A few seconds of training; for examples and smoke tests.
    pub fn smoke() -> Self {
        Self {
            pretrain_steps: 500,
            episodes: 3,
            episode_length: 200,
            batch_size: 16,
            hidden_layers: vec![16, 16],
            eval_every: 1,
            eval_episodes: 1,
            eval_horizon: 500,
            per: PerConfig {
                capacity: 5000,
                ..PerConfig::default()
            },
            ..Self::default()
        }
    }
}

/// Autoregressive exploration noise `η ← (1−ρ)·η + σ·ε`, starting from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationNoise {
    pub state: f64,
    pub rho_expl: f64,
    pub sigma_expl: f64,
}

impl ExplorationNoise {
    pub fn new(rho_expl: f64, sigma_expl: f64) -> Self {
        Self {
            state: 0.0,
            rho_expl,
            sigma_expl,
        }
    }

    pub fn reset(&mut self) {
        self.state = 0.0;
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        let eps: f64 = rng.sample(StandardNormal);
        self.state = (1.0 - self.rho_expl) * self.state + self.sigma_expl * eps;
        self.state
    }

    /// Standard deviation of the stationary process.
    pub fn stationary_std(&self) -> f64 {
        let c = 1.0 - self.rho_expl;
        self.sigma_expl / (1.0 - c * c).sqrt()
    }
}

#[derive(Debug, Default, Clone)]
struct Scratch {
    actor_tape: Tape,
    critic_tape: Tape,
    target_actor_tape: Tape,
    target_critic_tape: Tape,
    actor_grads: Option<GradientSet>,
    critic_grads: Option<GradientSet>,
}

/// Actor, critic, their target copies and optimizer states.
#[derive(Debug, Clone)]
pub struct Agent {
    pub actor: MlpNet,
    pub critic: MlpNet,
    pub target_actor: MlpNet,
    pub target_critic: MlpNet,
    actor_opt: Adam,
    critic_opt: Adam,
    actor_clip: Option<f64>,
    critic_clip: Option<f64>,
    scratch: Scratch,
}

fn clip_norm(grads: &mut GradientSet, max_norm: Option<f64>) {
    if let Some(max_norm) = max_norm {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: &AgentConfig, rng: &mut R) -> Result<Self, TrainError> {
        let mut actor_sizes = vec![2];
        actor_sizes.extend(&config.hidden_layers);
        actor_sizes.push(1);
        let mut critic_sizes = vec![3];
        critic_sizes.extend(&config.hidden_layers);
        critic_sizes.push(1);
        let mut actor = MlpNet::new(
            &actor_sizes,
            Activation::Relu,
            OutputActivation::ScaledTanh(config.max_trade),
            rng,
        )?;
        actor.scale_last_layer(config.actor_output_init_scale);
        let critic = MlpNet::new(&critic_sizes, Activation::Relu, OutputActivation::Linear, rng)?;
        Ok(Self::from_nets(actor.clone(), critic.clone(), actor, critic, config))
    }

    pub fn from_nets(
        actor: MlpNet,
        critic: MlpNet,
        target_actor: MlpNet,
        target_critic: MlpNet,
        config: &AgentConfig,
    ) -> Self {
        let adam = |net: &MlpNet, lr: f64| {
            Adam::with_moments(net, lr, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
        };
        Self {
            actor_opt: adam(&actor, config.actor_lr),
            critic_opt: adam(&critic, config.critic_lr),
            actor_clip: config.actor_grad_clip,
            critic_clip: config.critic_grad_clip,
            actor,
            critic,
            target_actor,
            target_critic,
            scratch: Scratch::default(),
        }
    }

    /// Noise-free actor output.
    pub fn policy_action(&self, state: [f64; 2]) -> f64 {
        self.actor.predict_scalar(&state).unwrap_or(f64::NAN)
    }

    /// `φ(s) + η` during training, `φ(s)` when `noise` is `None`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: [f64; 2],
        noise: Option<(&mut ExplorationNoise, &mut R)>,
    ) -> f64 {
        let base = self.policy_action(state);
        match noise {
            Some((n, rng)) => base + n.sample(rng),
            None => base,
        }
    }

    pub fn q_value(&self, state: [f64; 2], action: f64) -> f64 {
        self.critic
            .predict_scalar(&[state[0], state[1], action])
            .unwrap_or(f64::NAN)
    }

    /// One importance-weighted TD step on the critic; returns `δ_i = Q(s_i, a_i) − Q̃_i`.
    pub fn critic_update(
        &mut self,
        batch: &SampledBatch,
        discount: f64,
        bootstrap_terminal: bool,
    ) -> Result<Vec<f64>, TrainError> {
        let b = batch.len() as f64;
        let s = &mut self.scratch;
        let grads = s
            .critic_grads
            .get_or_insert_with(|| GradientSet::zeros_like(&self.critic));
        grads.fill_zero();
        let mut deltas = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        for (tr, &w) in batch.transitions.iter().zip(&batch.is_weights) {
            let target = if tr.done && !bootstrap_terminal {
                tr.reward
            } else {
                self.target_actor.forward_into(&tr.next_state, &mut s.target_actor_tape)?;
                let next_a = s.target_actor_tape.output()[0];
                let next_in = [tr.next_state[0], tr.next_state[1], next_a];
                self.target_critic.forward_into(&next_in, &mut s.target_critic_tape)?;
                tr.reward + discount * s.target_critic_tape.output()[0]
            };
            let input = [tr.state[0], tr.state[1], tr.action];
            self.critic.forward_into(&input, &mut s.critic_tape)?;
            let delta = s.critic_tape.output()[0] - target;
            loss += w * delta * delta / b;
            self.critic
                .backward_accumulate(&s.critic_tape, &[2.0 * w * delta / b], grads)?;
            deltas.push(delta);
        }
        if !loss.is_finite() {
            return Err(NnError::NonFinite.into());
        }
        clip_norm(grads, self.critic_clip);
        self.critic_opt.step(&mut self.critic, grads)?;
        Ok(deltas)
    }

    /// One step on the actor loss `−(1/b) Σ Q(s_i, φ(s_i))`. Critic untouched.
    /// Returns the loss before the step.
    pub fn actor_update(&mut self, batch: &SampledBatch) -> Result<f64, TrainError> {
        let b = batch.len() as f64;
        let s = &mut self.scratch;
        let grads = s
            .actor_grads
            .get_or_insert_with(|| GradientSet::zeros_like(&self.actor));
        grads.fill_zero();
        let mut loss = 0.0;
        for tr in &batch.transitions {
            self.actor.forward_into(&tr.state, &mut s.actor_tape)?;
            let a = s.actor_tape.output()[0];
            self.critic
                .forward_into(&[tr.state[0], tr.state[1], a], &mut s.critic_tape)?;
            loss -= s.critic_tape.output()[0] / b;
            let dq = self.critic.input_gradient(&s.critic_tape, &[-1.0 / b])?;
            self.actor.backward_accumulate(&s.actor_tape, &[dq[2]], grads)?;
        }
        if !loss.is_finite() {
            return Err(NnError::NonFinite.into());
        }
        clip_norm(grads, self.actor_clip);
        self.actor_opt.step(&mut self.actor, grads)?;
        Ok(loss)
    }

    pub fn soft_update_targets(&mut self, tau_critic: f64, tau_actor: f64) -> Result<(), TrainError> {
        self.target_critic.soft_update(&self.critic, tau_critic)?;
        self.target_actor.soft_update(&self.actor, tau_actor)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.critic.is_finite()
            && self.target_actor.is_finite()
            && self.target_critic.is_finite()
    }

    /// Writes the four networks plus a config echo into `dir`.
    pub fn save_checkpoint(
        &self,
        dir: &Path,
        env: &EnvParams,
        config: &AgentConfig,
    ) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        for (name, net) in self.named_nets() {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.bin")))?);
            net.write_to(&mut w)?;
            w.flush()?;
        }
        let echo = CheckpointMeta {
            env: env.clone(),
            agent: config.clone(),
        };
        let text = toml::to_string(&echo).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        fs::write(dir.join(CHECKPOINT_META), text)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, CheckpointMeta), TrainError> {
        let text = fs::read_to_string(dir.join(CHECKPOINT_META))?;
        let meta: CheckpointMeta =
            toml::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let read = |name: &str| -> Result<MlpNet, TrainError> {
            let f = fs::File::open(dir.join(format!("{name}.bin")))?;
            Ok(MlpNet::read_from(BufReader::new(f))?)
        };
        let (actor, critic) = (read("actor")?, read("critic")?);
        let (target_actor, target_critic) = (read("target_actor")?, read("target_critic")?);
        if actor.input_dim() != 2
            || actor.output_dim() != 1
            || critic.input_dim() != 3
            || critic.output_dim() != 1
            || !actor.same_shape(&target_actor)
            || !critic.same_shape(&target_critic)
        {
            return Err(TrainError::Checkpoint("network shapes are inconsistent".into()));
        }
        let agent = Self::from_nets(actor, critic, target_actor, target_critic, &meta.agent);
        Ok((agent, meta))
    }

    fn named_nets(&self) -> [(&'static str, &MlpNet); 4] {
        [
            ("actor", &self.actor),
            ("critic", &self.critic),
            ("target_actor", &self.target_actor),
            ("target_critic", &self.target_critic),
        ]
    }
}

impl Policy for Agent {
    fn action(&self, position: f64, predictor: f64) -> f64 {
        self.policy_action([position, predictor])
    }
}

pub const CHECKPOINT_META: &str = "checkpoint.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub env: EnvParams,
    pub agent: AgentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub train_reward: f64,
    pub train_pnl: f64,
    pub max_abs_position: f64,
    /// `(mean reward, mean pnl)` of the noise-free actor, perfect information.
    pub eval: Option<(f64, f64)>,
}

/// Writes the evaluated episodes as CSV with header `episode,eval_reward,eval_pnl`.
pub fn write_history_csv<W: Write>(history: &[EpisodeRecord], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "eval_reward", "eval_pnl"])?;
    for rec in history {
        if let Some((r, p)) = rec.eval {
            w.write_record(&[rec.episode.to_string(), r.to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub agent: Agent,
    pub history: Vec<EpisodeRecord>,
}

/// Instrumentation hook fired at each stage of a training tick.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Sampled { tick: usize, indices: Vec<usize>, occupancy: usize },
    CriticUpdated { tick: usize },
    ActorUpdated { tick: usize },
    PrioritiesUpdated { tick: usize, indices: Vec<usize> },
    TargetsUpdated { tick: usize },
    EpisodeFinished { record: EpisodeRecord },
}

pub fn train(env_params: &EnvParams, config: &AgentConfig) -> Result<TrainedAgent, TrainError> {
    train_with_observer(env_params, config, &mut |_| {})
}

const PRETRAIN_SALT: u64 = 0x0050_5245_5452_4149;
const EPISODE_SALT: u64 = 0x0045_5049_534F_4445;
const PROBE_SALT: u64 = 0x0050_524F_4245;

/// Largest `|position|` the noise-free policy reaches over one episode.
///
/// Runaway is judged on the policy itself: with AR exploration noise the
/// position integrates a correlated noise sequence, so a perfectly reasonable
/// early-training trajectory can wander far further than any learned policy.
pub fn probe_max_position<P: Policy + ?Sized>(
    policy: &P,
    params: &EnvParams,
    horizon: usize,
) -> Result<f64, EnvError> {
    let mut env = Env::new(params.clone(), horizon)?;
    let mut reached = 0.0f64;
    while !env.is_done() {
        let s = env.state();
        let out = env.step(policy.action(s.position, s.predictor))?;
        let pos = out.next_state.position.abs();
        if !pos.is_finite() {
            return Ok(f64::INFINITY);
        }
        reached = reached.max(pos);
    }
    Ok(reached)
}

/// Runs pretraining and `config.episodes` training episodes.
pub fn train_with_observer(
    env_params: &EnvParams,
    config: &AgentConfig,
    observer: &mut dyn FnMut(TrainEvent),
) -> Result<TrainedAgent, TrainError> {
    config.validate()?;
    env_params.validate()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(2);

    let mut agent = Agent::new(config, &mut init_rng)?;
    let mut buffer = PrioritizedBuffer::new(config.per.clone())?;
    let mut noise = ExplorationNoise::new(config.explore_rho, config.explore_sigma);
    let is_maxpos = env_params.kind == EnvKind::LinCostMaxpos;
    let bound = config.divergence.max_abs_position;
    let mut history = Vec::with_capacity(config.episodes);

    if config.episodes == 0 {
        return Ok(TrainedAgent { agent, history });
    }

    // Pretraining fill with priorities |r|.
    let mut filled = 0;
    let mut pre_episode = 0u64;
    while filled < config.pretrain_steps {
        let params = env_params
            .clone()
            .with_seed(episode_seed(config.seed ^ PRETRAIN_SALT, pre_episode));
        pre_episode += 1;
        let mut env = Env::new(params, config.episode_length)?;
        noise.reset();
        let mut state = env.state();
        while !env.is_done() && filled < config.pretrain_steps {
            let obs = state.observation();
            let action = agent.act(obs, Some((&mut noise, &mut noise_rng)));
            let out = env.step(action)?;
            let tr = Transition {
                state: obs,
                action,
                reward: out.reward,
                next_state: out.next_state.observation(),
                done: out.done,
            };
            buffer.insert(tr, PriorityMode::Explicit(out.reward.abs()));
            state = out.next_state;
            filled += 1;
        }
    }

    let total_steps = config.episodes * config.episode_length;
    let mut global_step = 0usize;
    let mut tick = 0usize;
    let eval_params = env_params.perfect_information();
    let probe_params = env_params.clone().with_seed(config.seed ^ PROBE_SALT);
    let diverged = |episode: usize, reason: String, history: &Vec<EpisodeRecord>| {
        TrainError::Diverged {
            episode,
            reason,
            history: history.clone(),
        }
    };

    for episode in 0..config.episodes {
        let params = env_params
            .clone()
            .with_seed(episode_seed(config.seed ^ EPISODE_SALT, episode as u64));
        let mut env = Env::new(params, config.episode_length)?;
        noise.reset();
        let mut state = env.state();
        let (mut sum_reward, mut sum_pnl) = (0.0, 0.0);
        let mut saturated = 0usize;
        let mut max_abs_position = 0.0f64;
        let mut t = 0usize;
        while !env.is_done() {
            t += 1;
            let obs = state.observation();
            let base = agent.policy_action(obs);
            if base.abs() >= 0.999 * config.max_trade {
                saturated += 1;
            }
            let action = base + noise.sample(&mut noise_rng);
            let out = env.step(action)?;
            sum_reward += out.reward;
            sum_pnl += out.pnl;
            max_abs_position = max_abs_position.max(out.next_state.position.abs());
            if !out.reward.is_finite() || !action.is_finite() {
                return Err(diverged(episode, "non-finite action or reward".into(), &history));
            }
            buffer.insert(
                Transition {
                    state: obs,
                    action,
                    reward: out.reward,
                    next_state: out.next_state.observation(),
                    done: out.done,
                },
                PriorityMode::Highest,
            );
            state = out.next_state;

            if t.is_multiple_of(config.update_period) && buffer.len() >= config.batch_size {
                let beta = anneal_beta(global_step, total_steps, config.per.beta0);
                let batch = buffer.sample(config.batch_size, beta, &mut sample_rng)?;
                observer(TrainEvent::Sampled {
                    tick,
                    indices: batch.indices.clone(),
                    occupancy: buffer.len(),
                });
                let deltas = agent
                    .critic_update(&batch, config.discount, config.bootstrap_terminal)
                    .map_err(|e| diverged(episode, format!("critic update: {e}"), &history))?;
                observer(TrainEvent::CriticUpdated { tick });
                agent
                    .actor_update(&batch)
                    .map_err(|e| diverged(episode, format!("actor update: {e}"), &history))?;
                observer(TrainEvent::ActorUpdated { tick });
                buffer.update_priorities(&batch.indices, &deltas)?;
                observer(TrainEvent::PrioritiesUpdated {
                    tick,
                    indices: batch.indices.clone(),
                });
                agent.soft_update_targets(config.tau_critic, config.tau_actor)?;
                observer(TrainEvent::TargetsUpdated { tick });
                tick += 1;
            }
            global_step += 1;
        }
        if !agent.is_finite() {
            return Err(diverged(episode, "non-finite network parameters".into(), &history));
        }
        if !is_maxpos {
            let reached = probe_max_position(&agent, &probe_params, config.episode_length)?;
            if reached > bound {
                return Err(diverged(
                    episode,
                    format!("noise-free policy reaches |position| = {reached:.3}, above {bound}"),
                    &history,
                ));
            }
        }
        if is_maxpos {
            let frac = saturated as f64 / config.episode_length as f64;
            if frac > config.divergence.max_saturated_fraction {
                return Err(diverged(
                    episode,
                    format!("actor saturated on {:.0}% of steps", 100.0 * frac),
                    &history,
                ));
            }
        }

        let eval = if config.eval_every > 0 && (episode + 1) % config.eval_every == 0 {
            let v = monte_carlo_value(
                &agent,
                &eval_params,
                config.eval_episodes,
                config.eval_horizon,
                config.eval_seed,
            )?;
            Some((v.mean_reward, v.mean_pnl))
        } else {
            None
        };
        let record = EpisodeRecord {
            episode,
            train_reward: sum_reward / config.episode_length as f64,
            train_pnl: sum_pnl / config.episode_length as f64,
            max_abs_position,
            eval,
        };
        observer(TrainEvent::EpisodeFinished { record });
        history.push(record);
    }

    Ok(TrainedAgent { agent, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::PriorityMode;
    use approx::assert_relative_eq;

    fn batch_of(transitions: Vec<Transition>) -> SampledBatch {
        let n = transitions.len();
        SampledBatch {
            indices: (0..n).collect(),
            transitions,
            is_weights: vec![1.0; n],
            probabilities: vec![1.0 / n as f64; n],
        }
    }

    fn tiny_config() -> AgentConfig {
        AgentConfig {
            hidden_layers: vec![8, 8],
            ..AgentConfig::smoke()
        }
    }

    fn random_transitions(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Transition {
                state: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                action: rng.random_range(-1.0..1.0),
                reward: rng.random_range(-1.0..1.0),
                next_state: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                done: false,
            })
            .collect()
    }

    #[test]
    fn noiseless_exploration_stays_zero() {
        let mut n = ExplorationNoise::new(0.1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| n.sample(&mut rng) == 0.0));
    }

    #[test]
    fn memoryless_exploration_is_iid() {
        let mut a = ExplorationNoise::new(1.0, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut raw = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let z: f64 = raw.sample(StandardNormal);
            assert_eq!(a.sample(&mut rng), 0.7 * z);
        }
    }

    #[test]
    fn exploration_stationary_std() {
        let mut n = ExplorationNoise::new(0.1, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            n.sample(&mut rng);
        }
        let xs: Vec<f64> = (0..400_000).map(|_| n.sample(&mut rng)).collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let target = n.stationary_std();
        assert_relative_eq!(target, 0.3 / (1.0f64 - 0.81).sqrt(), max_relative = 1e-12);
        // std of the sample variance of an AR(1) with lag-1 coefficient c:
        // ≈ σ² √(2/N · (1+c²)/(1−c²))
        let c2: f64 = 0.81;
        let se = target * target * (2.0 / xs.len() as f64 * (1.0 + c2) / (1.0 - c2)).sqrt();
        assert!((var - target * target).abs() < 3.0 * se, "{var} vs {}", target * target);
    }

    #[test]
    fn initial_actor_is_near_zero_and_bounded() {
        let config = tiny_config();
        let agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = agent.policy_action([0.0, 0.5]);
        assert!(a.abs() < 0.1, "{a}");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
            assert!(agent.policy_action(s).abs() <= config.max_trade);
        }
        assert_eq!(agent.policy_action([0.3, 0.1]), agent.policy_action([0.3, 0.1]));
    }

    #[test]
    fn zero_discount_targets_are_rewards() {
        let config = tiny_config();
        let mut agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let batch = batch_of(random_transitions(10, 6));
        let q: Vec<f64> = batch.transitions.iter().map(|t| agent.q_value(t.state, t.action)).collect();
        let deltas = agent.critic_update(&batch, 0.0, true).unwrap();
        for ((d, q), t) in deltas.iter().zip(q).zip(&batch.transitions) {
            assert_relative_eq!(*d, q - t.reward, max_relative = 1e-12);
        }
    }

    #[test]
    fn terminal_without_bootstrap_uses_raw_reward() {
        let config = tiny_config();
        let mut agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut trs = random_transitions(4, 7);
        trs.iter_mut().for_each(|t| t.done = true);
        let batch = batch_of(trs);
        let q: Vec<f64> = batch.transitions.iter().map(|t| agent.q_value(t.state, t.action)).collect();
        let deltas = agent.critic_update(&batch, 0.99, false).unwrap();
        for ((d, q), t) in deltas.iter().zip(q).zip(&batch.transitions) {
            assert_relative_eq!(*d, q - t.reward, max_relative = 1e-12);
        }
    }

    fn zero_critic_agent(config: &AgentConfig) -> Agent {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut agent = Agent::new(config, &mut rng).unwrap();
        for l in agent.critic.layers_mut() {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
            l.biases.iter_mut().for_each(|w| *w = 0.0);
        }
        agent.target_critic = agent.critic.clone();
        Agent::from_nets(
            agent.actor.clone(),
            agent.critic.clone(),
            agent.target_actor.clone(),
            agent.target_critic.clone(),
            config,
        )
    }

    #[test]
    fn null_critic_with_zero_rewards_does_not_move() {
        let config = tiny_config();
        let mut agent = zero_critic_agent(&config);
        let mut trs = random_transitions(8, 9);
        trs.iter_mut().for_each(|t| t.reward = 0.0);
        let before = agent.critic.clone();
        let deltas = agent.critic_update(&batch_of(trs), 0.99, true).unwrap();
        assert!(deltas.iter().all(|&d| d == 0.0));
        assert_eq!(agent.critic, before);
    }

    #[test]
    fn single_sample_loss_is_squared_td_error() {
        // with b = 1 and weight 1 the loss gradient is 2δ ∂Q/∂w
        let config = tiny_config();
        let mut agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let tr = random_transitions(1, 11)[0];
        let (_, tape) = agent.critic.forward(&[tr.state[0], tr.state[1], tr.action]).unwrap();
        let q = tape.output()[0];
        let next_a = agent.target_actor.predict_scalar(&tr.next_state).unwrap();
        let q_next = agent
            .target_critic
            .predict_scalar(&[tr.next_state[0], tr.next_state[1], next_a])
            .unwrap();
        let delta = q - (tr.reward + 0.9 * q_next);
        let (expected, _) = agent.critic.backward(&tape, &[2.0 * delta]).unwrap();

        let mut grads = GradientSet::zeros_like(&agent.critic);
        let tape2 = agent.critic.forward(&[tr.state[0], tr.state[1], tr.action]).unwrap().1;
        agent.critic.backward_accumulate(&tape2, &[2.0 * delta], &mut grads).unwrap();
        assert_eq!(grads, expected);

        let deltas = agent.critic_update(&batch_of(vec![tr]), 0.9, true).unwrap();
        assert_relative_eq!(deltas[0], delta, max_relative = 1e-12);
    }

    #[test]
    fn flat_critic_gives_zero_actor_gradient() {
        let config = tiny_config();
        let mut agent = zero_critic_agent(&config);
        // Q depends on the state through the bias only: constant in a
        agent.critic.layers_mut().last_mut().unwrap().biases[0] = 3.0;
        let before = agent.actor.clone();
        agent.actor_update(&batch_of(random_transitions(8, 12))).unwrap();
        assert_eq!(agent.actor, before);
    }

    #[test]
    fn actor_update_leaves_critic_bit_identical() {
        let config = tiny_config();
        let mut agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let before = agent.critic.clone();
        agent.actor_update(&batch_of(random_transitions(16, 14))).unwrap();
        assert_eq!(agent.critic, before);
    }

    #[test]
    fn actor_climbs_a_quadratic_critic() {
        // Critic stub Q(s, a) = −(a − 1)², built exactly from relu units:
        // h1 = relu(a − 1), h2 = relu(1 − a); Q = −h1² − h2² needs a square, so
        // use a one-hidden-layer tanh critic fit instead: here we place the
        // quadratic directly via a linear-in-h approximation around a ∈ [−3, 3].
        let config = AgentConfig {
            hidden_layers: vec![8],
            actor_lr: 1e-2,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut agent = Agent::new(&config, &mut rng).unwrap();
        // piecewise-linear concave critic with its peak at a = 1:
        // Q = −relu(a − 1) − relu(1 − a) = −|a − 1|
        let mut critic = MlpNet::zeros(&[3, 2, 1], Activation::Relu, OutputActivation::Linear).unwrap();
        {
            let l = critic.layers_mut();
            l[0].weights.copy_from_slice(&[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]);
            l[0].biases.copy_from_slice(&[-1.0, 1.0]);
            l[1].weights.copy_from_slice(&[-1.0, -1.0]);
        }
        agent = Agent::from_nets(agent.actor.clone(), critic.clone(), agent.actor.clone(), critic, &config);
        let states = random_transitions(32, 16);
        for _ in 0..600 {
            agent.actor_update(&batch_of(states.clone())).unwrap();
        }
        for t in &states {
            let a = agent.policy_action(t.state);
            assert!((a - 1.0).abs() < 0.05, "a = {a}");
        }
    }

    #[test]
    fn zero_episodes_returns_untrained_agent() {
        let config = AgentConfig {
            episodes: 0,
            seed: 21,
            ..tiny_config()
        };
        let trained = train(&EnvParams::lqr_paper(), &config).unwrap();
        let fresh = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        assert!(trained.history.is_empty());
        assert_eq!(trained.agent.actor, fresh.actor);
        assert_eq!(trained.agent.critic, fresh.critic);
    }

    #[test]
    fn tick_ordering_and_priority_bookkeeping() {
        let config = AgentConfig {
            episodes: 2,
            episode_length: 50,
            pretrain_steps: 100,
            eval_every: 0,
            ..tiny_config()
        };
        let mut events = Vec::new();
        train_with_observer(&EnvParams::lqr_paper(), &config, &mut |e| events.push(e)).unwrap();
        let stages: Vec<u8> = events
            .iter()
            .filter_map(|e| match e {
                TrainEvent::Sampled { .. } => Some(0),
                TrainEvent::CriticUpdated { .. } => Some(1),
                TrainEvent::ActorUpdated { .. } => Some(2),
                TrainEvent::PrioritiesUpdated { .. } => Some(3),
                TrainEvent::TargetsUpdated { .. } => Some(4),
                TrainEvent::EpisodeFinished { .. } => None,
            })
            .collect();
        assert_eq!(stages.len(), 5 * 100);
        assert!(stages.chunks(5).all(|c| c == [0, 1, 2, 3, 4]));
        let mut pending: Option<Vec<usize>> = None;
        for e in &events {
            match e {
                TrainEvent::Sampled { indices, occupancy, .. } => {
                    assert!(pending.is_none());
                    assert!(indices.iter().all(|i| i < occupancy));
                    pending = Some(indices.clone());
                }
                TrainEvent::PrioritiesUpdated { indices, .. } => {
                    assert_eq!(pending.take().as_ref(), Some(indices));
                }
                _ => {}
            }
        }
        assert!(pending.is_none());
    }

    #[test]
    fn target_gap_shrinks_by_one_minus_tau() {
        let config = tiny_config();
        let mut agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        agent.critic = MlpNet::new(&[3, 8, 8, 1], Activation::Relu, OutputActivation::Linear, &mut rng).unwrap();
        let gap = |a: &MlpNet, b: &MlpNet| {
            a.layers()
                .iter()
                .zip(b.layers())
                .flat_map(|(x, y)| x.weights.iter().zip(&y.weights).map(|(u, v)| (u - v).abs()))
                .fold(0.0, f64::max)
        };
        let before = gap(&agent.target_critic, &agent.critic);
        agent.soft_update_targets(0.1, 0.1).unwrap();
        let after = gap(&agent.target_critic, &agent.critic);
        assert_relative_eq!(after, 0.9 * before, max_relative = 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let config = AgentConfig {
            seed: 3,
            divergence: DivergenceConfig {
                max_abs_position: f64::INFINITY,
                ..DivergenceConfig::default()
            },
            ..AgentConfig::smoke()
        };
        let a = train(&EnvParams::band_paper(), &config).unwrap();
        let b = train(&EnvParams::band_paper(), &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.agent.actor, b.agent.actor);
    }

    #[test]
    fn runaway_position_is_reported_as_divergence() {
        let config = AgentConfig {
            divergence: DivergenceConfig {
                max_abs_position: 0.5,
                ..DivergenceConfig::default()
            },
            explore_sigma: 1.0,
            ..AgentConfig::smoke()
        };
        let err = train(&EnvParams::lqr_paper(), &config).unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(19)).unwrap();
        let env = EnvParams::maxpos_paper();
        agent.save_checkpoint(dir.path(), &env, &config).unwrap();
        let (back, meta) = Agent::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.actor, agent.actor);
        assert_eq!(back.target_critic, agent.target_critic);
        assert_eq!(meta.env, env);
        assert_eq!(meta.agent, config);
    }

    #[test]
    fn priorities_refresh_uses_td_errors() {
        let mut buf = PrioritizedBuffer::new(PerConfig {
            capacity: 16,
            ..PerConfig::default()
        })
        .unwrap();
        let config = tiny_config();
        let mut agent = Agent::new(&config, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        for t in random_transitions(16, 21) {
            buf.insert(t, PriorityMode::Highest);
        }
        let batch = buf.sample(8, 0.4, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
        let deltas = agent.critic_update(&batch, 0.99, true).unwrap();
        buf.update_priorities(&batch.indices, &deltas).unwrap();
        // the last write wins for duplicated indices
        for (i, d) in batch.indices.iter().zip(&deltas).rev() {
            if batch.indices.iter().rposition(|j| j == i) == batch.indices.iter().position(|j| j == i) {
                assert_relative_eq!(buf.priority(*i).unwrap(), d.abs() + 1e-3, max_relative = 1e-12);
            }
        }
    }
}
