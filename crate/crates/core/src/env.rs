//! Single-asset trading environments driven by an AR(1) predictor.
//!
//! The state is the pair (position, predictor). An action is a trade that moves
//! the position; the reward for that trade is booked against the predictor
//! observed when acting, and only then does the predictor advance.
//!
//! Three reward shapes are available through [`EnvKind`]:
//!
//! | kind               | cost        | risk / constraint                  |
//! |--------------------|-------------|------------------------------------|
//! | `QuadCostQuadRisk` | `Γ a²`      | `λ π²`                             |
//! | `LinCostQuadRisk`  | `Γ |a|`     | `λ π²`                             |
//! | `LinCostMaxpos`    | `Γ |a|`     | `|π| ≤ M`, optional tanh barrier   |

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment parameters: {0}")]
    InvalidParams(String),
    #[error("episode is done; call reset before stepping again")]
    EpisodeDone,
    #[error("horizon must be at least 1")]
    ZeroHorizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    QuadCostQuadRisk,
    LinCostQuadRisk,
    LinCostMaxpos,
}

impl EnvKind {
    pub fn uses_quadratic_risk(self) -> bool {
        !matches!(self, EnvKind::LinCostMaxpos)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            EnvKind::QuadCostQuadRisk => "lqr",
            EnvKind::LinCostQuadRisk => "band",
            EnvKind::LinCostMaxpos => "maxpos",
        }
    }
}

/// Smooth penalty `β·{tanh[α(|π + a| − (1+γ)M)] + 1}` on the pre-clipping position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub beta_bar: f64,
    pub alpha_bar: f64,
    pub gamma_bar: f64,
}

impl Default for BarrierParams {
    fn default() -> Self {
        Self {
            beta_bar: 10.0,
            alpha_bar: 10.0,
            gamma_bar: 0.25,
        }
    }
}

impl BarrierParams {
    pub fn penalty(&self, unclipped_position: f64, maxpos: f64) -> f64 {
        let shifted = unclipped_position.abs() - (1.0 + self.gamma_bar) * maxpos;
        self.beta_bar * ((self.alpha_bar * shifted).tanh() + 1.0)
    }
}

/// Static description of one environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvParams {
    pub kind: EnvKind,
    pub rho: f64,
    pub gamma_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maxpos: Option<f64>,
    #[serde(default)]
    pub noisy_rewards: bool,
    #[serde(default)]
    pub sigma_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier: Option<BarrierParams>,
    #[serde(default)]
    pub seed: u64,
}

impl EnvParams {
    pub fn lqr(gamma_cost: f64, lambda_risk: f64, rho: f64) -> Self {
        Self {
            kind: EnvKind::QuadCostQuadRisk,
            rho,
            gamma_cost,
            lambda_risk: Some(lambda_risk),
            maxpos: None,
            noisy_rewards: false,
            sigma_r: 0.0,
            barrier: None,
            seed: 0,
        }
    }

    pub fn band(gamma_cost: f64, lambda_risk: f64, rho: f64) -> Self {
        Self {
            kind: EnvKind::LinCostQuadRisk,
            ..Self::lqr(gamma_cost, lambda_risk, rho)
        }
    }

    pub fn maxpos(gamma_cost: f64, maxpos: f64, rho: f64, barrier: Option<BarrierParams>) -> Self {
        Self {
            kind: EnvKind::LinCostMaxpos,
            rho,
            gamma_cost,
            lambda_risk: None,
            maxpos: Some(maxpos),
            noisy_rewards: false,
            sigma_r: 0.0,
            barrier,
            seed: 0,
        }
    }

    /// `Γ = 1, λ = 0.3, ρ = 0.9`.
    pub fn lqr_paper() -> Self {
        Self::lqr(1.0, 0.3, 0.9)
    }

    /// `Γ = 4, λ = 0.3, ρ = 0.9`.
    pub fn band_paper() -> Self {
        Self::band(4.0, 0.3, 0.9)
    }

    /// `Γ = 4, M = 2, ρ = 0.9` with the default tanh barrier.
    pub fn maxpos_paper() -> Self {
        Self::maxpos(4.0, 2.0, 0.9, Some(BarrierParams::default()))
    }

    pub fn with_noise(mut self, sigma_r: f64) -> Self {
        self.noisy_rewards = sigma_r > 0.0;
        self.sigma_r = sigma_r;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Same dynamics and rewards with the return noise switched off.
    pub fn perfect_information(&self) -> Self {
        let mut p = self.clone();
        p.noisy_rewards = false;
        p.sigma_r = 0.0;
        p
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_risk.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::InvalidParams(msg.to_owned()));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.gamma_cost >= 0.0) || !self.gamma_cost.is_finite() {
            return bad("gamma_cost must be finite and >= 0");
        }
        match (self.kind.uses_quadratic_risk(), self.lambda_risk) {
            (true, None) => return bad("lambda_risk is required for quadratic-risk kinds"),
            (true, Some(l)) if !(l >= 0.0) || !l.is_finite() => {
                return bad("lambda_risk must be finite and >= 0")
            }
            (false, Some(_)) => return bad("lambda_risk is only valid for quadratic-risk kinds"),
            _ => {}
        }
        match (self.kind, self.maxpos) {
            (EnvKind::LinCostMaxpos, None) => return bad("maxpos is required for the maxpos kind"),
            (EnvKind::LinCostMaxpos, Some(m)) if !(m > 0.0) || !m.is_finite() => {
                return bad("maxpos must be finite and > 0")
            }
            (EnvKind::LinCostMaxpos, _) => {}
            (_, Some(_)) => return bad("maxpos is only valid for the maxpos kind"),
            _ => {}
        }
        if let Some(b) = &self.barrier {
            if self.kind != EnvKind::LinCostMaxpos {
                return bad("barrier is only valid for the maxpos kind");
            }
            if !(b.alpha_bar > 0.0 && b.beta_bar > 0.0 && b.gamma_bar > 0.0) {
                return bad("barrier parameters must be strictly positive");
            }
        }
        if !(self.sigma_r >= 0.0) || !self.sigma_r.is_finite() {
            return bad("sigma_r must be finite and >= 0");
        }
        if !self.noisy_rewards && self.sigma_r != 0.0 {
            return bad("sigma_r must be 0 when noisy_rewards is false");
        }
        Ok(())
    }
}

/// Observable state plus episode bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: f64,
    pub predictor: f64,
    pub step_index: usize,
    pub horizon: usize,
}

impl EnvState {
    pub fn observation(&self) -> [f64; 2] {
        [self.position, self.predictor]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    /// Gain minus cost, computed with the (possibly noisy) realized return.
    pub pnl: f64,
    /// Gain minus cost, computed with the predictor in place of the return.
    pub pnl_true: f64,
    /// Reward computed with the predictor in place of the return.
    pub reward_true: f64,
    pub risk: f64,
    pub barrier: f64,
    pub next_state: EnvState,
    pub done: bool,
    /// Trade actually applied to the position, after clipping.
    pub executed_action: f64,
}

/// One experience tuple. `action` is the trade the agent submitted, before any
/// position clipping, so that the barrier term stays a function of it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: [f64; 2],
    pub action: f64,
    pub reward: f64,
    pub next_state: [f64; 2],
    pub done: bool,
}

/// Advances the predictor by one step given a standard-normal `innovation`.
///
/// The innovation is scaled by `√(1−ρ²)` so that the stationary variance is one.
pub fn predictor_step(p: f64, rho: f64, innovation: f64) -> f64 {
    rho * p + (1.0 - rho * rho).sqrt() * innovation
}

/// Per-step reward pieces for trading `action` from `position` while the
/// realized return is `gain_signal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParts {
    pub next_position: f64,
    pub executed_action: f64,
    pub gain: f64,
    pub cost: f64,
    pub risk: f64,
    pub barrier: f64,
}

impl RewardParts {
    pub fn compute(params: &EnvParams, position: f64, action: f64, gain_signal: f64) -> Self {
        let unclipped = position + action;
        let (next_position, barrier) = match params.kind {
            EnvKind::LinCostMaxpos => {
                let m = params.maxpos.unwrap_or(f64::INFINITY);
                let barrier = params
                    .barrier
                    .map_or(0.0, |b| b.penalty(unclipped, m));
                (unclipped.clamp(-m, m), barrier)
            }
            _ => (unclipped, 0.0),
        };
        let executed_action = next_position - position;
        let cost = match params.kind {
            EnvKind::QuadCostQuadRisk => params.gamma_cost * executed_action * executed_action,
            _ => params.gamma_cost * executed_action.abs(),
        };
        let risk = params.lambda() * next_position * next_position;
        Self {
            next_position,
            executed_action,
            gain: next_position * gain_signal,
            cost,
            risk,
            barrier,
        }
    }

    pub fn pnl(&self) -> f64 {
        self.gain - self.cost
    }

    pub fn reward(&self) -> f64 {
        self.pnl() - self.risk - self.barrier
    }
}

/// A running environment. Owns two RNG streams: one for the predictor path and
/// one for the return noise, so that noisy and noiseless instances built from
/// the same seed see the same predictor path.
#[derive(Debug, Clone)]
pub struct Env {
    params: EnvParams,
    horizon: usize,
    state: EnvState,
    predictor_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    done: bool,
}

impl Env {
    /// Builds an environment seeded from `params.seed` and performs the first reset.
    pub fn new(params: EnvParams, horizon: usize) -> Result<Self, EnvError> {
        params.validate()?;
        if horizon == 0 {
            return Err(EnvError::ZeroHorizon);
        }
        let mut predictor_rng = ChaCha8Rng::seed_from_u64(params.seed);
        predictor_rng.set_stream(0);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(params.seed);
        noise_rng.set_stream(1);
        let mut env = Self {
            params,
            horizon,
            state: EnvState {
                position: 0.0,
                predictor: 0.0,
                step_index: 0,
                horizon,
            },
            predictor_rng,
            noise_rng,
            done: false,
        };
        env.reset();
        Ok(env)
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts a new episode: flat position, predictor drawn from N(0, 1).
    pub fn reset(&mut self) -> EnvState {
        let predictor: f64 = self.predictor_rng.sample(StandardNormal);
        self.state = EnvState {
            position: 0.0,
            predictor,
            step_index: 0,
            horizon: self.horizon,
        };
        self.done = false;
        self.state
    }

    pub fn step(&mut self, action: f64) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let EnvState {
            position,
            predictor,
            step_index,
            horizon,
        } = self.state;

        let gain_signal = if self.params.noisy_rewards {
            let eta: f64 = self.noise_rng.sample(StandardNormal);
            predictor + self.params.sigma_r * eta
        } else {
            predictor
        };
        let parts = RewardParts::compute(&self.params, position, action, gain_signal);
        let true_parts = if self.params.noisy_rewards {
            RewardParts::compute(&self.params, position, action, predictor)
        } else {
            parts
        };

        let innovation: f64 = self.predictor_rng.sample(StandardNormal);
        let next_predictor = predictor_step(predictor, self.params.rho, innovation);
        let next_index = step_index + 1;
        self.done = next_index == horizon;
        self.state = EnvState {
            position: parts.next_position,
            predictor: next_predictor,
            step_index: next_index,
            horizon,
        };
        Ok(StepResult {
            reward: parts.reward(),
            pnl: parts.pnl(),
            pnl_true: true_parts.pnl(),
            reward_true: true_parts.reward(),
            risk: parts.risk,
            barrier: parts.barrier,
            next_state: self.state,
            done: self.done,
            executed_action: parts.executed_action,
        })
    }
}

/// Anything that maps an observed `(position, predictor)` pair to a trade.
pub trait Policy {
    fn action(&self, position: f64, predictor: f64) -> f64;
}

impl<F: Fn(f64, f64) -> f64> Policy for F {
    fn action(&self, position: f64, predictor: f64) -> f64 {
        self(position, predictor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep {
    pub t: usize,
    /// Position before the trade.
    pub pi: f64,
    pub p: f64,
    pub action: f64,
    pub reward: f64,
    pub pnl: f64,
    pub pnl_true: f64,
    pub reward_true: f64,
    pub next_pi: f64,
    pub next_p: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    fn mean_of(&self, f: impl Fn(&TrajectoryStep) -> f64) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(f).sum::<f64>() / self.steps.len() as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.mean_of(|s| s.reward)
    }

    pub fn mean_pnl(&self) -> f64 {
        self.mean_of(|s| s.pnl)
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        let last = self.steps.len().saturating_sub(1);
        self.steps.iter().enumerate().map(move |(i, s)| Transition {
            state: [s.pi, s.p],
            action: s.action,
            reward: s.reward,
            next_state: [s.next_pi, s.next_p],
            done: i == last,
        })
    }

    /// CSV with header `t,pi,p,action,reward,pnl`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "pi", "p", "action", "reward", "pnl"])?;
        for s in &self.steps {
            w.write_record(&[
                s.t.to_string(),
                s.pi.to_string(),
                s.p.to_string(),
                s.action.to_string(),
                s.reward.to_string(),
                s.pnl.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> csv::Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Runs one episode of `policy` on a fresh environment seeded from `params.seed`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    params: &EnvParams,
    horizon: usize,
) -> Result<Trajectory, EnvError> {
    let mut env = Env::new(params.clone(), horizon)?;
    let mut steps = Vec::with_capacity(horizon);
    let mut state = env.state();
    while !env.is_done() {
        let action = policy.action(state.position, state.predictor);
        let out = env.step(action)?;
        steps.push(TrajectoryStep {
            t: state.step_index,
            pi: state.position,
            p: state.predictor,
            action: out.executed_action,
            reward: out.reward,
            pnl: out.pnl,
            pnl_true: out.pnl_true,
            reward_true: out.reward_true,
            next_pi: out.next_state.position,
            next_p: out.next_state.predictor,
        });
        state = out.next_state;
    }
    Ok(Trajectory { steps })
}

/// Derives an independent per-episode seed from a base seed.
pub fn episode_seed(base: u64, episode: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base
        .wrapping_add(episode.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
