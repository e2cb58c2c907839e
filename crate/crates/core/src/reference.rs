//! Reference policies: the closed-form LQR solution, the symmetric no-trade band
//! and the maxpos threshold controller, plus the Monte-Carlo grid search used to
//! pin the band half-width and the threshold.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{episode_seed, Env, EnvError, EnvKind, EnvParams, Policy};

#[derive(Debug, Error, PartialEq)]
pub enum ReferenceError {
    #[error("f_c requires a strictly positive argument, got {0}")]
    NonPositiveArgument(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// `f_c(x) = 2 / (1 + √(1 + 4/x²))`, the EMA weight of the optimal LQR portfolio.
pub fn f_c(x: f64) -> Result<f64, ReferenceError> {
    if !(x > 0.0) {
        return Err(ReferenceError::NonPositiveArgument(x));
    }
    Ok(2.0 / (1.0 + (1.0 + 4.0 / (x * x)).sqrt()))
}

/// Algebraically equal form `x/2 · (√(x² + 4) − x)`, kept as a cross-check of
/// [`f_c`].
///
/// For large `x` the difference `√(x² + 4) − x` cancels, so the square root is
/// corrected with its exact FMA residual `x² + 4 − s²` before subtracting.
pub fn f_c_alt(x: f64) -> Result<f64, ReferenceError> {
    if !(x > 0.0) {
        return Err(ReferenceError::NonPositiveArgument(x));
    }
    let s = (x * x + 4.0).sqrt();
    let (sq, sq_err) = (s * s, s.mul_add(s, -(s * s)));
    let (xq, xq_err) = (x * x, x.mul_add(x, -(x * x)));
    let residual = (xq - sq) + 4.0 + (xq_err - sq_err);
    let diff = (s - x) + residual / (2.0 * s);
    Ok(0.5 * x * diff)
}

/// Optimal linear policy of the quadratic-cost / quadratic-risk environment:
/// `π_{t+1} = (1−ω) π_t + ω ψ p_t / (2λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    pub omega: f64,
    pub psi: f64,
    pub markowitz_scale: f64,
}

pub fn solve_lqr(gamma_cost: f64, lambda_risk: f64, rho: f64) -> Result<LqrSolution, ReferenceError> {
    if !(lambda_risk > 0.0) || !lambda_risk.is_finite() {
        return Err(ReferenceError::InvalidParams("lambda_risk must be > 0".into()));
    }
    if !(gamma_cost >= 0.0) || !gamma_cost.is_finite() {
        return Err(ReferenceError::InvalidParams("gamma_cost must be >= 0".into()));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(ReferenceError::InvalidParams("rho must lie in [0, 1)".into()));
    }
    let markowitz_scale = 1.0 / (2.0 * lambda_risk);
    if gamma_cost == 0.0 {
        // costless: trade straight to the Markowitz position
        return Ok(LqrSolution {
            omega: 1.0,
            psi: 1.0,
            markowitz_scale,
        });
    }
    let omega = f_c((lambda_risk / gamma_cost).sqrt())?;
    let psi = omega / (1.0 - (1.0 - omega) * rho);
    Ok(LqrSolution {
        omega,
        psi,
        markowitz_scale,
    })
}

impl LqrSolution {
    /// Gains `(k₁, k₂)` of the equivalent linear rule `a = −k₁ π + k₂ p`.
    pub fn gains(&self) -> (f64, f64) {
        (self.omega, self.omega * self.psi * self.markowitz_scale)
    }
}

impl Policy for LqrSolution {
    fn action(&self, position: f64, predictor: f64) -> f64 {
        -self.omega * position + self.omega * self.psi * predictor * self.markowitz_scale
    }
}

/// Constant-width no-trade band around the Markowitz position `p/(2λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSolution {
    pub half_width: f64,
    pub markowitz_scale: f64,
}

impl Policy for BandSolution {
    fn action(&self, position: f64, predictor: f64) -> f64 {
        let center = predictor * self.markowitz_scale;
        let (lower, upper) = (center - self.half_width, center + self.half_width);
        if position > upper {
            upper - position
        } else if position < lower {
            lower - position
        } else {
            0.0
        }
    }
}

/// Bang-bang controller: jump to `±M` once `|p|` exceeds `q`, hold otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSolution {
    pub threshold: f64,
    pub maxpos: f64,
}

impl Policy for ThresholdSolution {
    fn action(&self, position: f64, predictor: f64) -> f64 {
        if predictor > self.threshold {
            self.maxpos - position
        } else if predictor < -self.threshold {
            -self.maxpos - position
        } else {
            0.0
        }
    }
}

/// Reference policy for any of the three environments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum ReferencePolicy {
    Lqr(LqrSolution),
    Band(BandSolution),
    Threshold(ThresholdSolution),
}

impl Policy for ReferencePolicy {
    fn action(&self, position: f64, predictor: f64) -> f64 {
        match self {
            ReferencePolicy::Lqr(s) => s.action(position, predictor),
            ReferencePolicy::Band(s) => s.action(position, predictor),
            ReferencePolicy::Threshold(s) => s.action(position, predictor),
        }
    }
}

impl ReferencePolicy {
    /// Name/value pairs of the solved parameters, for printing.
    pub fn describe(&self) -> Vec<(&'static str, f64)> {
        match self {
            ReferencePolicy::Lqr(s) => vec![
                ("omega", s.omega),
                ("psi", s.psi),
                ("markowitz_scale", s.markowitz_scale),
            ],
            ReferencePolicy::Band(s) => vec![
                ("half_width", s.half_width),
                ("markowitz_scale", s.markowitz_scale),
            ],
            ReferencePolicy::Threshold(s) => {
                vec![("threshold", s.threshold), ("maxpos", s.maxpos)]
            }
        }
    }
}

/// Mean per-step reward and PnL of one parameter setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridValue {
    pub mean_reward: f64,
    pub mean_pnl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub param: f64,
    pub value: GridValue,
}

/// Evenly spaced grid `lo..=hi` with `n_points` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n_points: usize) -> Self {
        Self { lo, hi, n_points }
    }

    pub fn validate(&self) -> Result<(), ReferenceError> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(ReferenceError::InvalidGrid("need lo < hi".into()));
        }
        if self.n_points < 2 {
            return Err(ReferenceError::InvalidGrid("need at least 2 points".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.n_points)
            .map(|i| if i + 1 == self.n_points { self.hi } else { self.lo + h * i as f64 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub best_param: f64,
    pub best_value: GridValue,
    /// Every evaluated point, sorted by parameter.
    pub points: Vec<GridPoint>,
}

impl GridSearch {
    /// CSV with header `param,mean_reward,mean_pnl`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["param", "mean_reward", "mean_pnl"])?;
        for pt in &self.points {
            w.write_record(&[
                pt.param.to_string(),
                pt.value.mean_reward.to_string(),
                pt.value.mean_pnl.to_string(),
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

fn argmax(points: &[GridPoint]) -> usize {
    // strict comparison in increasing-param order keeps the smaller param on ties
    let mut best = 0;
    for (i, pt) in points.iter().enumerate().skip(1) {
        if pt.value.mean_reward > points[best].value.mean_reward {
            best = i;
        }
    }
    best
}

/// Maximizes `objective(param, seed)` over `grid`, every point evaluated with the
/// same `seed` (common random numbers). With `refine`, a second pass evaluates a
/// grid ten times finer on the two coarse cells around the first argmax.
pub fn grid_search_scalar<F>(
    objective: F,
    grid: GridSpec,
    seed: u64,
    refine: bool,
) -> Result<GridSearch, ReferenceError>
where
    F: Fn(f64, u64) -> GridValue + Sync,
{
    grid.validate()?;
    let eval = |params: Vec<f64>| -> Vec<GridPoint> {
        params
            .into_par_iter()
            .map(|param| GridPoint {
                param,
                value: objective(param, seed),
            })
            .collect()
    };
    let mut points = eval(grid.points());
    if refine {
        let coarse_best = points[argmax(&points)].param;
        let h = grid.step();
        let lo = (coarse_best - h).max(grid.lo);
        let hi = (coarse_best + h).min(grid.hi);
        let n = ((hi - lo) / (h / 10.0)).round() as usize + 1;
        let fine: Vec<f64> = GridSpec::new(lo, hi, n.max(2))
            .points()
            .into_iter()
            .filter(|x| !points.iter().any(|p| (p.param - x).abs() < 1e-12 * (1.0 + x.abs())))
            .collect();
        points.extend(eval(fine));
        points.sort_by(|a, b| a.param.total_cmp(&b.param));
    }
    let best = argmax(&points);
    Ok(GridSearch {
        best_param: points[best].param,
        best_value: points[best].value,
        points,
    })
}

/// Mean per-step reward and PnL of `policy` over `episodes` independent
/// episodes. Episode `e` is seeded with `episode_seed(seed, e)`, so two calls
/// with the same seed see identical predictor paths.
pub fn monte_carlo_value<P: Policy + ?Sized>(
    policy: &P,
    params: &EnvParams,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<GridValue, EnvError> {
    let (mut reward, mut pnl) = (0.0, 0.0);
    for e in 0..episodes {
        let mut env = Env::new(params.clone().with_seed(episode_seed(seed, e as u64)), horizon)?;
        let mut state = env.state();
        while !env.is_done() {
            let out = env.step(policy.action(state.position, state.predictor))?;
            reward += out.reward;
            pnl += out.pnl;
            state = out.next_state;
        }
    }
    let n = (episodes * horizon).max(1) as f64;
    Ok(GridValue {
        mean_reward: reward / n,
        mean_pnl: pnl / n,
    })
}

/// Monte-Carlo budget and grids for solving the band and threshold references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceSearch {
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    pub band_grid: GridSpec,
    pub threshold_grid: GridSpec,
    pub refine: bool,
}

impl Default for ReferenceSearch {
    fn default() -> Self {
        Self {
            episodes: 20,
            horizon: 5000,
            seed: 0x5EED,
            band_grid: GridSpec::new(0.0, 2.0, 81),
            threshold_grid: GridSpec::new(0.0, 1.0, 101),
            refine: true,
        }
    }
}

/// Solves (or grid-searches) the reference for `params`. Reference policies are
/// always scored in perfect-information mode.
pub fn solve_reference(
    params: &EnvParams,
    search: &ReferenceSearch,
) -> Result<(ReferencePolicy, Option<GridSearch>), ReferenceError> {
    params.validate()?;
    let clean = params.perfect_information();
    match params.kind {
        EnvKind::QuadCostQuadRisk => {
            let sol = solve_lqr(params.gamma_cost, params.lambda(), params.rho)?;
            Ok((ReferencePolicy::Lqr(sol), None))
        }
        EnvKind::LinCostQuadRisk => {
            let lambda = params.lambda();
            if !(lambda > 0.0) {
                return Err(ReferenceError::InvalidParams("lambda_risk must be > 0".into()));
            }
            let markowitz_scale = 1.0 / (2.0 * lambda);
            let objective = |b: f64, seed: u64| {
                let policy = BandSolution {
                    half_width: b,
                    markowitz_scale,
                };
                monte_carlo_value(&policy, &clean, search.episodes, search.horizon, seed)
                    .expect("validated parameters")
            };
            let gs = grid_search_scalar(objective, search.band_grid, search.seed, search.refine)?;
            let sol = BandSolution {
                half_width: gs.best_param,
                markowitz_scale,
            };
            Ok((ReferencePolicy::Band(sol), Some(gs)))
        }
        EnvKind::LinCostMaxpos => {
            let maxpos = params.maxpos.unwrap_or_default();
            let objective = |q: f64, seed: u64| {
                let policy = ThresholdSolution {
                    threshold: q,
                    maxpos,
                };
                monte_carlo_value(&policy, &clean, search.episodes, search.horizon, seed)
                    .expect("validated parameters")
            };
            let gs =
                grid_search_scalar(objective, search.threshold_grid, search.seed, search.refine)?;
            let sol = ThresholdSolution {
                threshold: gs.best_param,
                maxpos,
            };
            Ok((ReferencePolicy::Threshold(sol), Some(gs)))
        }
    }
}
