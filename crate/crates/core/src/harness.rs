//! Out-of-sample evaluation, seed summaries and policy-visualisation exports.
//!
//! The agent and the reference are run on coupled environments: episode `e`
//! of both uses the same seed, so they see the same predictor path and the
//! same return noise. `diff_l1` is only meaningful under that coupling.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{episode_seed, Env, EnvError, EnvParams, Policy};

/// Trades with larger magnitude are clipped to this value in grid exports.
pub const DISPLAY_CLIP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    /// Mean reward with the return noise removed (equals `mean_reward` in
    /// perfect-information mode).
    pub mean_reward_true: f64,
    pub mean_pnl: f64,
    pub mean_pnl_true: f64,
    /// Per-step mean of `|π_policy − π_reference|` over post-trade positions.
    pub diff_l1: f64,
    pub n_episodes: usize,
    pub horizon: usize,
}

/// Runs `policy` and `reference` on coupled environments.
pub fn evaluate<P, R>(
    policy: &P,
    reference: &R,
    params: &EnvParams,
    n_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport, EnvError>
where
    P: Policy + ?Sized,
    R: Policy + ?Sized,
{
    let mut sums = [0.0f64; 5];
    for e in 0..n_episodes {
        let episode_params = params.clone().with_seed(episode_seed(seed, e as u64));
        let mut agent_env = Env::new(episode_params.clone(), horizon)?;
        let mut ref_env = Env::new(episode_params, horizon)?;
        let (mut a, mut r) = (agent_env.state(), ref_env.state());
        while !agent_env.is_done() {
            let out = agent_env.step(policy.action(a.position, a.predictor))?;
            let ref_out = ref_env.step(reference.action(r.position, r.predictor))?;
            sums[0] += out.reward;
            sums[1] += out.reward_true;
            sums[2] += out.pnl;
            sums[3] += out.pnl_true;
            sums[4] += (out.next_state.position - ref_out.next_state.position).abs();
            a = out.next_state;
            r = ref_out.next_state;
        }
    }
    let n = (n_episodes * horizon).max(1) as f64;
    Ok(EvalReport {
        mean_reward: sums[0] / n,
        mean_reward_true: sums[1] / n,
        mean_pnl: sums[2] / n,
        mean_pnl_true: sums[3] / n,
        diff_l1: sums[4] / n,
        n_episodes,
        horizon,
    })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let h = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + h * i as f64 })
                .collect()
        }
    }
}

/// Actions against the predictor at a few fixed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySlice {
    pub positions: Vec<f64>,
    pub predictor_grid: Vec<f64>,
    /// `actions[i][j]` is the trade at `positions[i]`, `predictor_grid[j]`.
    pub actions: Vec<Vec<f64>>,
}

pub const DEFAULT_SLICE_POSITIONS: [f64; 3] = [-1.0, 0.0, 1.0];

pub fn policy_slice<P: Policy + ?Sized>(
    policy: &P,
    positions: &[f64],
    p_range: (f64, f64),
    n_points: usize,
) -> PolicySlice {
    let predictor_grid = linspace(p_range.0, p_range.1, n_points.max(2));
    let actions = positions
        .iter()
        .map(|&pi| predictor_grid.iter().map(|&p| policy.action(pi, p)).collect())
        .collect();
    PolicySlice {
        positions: positions.to_vec(),
        predictor_grid,
        actions,
    }
}

impl PolicySlice {
    /// Long format with header `position,p,action`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["position", "p", "action"])?;
        for (pi, row) in self.positions.iter().zip(&self.actions) {
            for (p, a) in self.predictor_grid.iter().zip(row) {
                w.write_record(&[pi.to_string(), p.to_string(), a.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Dense evaluation over the `(π, p)` plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrid {
    pub pi_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    /// `actions[i][j]` is the raw trade at `pi_grid[i]`, `p_grid[j]`.
    pub actions: Vec<Vec<f64>>,
}

pub fn policy_grid<P: Policy + ?Sized>(
    policy: &P,
    pi_range: (f64, f64),
    p_range: (f64, f64),
    resolution: usize,
) -> PolicyGrid {
    let pi_grid = linspace(pi_range.0, pi_range.1, resolution.max(2));
    let p_grid = linspace(p_range.0, p_range.1, resolution.max(2));
    let actions = pi_grid
        .iter()
        .map(|&pi| p_grid.iter().map(|&p| policy.action(pi, p)).collect())
        .collect();
    PolicyGrid {
        pi_grid,
        p_grid,
        actions,
    }
}

impl PolicyGrid {
    /// Long format with header `pi,p,action,action_clipped`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["pi", "p", "action", "action_clipped"])?;
        for (pi, row) in self.pi_grid.iter().zip(&self.actions) {
            for (p, a) in self.p_grid.iter().zip(row) {
                let clipped = a.clamp(-DISPLAY_CLIP, DISPLAY_CLIP);
                w.write_record(&[pi.to_string(), p.to_string(), a.to_string(), clipped.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluation outcome of one training seed; `report` is `None` if it diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub report: Option<EvalReport>,
}

/// Writes one row per seed:
/// `seed,status,mean_reward,mean_reward_true,mean_pnl,mean_pnl_true,diff_l1,n_episodes,horizon`.
pub fn write_reports_csv<W: Write>(results: &[SeedResult], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "seed",
        "status",
        "mean_reward",
        "mean_reward_true",
        "mean_pnl",
        "mean_pnl_true",
        "diff_l1",
        "n_episodes",
        "horizon",
    ])?;
    for r in results {
        match &r.report {
            Some(rep) => w.write_record(&[
                r.seed.to_string(),
                "ok".to_string(),
                rep.mean_reward.to_string(),
                rep.mean_reward_true.to_string(),
                rep.mean_pnl.to_string(),
                rep.mean_pnl_true.to_string(),
                rep.diff_l1.to_string(),
                rep.n_episodes.to_string(),
                rep.horizon.to_string(),
            ])?,
            None => {
                let mut row = vec![r.seed.to_string(), "diverged".to_string()];
                row.extend(std::iter::repeat_n(String::new(), 7));
                w.write_record(&row)?
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: &'static str,
    pub reward: Option<f64>,
    pub pnl: Option<f64>,
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub n_seeds: usize,
    pub n_diverged: usize,
}

/// Rank (1 = best) of the `q`-tile among `n` seeds: the 75%-tile of 16 seeds
/// is the 4th best.
pub fn quantile_rank(q: f64, n: usize) -> usize {
    (((1.0 - q) * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Best / mean / worst / 75% / 50% / 25% over seeds, each column ranked on
/// its own. Reward and PnL are better when larger, Diff when smaller.
/// Quantile ranks count every seed; diverged seeds sit below all converged
/// ones, so a rank that falls among them is reported as missing.
pub fn multi_seed_summary(results: &[SeedResult]) -> SummaryTable {
    let reports: Vec<&EvalReport> = results.iter().filter_map(|r| r.report.as_ref()).collect();
    let n = results.len();
    let column = |f: &dyn Fn(&EvalReport) -> f64, higher_better: bool| {
        let mut v: Vec<f64> = reports.iter().map(|r| f(r)).collect();
        v.sort_by(|a, b| {
            if higher_better {
                b.total_cmp(a)
            } else {
                a.total_cmp(b)
            }
        });
        v
    };
    let cols = [
        column(&|r| r.mean_reward_true, true),
        column(&|r| r.mean_pnl_true, true),
        column(&|r| r.diff_l1, false),
    ];
    let stat = |label: &'static str, pick: &dyn Fn(&[f64]) -> Option<f64>| SummaryRow {
        label,
        reward: pick(&cols[0]),
        pnl: pick(&cols[1]),
        diff: pick(&cols[2]),
    };
    let at_rank = |rank: usize| move |v: &[f64]| v.get(rank - 1).copied();
    let rows = vec![
        stat("best", &|v| v.first().copied()),
        stat("mean", &|v| {
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }),
        stat("worst", &|v| v.last().copied()),
        stat("75%-tile", &at_rank(quantile_rank(0.75, n))),
        stat("50%-tile", &at_rank(quantile_rank(0.50, n))),
        stat("25%-tile", &at_rank(quantile_rank(0.25, n))),
    ];
    SummaryTable {
        rows,
        n_seeds: n,
        n_diverged: n - reports.len(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".to_string())
}

impl SummaryTable {
    /// Header `statistic,reward,pnl,diff`; missing cells are written as `-`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["statistic", "reward", "pnl", "diff"])?;
        let raw = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            w.write_record(&[r.label.to_string(), raw(r.reward), raw(r.pnl), raw(r.diff)])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>9} {:>9} {:>9}", "", "Reward", "PnL", "Diff")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>9} {:>9} {:>9}",
                r.label,
                cell(r.reward),
                cell(r.pnl),
                cell(r.diff)
            )?;
        }
        write!(f, "{} of {} seeds diverged", self.n_diverged, self.n_seeds)
    }
}
