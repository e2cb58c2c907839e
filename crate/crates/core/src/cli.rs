//! The `detpo` command line and the library functions behind each subcommand.
//!
//! Every command writes into one output directory and starts by echoing the
//! resolved configuration there as `config.toml`, so any run can be repeated
//! with `--config <out>/config.toml`. Training writes one `seed-<n>/`
//! directory per seed.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{train_with_observer, write_history_csv, Agent, TrainError, TrainEvent, CHECKPOINT_META};
use crate::config::{ConfigError, RunConfig};
use crate::env::{EnvParams, Policy};
use crate::harness::{
    evaluate, multi_seed_summary, policy_grid, policy_slice, write_reports_csv, EvalReport,
    SeedResult, SummaryTable,
};
use crate::reference::{solve_reference, GridSearch, ReferenceError, ReferencePolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_ALL_DIVERGED: i32 = 4;

/// Marker written into a seed directory whose training diverged.
pub const DIVERGED_MARKER: &str = "diverged.toml";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match the config: {0}")]
    Mismatch(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Train(TrainError),
    #[error("all {0} seeds diverged")]
    AllDiverged(usize),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(io) => CliError::Io(io),
            TrainError::Config(m) => CliError::Config(ConfigError::Invalid(m)),
            other => CliError::Train(other),
        }
    }
}

impl From<crate::env::EnvError> for CliError {
    fn from(e: crate::env::EnvError) -> Self {
        CliError::Config(ConfigError::Invalid(e.to_string()))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Read { .. }) => EXIT_IO,
            CliError::Config(_) | CliError::Mismatch(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Csv(e) if e.is_io_error() => EXIT_IO,
            CliError::AllDiverged(_) => EXIT_ALL_DIVERGED,
            _ => EXIT_OTHER,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "detpo", version, about = "Trading-policy learning with DDPG and reference solutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the reference policy for the configured environment and evaluate it.
    Reference(CommonArgs),
    /// Train one agent per seed.
    Train(CommonArgs),
    /// Evaluate trained agents against the reference on coupled environments.
    Eval(CheckpointArgs),
    /// Export policy slices and grids for the reference and the best agent.
    PolicyExport(CheckpointArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file, or the name of a built-in preset (e.g. `lqr-paper`).
    #[arg(long)]
    pub config: String,
    /// Training seeds, overriding `eval.seeds` (comma separated).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seed_list: Option<Vec<u64>>,
    /// Number of seeds processed in parallel (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// A training output directory, a single `seed-<n>` checkpoint, or the
    /// word `reference`. `eval` defaults to the output directory.
    #[arg(long)]
    pub checkpoint: Option<String>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Reference(args) => {
            let (cfg, out) = resolve(&args)?;
            let outcome = cmd_reference(&cfg, &out)?;
            print!("{}", outcome.render());
        }
        Command::Train(args) => {
            let (cfg, out) = resolve(&args)?;
            let outcomes = cmd_train(&cfg, &out, args.jobs, true)?;
            for o in &outcomes {
                println!("{}", o.render());
            }
            let diverged = outcomes.iter().filter(|o| o.diverged.is_some()).count();
            if diverged == outcomes.len() {
                return Err(CliError::AllDiverged(diverged));
            }
        }
        Command::Eval(args) => {
            let (cfg, out) = resolve(&args.common)?;
            let source = CheckpointSource::parse(args.checkpoint.as_deref(), &out);
            let outcome = cmd_eval(&cfg, &source, &out, args.common.jobs)?;
            print!("{}", outcome.table);
        }
        Command::PolicyExport(args) => {
            let (cfg, out) = resolve(&args.common)?;
            let source = args
                .checkpoint
                .as_deref()
                .map(|c| CheckpointSource::parse(Some(c), &out));
            let outcome = cmd_policy_export(&cfg, source.as_ref(), &out)?;
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if let Some(seed) = outcome.agent_seed {
                println!("agent policy from seed {seed}");
            }
        }
    }
    Ok(())
}

fn resolve(args: &CommonArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seeds) = &args.seed_list {
        cfg.eval.seeds = seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if args.jobs == Some(0) {
        return Err(ConfigError::Invalid("--jobs must be at least 1".into()).into());
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

/// Writes the resolved config to `out/config.toml`, with `output_dir` set to `out`.
pub fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut echo = cfg.clone();
    echo.output_dir = out.to_owned();
    fs::write(out.join("config.toml"), echo.to_toml_string())?;
    Ok(())
}

fn write_csv_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> csv::Result<()>,
) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn with_pool<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceOutcome {
    pub policy: ReferencePolicy,
    pub grid_search: Option<GridSearch>,
    pub report: EvalReport,
}

impl ReferenceOutcome {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, v) in self.policy.describe() {
            s += &format!("{name} = {v:.6}\n");
        }
        let r = &self.report;
        s += &format!(
            "reward = {:.4}  pnl = {:.4}  reward_true = {:.4}  pnl_true = {:.4}  ({} x {})\n",
            r.mean_reward, r.mean_pnl, r.mean_reward_true, r.mean_pnl_true, r.n_episodes, r.horizon
        );
        s
    }
}

/// Solves the reference, evaluates it and writes `reference.toml`,
/// `reference_report.csv` and, for grid-searched references, `grid_search.csv`.
pub fn cmd_reference(cfg: &RunConfig, out: &Path) -> Result<ReferenceOutcome, CliError> {
    echo_config(cfg, out)?;
    let (policy, grid_search) = solve_reference(&cfg.env, &cfg.reference)?;
    let report = evaluate(
        &policy,
        &policy,
        &cfg.env,
        cfg.eval.n_episodes,
        cfg.eval.horizon,
        cfg.eval.seed,
    )?;
    let text = toml::to_string(&policy).map_err(|e| CliError::Mismatch(e.to_string()))?;
    fs::write(out.join("reference.toml"), text)?;
    let rows = [SeedResult {
        seed: cfg.eval.seed,
        report: Some(report),
    }];
    write_csv_file(&out.join("reference_report.csv"), |w| write_reports_csv(&rows, w))?;
    if let Some(gs) = &grid_search {
        write_csv_file(&out.join("grid_search.csv"), |w| gs.write_csv(w))?;
    }
    Ok(ReferenceOutcome {
        policy,
        grid_search,
        report,
    })
}

/// Why a seed's training stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub episode: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    /// Last periodic evaluation `(reward, pnl)`, if any.
    pub last_eval: Option<(f64, f64)>,
    pub diverged: Option<DivergenceRecord>,
}

impl SeedOutcome {
    pub fn render(&self) -> String {
        match (&self.diverged, self.last_eval) {
            (Some(d), _) => format!("seed {}: diverged in episode {} ({})", self.seed, d.episode, d.reason),
            (None, Some((r, p))) => format!("seed {}: ok, last eval reward {r:.4} pnl {p:.4}", self.seed),
            (None, None) => format!("seed {}: ok", self.seed),
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Trains one agent per seed in `cfg.eval.seeds`. A diverged seed gets a
/// `diverged.toml` marker and its partial history instead of a checkpoint.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    jobs: Option<usize>,
    progress: bool,
) -> Result<Vec<SeedOutcome>, CliError> {
    echo_config(cfg, out)?;
    let results: Vec<Result<SeedOutcome, CliError>> = with_pool(jobs, || {
        cfg.eval
            .seeds
            .par_iter()
            .map(|&seed| train_seed(cfg, out, seed, progress))
            .collect()
    });
    results.into_iter().collect()
}

fn train_seed(cfg: &RunConfig, out: &Path, seed: u64, progress: bool) -> Result<SeedOutcome, CliError> {
    let dir = seed_dir(out, seed);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut agent_cfg = cfg.agent.clone();
    agent_cfg.seed = seed;
    let mut observer = |ev: TrainEvent| {
        if let TrainEvent::EpisodeFinished { record } = ev {
            if let (true, Some((r, p))) = (progress, record.eval) {
                eprintln!("seed {seed} episode {}: eval reward {r:.4} pnl {p:.4}", record.episode);
            }
        }
    };
    let history_path = dir.join("history.csv");
    match train_with_observer(&cfg.env, &agent_cfg, &mut observer) {
        Ok(trained) => {
            trained.agent.save_checkpoint(&dir, &cfg.env, &agent_cfg)?;
            write_csv_file(&history_path, |w| write_history_csv(&trained.history, w))?;
            Ok(SeedOutcome {
                seed,
                dir,
                last_eval: trained.history.iter().rev().find_map(|r| r.eval),
                diverged: None,
            })
        }
        Err(TrainError::Diverged {
            episode,
            reason,
            history,
        }) => {
            write_csv_file(&history_path, |w| write_history_csv(&history, w))?;
            let record = DivergenceRecord { episode, reason };
            let text = toml::to_string(&record).map_err(|e| CliError::Mismatch(e.to_string()))?;
            fs::write(dir.join(DIVERGED_MARKER), text)?;
            Ok(SeedOutcome {
                seed,
                dir,
                last_eval: history.iter().rev().find_map(|r| r.eval),
                diverged: Some(record),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Where trained policies come from.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointSource {
    /// The reference policy stands in for the agent.
    Reference,
    /// A single checkpoint directory.
    Single(PathBuf),
    /// A training output directory with `seed-<n>` subdirectories.
    Run(PathBuf),
}

impl CheckpointSource {
    pub fn parse(arg: Option<&str>, default_root: &Path) -> Self {
        match arg {
            Some("reference") => Self::Reference,
            Some(p) => Self::from_path(Path::new(p)),
            None => Self::from_path(default_root),
        }
    }

    pub fn from_path(path: &Path) -> Self {
        if path.join(CHECKPOINT_META).exists() || path.join(DIVERGED_MARKER).exists() {
            Self::Single(path.to_owned())
        } else {
            Self::Run(path.to_owned())
        }
    }
}

/// One seed directory: a loaded agent, or `None` if that seed diverged.
struct LoadedSeed {
    seed: u64,
    agent: Option<Agent>,
}

fn same_env(a: &EnvParams, b: &EnvParams) -> bool {
    a.clone().with_seed(0) == b.clone().with_seed(0)
}

fn load_seed_dir(dir: &Path, fallback_seed: u64, env: &EnvParams) -> Result<LoadedSeed, CliError> {
    if dir.join(DIVERGED_MARKER).exists() {
        return Ok(LoadedSeed {
            seed: fallback_seed,
            agent: None,
        });
    }
    let (agent, meta) = Agent::load_checkpoint(dir).map_err(|e| match e {
        TrainError::Io(io) => CliError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", dir.display()),
        )),
        other => CliError::Train(other),
    })?;
    if !same_env(&meta.env, env) {
        return Err(CliError::Mismatch(format!(
            "{} was trained on {:?}, config has {:?}",
            dir.display(),
            meta.env,
            env
        )));
    }
    Ok(LoadedSeed {
        seed: meta.agent.seed,
        agent: Some(agent),
    })
}

fn parse_seed_dir_name(name: &str) -> Option<u64> {
    name.strip_prefix("seed-")?.parse().ok()
}

fn load_source(source: &CheckpointSource, env: &EnvParams) -> Result<Vec<LoadedSeed>, CliError> {
    match source {
        CheckpointSource::Reference => Ok(Vec::new()),
        CheckpointSource::Single(dir) => {
            let seed = dir
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(parse_seed_dir_name)
                .unwrap_or(0);
            Ok(vec![load_seed_dir(dir, seed, env)?])
        }
        CheckpointSource::Run(root) => {
            let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
            for entry in fs::read_dir(root).map_err(|e| {
                std::io::Error::new(e.kind(), format!("{}: {e}", root.display()))
            })? {
                let entry = entry?;
                if let Some(seed) = entry.file_name().to_str().and_then(parse_seed_dir_name) {
                    if entry.path().is_dir() {
                        seeds.push((seed, entry.path()));
                    }
                }
            }
            if seeds.is_empty() {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no seed-<n> checkpoints under {}", root.display()),
                )
                .into());
            }
            seeds.sort_by_key(|(s, _)| *s);
            seeds
                .iter()
                .map(|(seed, dir)| load_seed_dir(dir, *seed, env))
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub results: Vec<SeedResult>,
    pub table: SummaryTable,
}

/// Evaluates every seed against the reference on coupled environments and
/// writes `reports.csv` and `summary.csv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    source: &CheckpointSource,
    out: &Path,
    jobs: Option<usize>,
) -> Result<EvalOutcome, CliError> {
    let loaded = load_source(source, &cfg.env)?;
    echo_config(cfg, out)?;
    let (reference, _) = solve_reference(&cfg.env, &cfg.reference)?;
    let ev = &cfg.eval;
    let score = |p: &dyn Policy| evaluate(p, &reference, &cfg.env, ev.n_episodes, ev.horizon, ev.seed);
    let results: Vec<SeedResult> = if *source == CheckpointSource::Reference {
        vec![SeedResult {
            seed: 0,
            report: Some(score(&reference)?),
        }]
    } else {
        let scored: Vec<Result<SeedResult, CliError>> = with_pool(jobs, || {
            loaded
                .par_iter()
                .map(|s| {
                    let report = match &s.agent {
                        Some(a) => Some(score(a)?),
                        None => None,
                    };
                    Ok(SeedResult { seed: s.seed, report })
                })
                .collect()
        });
        scored.into_iter().collect::<Result<_, _>>()?
    };
    let table = multi_seed_summary(&results);
    write_csv_file(&out.join("reports.csv"), |w| write_reports_csv(&results, w))?;
    write_csv_file(&out.join("summary.csv"), |w| table.write_csv(w))?;
    Ok(EvalOutcome { results, table })
}

#[derive(Debug, Clone)]
pub struct ExportOutcome {
    pub files: Vec<PathBuf>,
    /// Seed of the exported agent, when one was exported.
    pub agent_seed: Option<u64>,
}

/// Writes `reference_slice.csv` and `reference_grid.csv`, plus
/// `agent_slice.csv` and `agent_grid.csv` when a checkpoint is given. For a
/// multi-seed run the agent with the highest evaluation reward is exported.
pub fn cmd_policy_export(
    cfg: &RunConfig,
    source: Option<&CheckpointSource>,
    out: &Path,
) -> Result<ExportOutcome, CliError> {
    let loaded = match source {
        Some(s) => load_source(s, &cfg.env)?,
        None => Vec::new(),
    };
    echo_config(cfg, out)?;
    let (reference, _) = solve_reference(&cfg.env, &cfg.reference)?;
    let x = &cfg.export;
    let mut files = Vec::new();
    let mut export = |name: &str, policy: &dyn Policy| -> Result<(), CliError> {
        let slice = policy_slice(policy, &x.slice_positions, x.slice_p_range, x.slice_points);
        let grid = policy_grid(policy, x.grid_pi_range, x.grid_p_range, x.grid_resolution);
        let slice_path = out.join(format!("{name}_slice.csv"));
        let grid_path = out.join(format!("{name}_grid.csv"));
        write_csv_file(&slice_path, |w| slice.write_csv(w))?;
        write_csv_file(&grid_path, |w| grid.write_csv(w))?;
        files.push(slice_path);
        files.push(grid_path);
        Ok(())
    };
    export("reference", &reference)?;

    let ev = &cfg.eval;
    let mut best: Option<(f64, &LoadedSeed)> = None;
    for s in &loaded {
        if let Some(agent) = &s.agent {
            let r = evaluate(agent, &reference, &cfg.env, ev.n_episodes, ev.horizon, ev.seed)?;
            if best.is_none_or(|(b, _)| r.mean_reward_true > b) {
                best = Some((r.mean_reward_true, s));
            }
        }
    }
    let agent_seed = match (source, best) {
        (Some(CheckpointSource::Reference), _) => {
            export("agent", &reference)?;
            None
        }
        (_, Some((_, s))) => {
            export("agent", s.agent.as_ref().expect("best seed has an agent"))?;
            Some(s.seed)
        }
        (Some(_), None) => {
            return Err(CliError::AllDiverged(loaded.len()));
        }
        (None, None) => None,
    };
    Ok(ExportOutcome { files, agent_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::config::Preset;

    fn tiny(preset: Preset) -> RunConfig {
        let mut cfg = RunConfig::from_preset(preset);
        let mut agent = AgentConfig::smoke();
        agent.episodes = 1;
        agent.episode_length = 50;
        agent.pretrain_steps = 100;
        agent.eval_every = 1;
        agent.eval_horizon = 100;
        cfg.agent = agent;
        cfg.eval.n_episodes = 2;
        cfg.eval.horizon = 200;
        cfg.eval.seeds = vec![0, 1];
        cfg.reference.episodes = 1;
        cfg.reference.horizon = 500;
        cfg.reference.refine = false;
        cfg.export.slice_points = 5;
        cfg.export.grid_resolution = 4;
        cfg
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            CliError::Config(ConfigError::Invalid("x".into())).exit_code(),
            CliError::Io(std::io::Error::other("x")).exit_code(),
            CliError::AllDiverged(3).exit_code(),
        ];
        assert_eq!(codes, [EXIT_CONFIG, EXIT_IO, EXIT_ALL_DIVERGED]);
        assert_ne!(EXIT_OTHER, EXIT_OK);
    }

    #[test]
    fn checkpoint_source_parsing() {
        let root = Path::new("/nonexistent/run");
        assert_eq!(CheckpointSource::parse(Some("reference"), root), CheckpointSource::Reference);
        assert_eq!(CheckpointSource::parse(None, root), CheckpointSource::Run(root.to_owned()));
        assert_eq!(parse_seed_dir_name("seed-12"), Some(12));
        assert_eq!(parse_seed_dir_name("seed-x"), None);
        assert_eq!(parse_seed_dir_name("other"), None);
    }

    #[test]
    fn reference_as_checkpoint_has_zero_diff() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Preset::LqrPaper);
        let out = cmd_eval(&cfg, &CheckpointSource::Reference, dir.path(), Some(1)).unwrap();
        assert_eq!(out.results.len(), 1);
        assert_eq!(out.results[0].report.unwrap().diff_l1, 0.0);
        assert!(out.table.rows.iter().all(|r| r.diff == Some(0.0)));
        assert!(dir.path().join("reports.csv").exists());
        assert!(dir.path().join("summary.csv").exists());
        assert!(dir.path().join("config.toml").exists());
    }

    #[test]
    fn train_then_eval_then_export() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Preset::LqrPaper);
        cfg.agent.divergence.max_abs_position = f64::INFINITY;
        let outcomes = cmd_train(&cfg, dir.path(), Some(2), false).unwrap();
        assert_eq!(outcomes.len(), 2);
        for o in &outcomes {
            assert!(o.diverged.is_none());
            assert!(o.dir.join(CHECKPOINT_META).exists());
            assert!(o.dir.join("history.csv").exists());
        }
        let run = CheckpointSource::from_path(dir.path());
        let ev = cmd_eval(&cfg, &run, dir.path(), None).unwrap();
        assert_eq!(ev.results.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1]);
        let ex = cmd_policy_export(&cfg, Some(&run), dir.path()).unwrap();
        assert_eq!(ex.files.len(), 4);
        assert!(ex.agent_seed.is_some());
    }

    #[test]
    fn eval_rejects_checkpoint_from_other_env() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Preset::LqrPaper);
        cfg.eval.seeds = vec![0];
        cfg.agent.divergence.max_abs_position = f64::INFINITY;
        cmd_train(&cfg, dir.path(), Some(1), false).unwrap();
        let other = tiny(Preset::BandPaper);
        let err = cmd_eval(&other, &CheckpointSource::from_path(dir.path()), dir.path(), None)
            .unwrap_err();
        assert!(matches!(err, CliError::Mismatch(_)), "{err}");
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn diverged_seed_is_recorded_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Preset::LqrPaper);
        cfg.eval.seeds = vec![3];
        cfg.agent.divergence.max_abs_position = 0.0;
        let outcomes = cmd_train(&cfg, dir.path(), Some(1), false).unwrap();
        assert!(outcomes[0].diverged.is_some());
        assert!(seed_dir(dir.path(), 3).join(DIVERGED_MARKER).exists());
        let ev = cmd_eval(&cfg, &CheckpointSource::from_path(dir.path()), dir.path(), None).unwrap();
        assert_eq!(ev.table.n_diverged, 1);
        assert!(ev.results[0].report.is_none());
    }

    #[test]
    fn reference_only_export() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(Preset::BandPaper);
        let ex = cmd_policy_export(&cfg, None, dir.path()).unwrap();
        assert_eq!(ex.files.len(), 2);
        assert_eq!(ex.agent_seed, None);
        let text = fs::read_to_string(dir.path().join("reference_grid.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 4);
    }
}
