use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    batch_cost, fmt_num, load_batch, parse_config, read_report, run_experiment, save_batch,
    write_baseline, write_merged, write_report, ExperimentConfig,
};
use crate::envs::{collect_batch, BehaviorPolicy, Env, EnvId, GRID_HIGH, GRID_LOW};
use crate::error::{contract, io_err, Result};
use crate::ibrl::{derive_seed, evaluate_costs, mean_and_stderr, run_iteration, IterationOutcome, PolicyActor};
use crate::nets::Network;

#[derive(Debug, Parser)]
#[command(name = "ibrl", version, about = "Iterative batch reinforcement learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect an initial batch with a scripted behavior policy.
    Collect(CollectArgs),
    /// Run one iteration on an existing batch.
    Train(TrainArgs),
    /// Run the full iterative loop.
    Loop(LoopArgs),
    /// Evaluate a policy checkpoint in the true environment.
    Eval(EvalArgs),
    /// Emit plot-ready data files.
    #[command(subcommand)]
    Plotdata(PlotCommand),
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's environment.
    #[arg(long)]
    pub env: Option<EnvId>,
    #[arg(long)]
    pub policy: Option<BehaviorPolicy>,
    #[arg(long, default_value_t = 5)]
    pub episodes: usize,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"])]
    pub bound: Option<Vec<f64>>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "batch.bin")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub iteration: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum PlotCommand {
    /// Action angle of a grid2d policy on a uniform grid of cell centres.
    PolicyMap {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 20)]
        grid: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluation cost per iteration from a report.
    CostCurve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diversity per iteration from a report.
    DiversityCurve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status: 0 on success, 2 on usage errors, 1 otherwise.
pub fn cli_run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Collect(a) => collect(a),
        Command::Train(a) => train(a),
        Command::Loop(a) => run_loop(a),
        Command::Eval(a) => eval(a),
        Command::Plotdata(p) => plotdata(p),
    }
}

fn load_config(path: Option<&Path>, env: Option<EnvId>) -> Result<ExperimentConfig> {
    match (path, env) {
        (Some(p), None) => parse_config(p),
        (Some(p), Some(e)) => {
            let mut c = parse_config(p)?;
            c.env = e;
            Ok(c)
        }
        (None, Some(e)) => Ok(ExperimentConfig::new(e)),
        (None, None) => Err(contract("either --config or --env is required")),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn collect(a: CollectArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.env)?;
    if let Some(w) = a.window {
        cfg.window = Some(w);
    }
    let env = cfg.environment();
    let bound = a.bound.map(|b| [b[0], b[1]]).or(cfg.initial.bound);
    let mut policy = a.policy.unwrap_or_else(|| cfg.initial_policy());
    let horizon = a.horizon.unwrap_or_else(|| env.episode_len());
    let batch = collect_batch(&env, &mut policy, a.episodes, horizon, cfg.window(), a.seed, bound)?;
    save_batch(&batch, &a.out)?;
    let (m, _) = batch_cost(&batch);
    println!("collected {} transitions, mean episode cost {}", batch.len(), fmt_num(m));
    Ok(())
}

fn save_outcome(out: &IterationOutcome, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    save_batch(&out.batch, &dir.join("batch.bin"))?;
    for (k, net) in out.ensemble.members.iter().enumerate() {
        write_text(&dir.join(format!("policy_{k}.json")), &net.to_json())?;
    }
    let m = &out.fitted.models;
    write_text(&dir.join("transition.json"), &m.transition.to_json())?;
    write_text(&dir.join("reward.json"), &m.reward.to_json())?;
    if let Some(b) = &out.fitted.behavior {
        write_text(&dir.join("behavior.json"), &b.to_json())?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = parse_config(&a.config)?;
    let batch = load_batch(&a.batch)?;
    let out = run_iteration(&batch, &cfg.ibrl(), a.iteration, a.seed)?;
    save_outcome(&out, &a.out)?;
    write_report(std::slice::from_ref(&out.report), &a.out.join("report.csv"))?;
    println!(
        "iteration {}: evaluation cost {} over {} transitions",
        out.report.iteration,
        fmt_num(out.report.true_cost_mean),
        out.report.batch_size
    );
    Ok(())
}

fn run_loop(a: LoopArgs) -> Result<()> {
    let cfg = parse_config(&a.config)?;
    let root = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    ensure_dir(&root)?;
    let mut merged = Vec::with_capacity(cfg.repetitions);
    for r in 0..cfg.repetitions {
        let seed = derive_seed(a.seed, 7, r as u64);
        let dir = root.join(format!("run_{r}"));
        ensure_dir(&dir)?;
        let mut done = Vec::new();
        let result = run_experiment(&cfg, seed, |o| {
            eprintln!(
                "run {r} iteration {}: evaluation cost {}",
                o.report.iteration,
                fmt_num(o.report.true_cost_mean)
            );
            done.push(o.report.clone());
        });
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                // Keep whatever finished before the failure.
                if !done.is_empty() {
                    write_report(&done, &dir.join("report.csv"))?;
                }
                return Err(e);
            }
        };
        write_baseline(&run.initial, &dir.join("baseline.csv"))?;
        save_outcome(&run.last, &dir)?;
        write_report(&run.reports, &dir.join("report.csv"))?;
        merged.push((r.to_string(), run.reports.iter().map(Into::into).collect()));
    }
    write_merged(&merged, &root.join("report.csv"))?;
    println!("wrote {}", root.join("report.csv").display());
    Ok(())
}

fn load_policy(path: &Path) -> Result<Network> {
    Network::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = parse_config(&a.config)?;
    let ibrl = cfg.ibrl();
    let net = load_policy(&a.policy)?;
    let mut actor = PolicyActor::new(net, ibrl.env.normalizer(ibrl.window), ibrl.constraint()?);
    let episodes = a.episodes.unwrap_or(cfg.eval.episodes);
    let horizon = a.horizon.unwrap_or_else(|| ibrl.eval_horizon());
    let costs = evaluate_costs(&mut actor, &ibrl.env, episodes, horizon, ibrl.window, a.seed)?;
    let (m, s) = mean_and_stderr(&costs);
    println!("mean_cost,stderr\n{},{}", fmt_num(m), fmt_num(s));
    Ok(())
}

fn plotdata(p: PlotCommand) -> Result<()> {
    match p {
        PlotCommand::PolicyMap {
            policy,
            grid,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref(), config.is_none().then_some(EnvId::Grid2d))?;
            let env = cfg.environment();
            if !matches!(env, Env::Grid2d(_)) || cfg.window() != 1 {
                return Err(contract("policy maps need a grid2d policy with window 1"));
            }
            if grid == 0 {
                return Err(contract("--grid must be at least 1"));
            }
            let net = load_policy(&policy)?;
            let normalizer = env.normalizer(1);
            let constraint = cfg.ibrl().constraint()?;
            let cell = (GRID_HIGH - GRID_LOW) / grid as f64;
            let mut text = String::from("x,y,angle\n");
            for i in 0..grid {
                for j in 0..grid {
                    let (x, y) = (GRID_LOW + (i as f64 + 0.5) * cell, GRID_LOW + (j as f64 + 0.5) * cell);
                    let raw = net.forward(&normalizer.normalize_obs(&[x, y]))?;
                    let a = match &constraint {
                        Some(c) => c.constrain_action(&raw, &[x, y])?.0,
                        None => raw,
                    };
                    let _ = writeln!(text, "{},{},{}", fmt_num(x), fmt_num(y), fmt_num(a[1].atan2(a[0])));
                }
            }
            emit(out.as_deref(), &text)
        }
        PlotCommand::CostCurve { report, out } => {
            let rows = read_report(&report)?;
            let mut text = String::from("iteration,true_cost_mean,true_cost_stderr\n");
            for r in rows {
                let _ = writeln!(
                    text,
                    "{},{},{}",
                    r.iteration,
                    fmt_num(r.true_cost_mean),
                    fmt_num(r.true_cost_stderr)
                );
            }
            emit(out.as_deref(), &text)
        }
        PlotCommand::DiversityCurve { report, out } => {
            let rows = read_report(&report)?;
            let mut text = String::from("iteration,diversity\n");
            for r in rows {
                let _ = writeln!(text, "{},{}", r.iteration, fmt_num(r.diversity));
            }
            emit(out.as_deref(), &text)
        }
    }
}
