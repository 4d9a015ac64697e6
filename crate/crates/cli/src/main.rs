use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use safetsc::harness::{
    agent_checkpoint, agent_meta, eval_seeds, evaluate, train, write_curve, ControllerKind, CyclePlan, EvalReport,
    Experiment, HarnessError, Policy, Scenario,
};
use safetsc::intersection::Seconds;
use safetsc::microsim::{SimConfig, DEFAULT_EPISODE_SECONDS};
use safetsc::ppo::{Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "safetsc", version, about = "Safe-by-design RL traffic signal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed and write learning curves and checkpoints.
    Train(TrainArgs),
    /// Evaluate trained checkpoints (one trial each) over several runs.
    Eval(EvalArgs),
    /// Evaluate the fixed-time baseline.
    Baseline(BaselineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Intersection JSON (defaults to the built-in OWL322 preset).
    #[arg(long)]
    intersection: Option<PathBuf>,
    /// Simulated seconds per episode.
    #[arg(long)]
    episode_seconds: Option<Seconds>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_learning_kind)]
    controller: ControllerKind,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    /// JSON with PPO keys (train_batch_size, num_sgd_iter, gamma, lambda, ...)
    /// and an optional "sim" object.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides episode_total.
    #[arg(long)]
    episodes: Option<usize>,
    /// Attach comfort rules to the mask (default: on for c, off otherwise).
    #[arg(long)]
    psych_rules: Option<Switch>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file; repeat for several trials.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Evaluation seeds (defaults to a fixed list of `runs` seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Skip per-step trace files.
    #[arg(long)]
    no_trace: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    /// Cycle plan JSON (defaults to 3 (30 s), 1 (6 s), 7 (30 s), 1 (6 s)).
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    no_trace: bool,
}

#[derive(Deserialize, Default)]
struct ConfigFile {
    #[serde(flatten)]
    ppo: TrainConfig,
    #[serde(default)]
    sim: Option<SimConfig>,
}

fn parse_learning_kind(s: &str) -> Result<ControllerKind, String> {
    match s.parse::<ControllerKind>() {
        Ok(k) if k.is_learning() => Ok(k),
        Ok(_) => Err("only a, b and c are trained; use `baseline` for the fixed-time plan".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn scenario(common: &Common) -> Result<Scenario, HarnessError> {
    match &common.intersection {
        Some(p) => Scenario::from_json(&std::fs::read_to_string(p)?),
        None => Ok(Scenario::owl322()),
    }
}

fn sim_config(base: Option<SimConfig>, episode_seconds: Option<Seconds>) -> SimConfig {
    let cfg = base.unwrap_or_else(|| SimConfig::rush_hour(DEFAULT_EPISODE_SECONDS));
    match episode_seconds {
        Some(s) => cfg.with_episode_seconds(s),
        None => cfg,
    }
}

fn run_train(args: &TrainArgs) -> Result<(), HarnessError> {
    let file: ConfigFile = match &args.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => ConfigFile::default(),
    };
    let mut ppo = file.ppo;
    if let Some(n) = args.episodes {
        ppo.episode_total = n;
    }
    let sim = sim_config(file.sim, args.common.episode_seconds);
    let mut exp = Experiment::new(scenario(&args.common)?, sim, args.controller);
    if let Some(s) = args.psych_rules {
        exp.psych_rules = matches!(s, Switch::On);
    }
    std::fs::create_dir_all(&args.common.out)?;
    for &seed in &args.seeds {
        eprintln!("training controller ({}) seed {seed}", exp.kind);
        let outcome = train(&exp, &ppo, seed, |p| {
            eprintln!("  steps {:>9} episodes {:>5} reward {:>12.1} ema {:>12.1}", p.env_steps, p.episodes, p.mean_episodic_reward, p.ema)
        })?;
        let out = &args.common.out;
        write_curve(&out.join(format!("curves_{}_{seed}.csv", exp.kind)), &outcome.curve)?;
        agent_checkpoint(&exp, &outcome).save(&out.join(format!("checkpoint_{}_{seed}.json", exp.kind)))?;
    }
    Ok(())
}

fn seeds_for(runs: usize, seeds: &Option<Vec<u64>>) -> Vec<u64> {
    seeds.clone().unwrap_or_else(|| eval_seeds(runs))
}

fn finish_report(report: &EvalReport, out: &Path) -> Result<(), HarnessError> {
    report.write_csv(&out.join(format!("eval_{}.csv", report.controller)))?;
    print!("{}", report.to_table());
    println!("bounce-backs: {}", report.bounce_backs());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), HarnessError> {
    let seeds = seeds_for(args.runs, &args.seeds);
    let scenario = scenario(&args.common)?;
    std::fs::create_dir_all(&args.common.out)?;
    let trace = (!args.no_trace).then_some(args.common.out.as_path());
    let mut kind = None;
    let mut trials = Vec::new();
    for (i, path) in args.checkpoint.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let meta = agent_meta(&ck)?;
        if kind.is_some_and(|k| k != meta.controller) {
            return Err(HarnessError::Config("all checkpoints must come from the same controller".into()));
        }
        kind = Some(meta.controller);
        let sim = sim_config(None, Some(args.common.episode_seconds.unwrap_or(meta.episode_seconds)));
        let mut exp = Experiment::new(scenario.clone(), sim, meta.controller);
        exp.psych_rules = meta.psych_rules;
        trials.push(evaluate(&exp, &Policy::Greedy(ck.params), i + 1, &seeds, trace)?);
    }
    finish_report(&EvalReport::new(kind.expect("at least one checkpoint"), trials), &args.common.out)
}

fn run_baseline(args: &BaselineArgs) -> Result<(), HarnessError> {
    let plan = match &args.plan {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => CyclePlan::owl322_default(),
    };
    let seeds = seeds_for(args.runs, &args.seeds);
    let sim = sim_config(None, args.common.episode_seconds);
    let exp = Experiment::new(scenario(&args.common)?, sim, ControllerKind::FixedTime);
    std::fs::create_dir_all(&args.common.out)?;
    let trace = (!args.no_trace).then_some(args.common.out.as_path());
    let trial = evaluate(&exp, &Policy::Fixed(plan), 1, &seeds, trace)?;
    finish_report(&EvalReport::new(ControllerKind::FixedTime, vec![trial]), &args.common.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Baseline(a) => run_baseline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_safety_violation() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
