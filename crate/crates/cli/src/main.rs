use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcg_core::agent::train;
use mcg_core::envsim::{ChemicalVariant, EnvDescriptor, EnvState, Environment, GoalTask};
use mcg_core::harness::{
    eval_identifiability, eval_prediction_accuracy, run, run_episode, summarize_log, ExperimentConfig,
};
use mcg_core::numkit::RandomSource;
use mcg_core::planner::plan;
use mcg_core::reach::{build_operators, encode, reach_table_csv, DEFAULT_STATE_CAP};
use mcg_core::worldmodel::{load, save, WorldModel};

#[derive(Parser)]
#[command(name = "mcg", about = "Meta-causal-graph world models: train, evaluate, analyze and plan")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Environment utilities.
    Env {
        #[command(subcommand)]
        command: EnvCommand,
    },
    /// Train one model per seed and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint against its environment.
    Eval(EvalArgs),
    /// Interventional reachability table from a start state.
    Reach(ReachArgs),
    /// Receding-horizon planning episodes with a checkpoint.
    Plan(PlanArgs),
    /// Recompute the summary of a finished run directory.
    Report(ReportArgs),
    /// Full train → evaluate pipeline with all artifacts.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum EnvCommand {
    /// Print an environment descriptor and its ground-truth subgraphs.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    /// lockbox or chemical
    #[arg(long, default_value = "chemical")]
    name: String,
    /// full_chain or full_fork
    #[arg(long, default_value = "full_chain")]
    variant: String,
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    colors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the descriptor here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    noise: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReachArgs {
    /// Descriptor or config file holding `env.*` keys.
    #[arg(long)]
    env: PathBuf,
    /// Start state, comma-separated values.
    #[arg(long)]
    start: String,
    /// Intervenable nodes, comma-separated (default: all).
    #[arg(long)]
    intervenable: Option<String>,
    #[arg(long, default_value_t = 8)]
    max_k: usize,
    #[arg(long, default_value_t = DEFAULT_STATE_CAP)]
    cap: usize,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Goal state, comma-separated values.
    #[arg(long)]
    goal: String,
    /// Start state; drawn from the environment when absent.
    #[arg(long)]
    start: Option<String>,
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    #[arg(long, default_value_t = 25)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing metrics.csv.
    dir: PathBuf,
    /// Final training step (default: largest step in the log).
    #[arg(long)]
    step: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Exit nonzero when a seed misses the configured thresholds.
    #[arg(long)]
    strict: bool,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_seed_override(std::env::var("MCG_SEED").ok().as_deref())?;
    Ok(cfg)
}

fn env_of(model: &WorldModel) -> Result<Environment> {
    let desc = model.env.as_ref().context("checkpoint carries no environment descriptor")?;
    Ok(desc.build()?)
}

fn parse_state(s: &str) -> Result<EnvState> {
    s.parse::<EnvState>().map_err(|e| anyhow::anyhow!("state {s:?}: {e}"))
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse::<usize>().with_context(|| format!("bad list entry {x:?}")))
        .collect()
}

fn env_gen(a: GenArgs) -> Result<()> {
    let desc = match a.name.as_str() {
        "lockbox" => EnvDescriptor::lockbox(a.seed),
        "chemical" => {
            let v: ChemicalVariant = a.variant.parse().map_err(anyhow::Error::msg)?;
            EnvDescriptor::chemical(v, a.nodes, a.colors, a.seed)
        }
        other => bail!("unknown environment {other:?} (expected lockbox or chemical)"),
    };
    let env = desc.build()?;
    let mut text = desc.to_text();
    for (u, g) in env.truth().subgraphs.iter().enumerate() {
        text.push_str(&format!("# meta {u} ({})\n", env.truth().names[u]));
        for line in g.to_text().lines() {
            text.push_str(&format!("# {line}\n"));
        }
    }
    match a.out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let env = cfg.env.build()?;
    fs::create_dir_all(&a.out)?;
    for &seed in &cfg.seeds {
        let rng = RandomSource::new(seed, &cfg.name);
        let mut model = WorldModel::for_env(&env, cfg.model.clone(), &mut rng.derive("model-init"))?;
        let report = train(&env, &mut model, cfg.train.clone(), &rng.derive("train"))?;
        fs::write(a.out.join(format!("train_seed{seed}.csv")), report.to_csv())?;
        let ckpt = a.out.join(format!("seed{seed}.ckpt"));
        save(&model, &ckpt)?;
        println!("seed {seed}: {}", ckpt.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load(&a.checkpoint)?;
    let env = env_of(&model)?;
    let rng = RandomSource::new(a.seed, "cli-eval");
    let acc = eval_prediction_accuracy(&model, &env, a.noise, a.samples, &mut rng.derive("accuracy"))?;
    let id = eval_identifiability(&model, &env, a.samples, &mut rng.derive("ident"))?;
    println!("accuracy_n{} = {acc:.4}", a.noise);
    println!("swap_accuracy = {:.4}", id.swap_accuracy);
    println!("observational_accuracy = {:.4}", id.observational_accuracy);
    println!("distinct_skeletons = {}", id.distinct_skeletons);
    for (&u, d) in id.codes_in_use.iter().zip(&id.shd_per_code) {
        println!("code {u} shd = {d}");
        print!("{}", model.skeleton(u).to_text());
    }
    Ok(())
}

fn cmd_reach(a: ReachArgs) -> Result<()> {
    let desc = EnvDescriptor::parse(&fs::read_to_string(&a.env)?)?;
    let env = desc.build()?;
    let intervenable = match &a.intervenable {
        Some(s) => parse_list(s)?,
        None => (0..env.p()).collect(),
    };
    let ops = build_operators(&env, &intervenable, a.cap)?;
    let z0 = encode(&parse_state(&a.start)?, env.cards())?;
    print!("{}", reach_table_csv(&ops, z0, a.max_k));
    Ok(())
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let model = load(&a.checkpoint)?;
    let env = env_of(&model)?;
    let goal = parse_state(&a.goal)?;
    env.check_state(&goal)?;
    let cem = Default::default();
    let mut rng = RandomSource::new(a.seed, "cli-plan");
    println!("episode,reward,first_action");
    for ep in 0..a.episodes {
        let start = match &a.start {
            Some(s) => parse_state(s)?,
            None => env.reset(&mut rng),
        };
        env.check_state(&start)?;
        let task = GoalTask { target: goal.clone(), horizon: a.horizon };
        let first = plan(&model, &start, &task, env.actions(), &cem, &mut rng.derive("first"))?.first();
        let reward = run_episode(&model, &env, &start, &task, &cem, &mut rng)?;
        println!("{ep},{reward},{first}");
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(a.dir.join("metrics.csv"))?;
    let step = match a.step {
        Some(s) => s,
        None => text
            .lines()
            .skip(1)
            .filter_map(|l| l.rsplit(',').next()?.parse::<u64>().ok())
            .max()
            .context("metrics.csv holds no rows")?,
    };
    print!("{}", summarize_log(&text, step)?.to_text());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<bool> {
    let cfg = load_config(&a.config)?;
    let outcome = run(&cfg, &a.out)?;
    print!("{}", outcome.summary.to_text());
    for (seed, why) in &outcome.failures {
        eprintln!("seed {seed}: {why}");
    }
    Ok(!a.strict || outcome.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Env { command: EnvCommand::Gen(a) } => env_gen(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Reach(a) => cmd_reach(a).map(|_| true),
        Command::Plan(a) => cmd_plan(a).map(|_| true),
        Command::Report(a) => cmd_report(a).map(|_| true),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
