use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trafficmon::config::{ConfigError, RunConfig};
use trafficmon::evalkit::{
    emit_artifacts, eval_seeds, evaluate, sweep, validation_seeds, EvalError, GreedyUncertaintyPolicy, Policy, QPolicy,
    RandomPolicy, SweepVar, Validator,
};
use trafficmon::gridworld::GridMap;
use trafficmon::qfunction::{gradient_check, save_checkpoint, CheckpointError, CheckpointMeta, NetArch, QParams};
use trafficmon::trainer::{train, training_log_csv, EpisodeEnd, TrainError, TrainObserver};

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "trafficmon", version, about = "Multi-agent UAV traffic monitoring with distributed DQN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a Q-network and write its log and checkpoints.
    Train(TrainArgs),
    /// Evaluate a trained or baseline policy on held-out seeds.
    Eval(EvalArgs),
    /// Evaluate a policy across values of N or T_u.
    Sweep(SweepArgs),
    /// Compare backpropagation against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write per-step traces and uncertainty fields for plotting.
    RenderData(RenderArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `E=5` or `train.gamma=0.9`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; shorthand for `--override seed=<n>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "TRAFFICMON_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyKind {
    Learned,
    Random,
    Greedy,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "learned")]
    policy: PolicyKind,
    /// Checkpoint for `--policy learned`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of held-out evaluation seeds (defaults to the config value).
    #[arg(long)]
    seeds: Option<usize>,
    /// Parallel evaluation workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Swept variable: N or T_u.
    #[arg(long)]
    var: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchKind {
    Tiny,
    Default,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    arch: ArchKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    draws: usize,
    /// Map side for `--arch default`.
    #[arg(long, default_value_t = 10)]
    size: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
}

enum CliError {
    Config(String),
    Compat(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Compat(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Compat(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ArchMismatch { .. } => CliError::Compat(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

struct Loaded {
    cfg: RunConfig,
    map: Arc<GridMap>,
    out: PathBuf,
}

fn load(common: &Common) -> Result<Loaded, CliError> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let map = cfg.load_map()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_root());
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    Ok(Loaded { cfg, map, out })
}

fn make_policy(args: &PolicyArgs, loaded: &Loaded) -> Result<Box<dyn Policy>, CliError> {
    Ok(match args.policy {
        PolicyKind::Random => Box::new(RandomPolicy),
        PolicyKind::Greedy => Box::new(GreedyUncertaintyPolicy),
        PolicyKind::Learned => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Config("--policy learned requires --checkpoint".into()))?;
            let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
            let expected = loaded.cfg.net_arch(&loaded.map)?;
            let (params, _, _) = QParams::load_for(&bytes, &expected)?;
            Box::new(QPolicy::new(params))
        }
    })
}

fn seeds_for(args: &PolicyArgs, cfg: &RunConfig) -> Vec<u64> {
    eval_seeds(cfg.seed.master, args.seeds.unwrap_or(cfg.seed.eval_seeds))
}

struct CheckpointWriter {
    dir: PathBuf,
    seed: u64,
    validator: Option<Validator>,
    error: Option<CliError>,
}

impl TrainObserver for CheckpointWriter {
    fn on_episode(&mut self, end: &EpisodeEnd<'_>) {
        let l = end.log;
        let loss = l.loss_mean.map_or("-".to_string(), |v| format!("{v:.5}"));
        eprintln!(
            "episode {:>5}  reward {:>9.4}  sum_u {:>9.4}  eps {:.3}  loss {loss}",
            l.episode, l.mean_reward, l.mean_total_uncertainty, l.epsilon
        );
        if end.target_refreshed && self.error.is_none() {
            let meta = CheckpointMeta { episode: l.episode as u64 + 1, seed: self.seed, note: String::new() };
            let path = self.dir.join(format!("checkpoint_ep{:05}.tmqn", l.episode + 1));
            if let Err(e) = write_file(&path, save_checkpoint(end.params, end.adam, &meta)) {
                self.error = Some(e);
            }
        }
        if let Some(v) = self.validator.as_mut() {
            v.on_episode(end);
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let loaded = load(&args.common)?;
    let setup = loaded.cfg.train_setup(&loaded.map)?;
    let validator = match loaded.cfg.seed.validation_seeds {
        0 => None,
        n => Some(Validator::new(
            loaded.cfg.env_config(&loaded.map),
            Arc::clone(&loaded.map),
            validation_seeds(loaded.cfg.seed.master, n),
        )?),
    };
    let mut writer = CheckpointWriter { dir: loaded.out.clone(), seed: setup.seed, validator, error: None };
    let outcome = train(Arc::clone(&loaded.map), &setup, &mut writer)?;
    if let Some(e) = writer.error {
        return Err(e);
    }
    write_file(&loaded.out.join("train_log.csv"), training_log_csv(&outcome.log))?;
    let meta = CheckpointMeta { episode: outcome.log.len() as u64, seed: setup.seed, note: "final".into() };
    let final_path = loaded.out.join("checkpoint_final.tmqn");
    write_file(&final_path, save_checkpoint(&outcome.params, &outcome.adam, &meta))?;
    println!("trained {} episodes; checkpoint {}", outcome.log.len(), final_path.display());
    if let Some(v) = writer.validator {
        write_file(&loaded.out.join("validation.csv"), v.history_csv())?;
        if let Some(best) = v.finish()? {
            let meta = CheckpointMeta { episode: best.episode as u64, seed: setup.seed, note: "best".into() };
            let best_path = loaded.out.join("checkpoint_best.tmqn");
            write_file(&best_path, save_checkpoint(&best.params, &best.adam, &meta))?;
            println!(
                "best validation mean_u {:.6} at episode {}; checkpoint {}",
                best.mean,
                best.episode,
                best_path.display()
            );
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let loaded = load(&args.common)?;
    let policy = make_policy(&args.policy, &loaded)?;
    let env = loaded.cfg.env_config(&loaded.map);
    let seeds = seeds_for(&args.policy, &loaded.cfg);
    let report = evaluate(policy.as_ref(), &env, &loaded.map, &seeds, args.policy.workers, false)?;
    let mut csv = String::from("seed,mean_u\n");
    for (seed, u) in seeds.iter().zip(&report.per_seed) {
        csv.push_str(&format!("{seed},{u}\n"));
    }
    write_file(&loaded.out.join(format!("eval_{}.csv", report.policy)), csv)?;
    let roads = loaded.map.road_cells().len() as f64;
    println!(
        "policy {}  seeds {}  mean_u {:.6}  std {:.6}  mean_u_per_road_cell {:.6}  collision_rate {:.6}",
        report.policy,
        seeds.len(),
        report.mean,
        report.std,
        report.mean / roads,
        report.collision_rate
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let loaded = load(&args.common)?;
    let var = SweepVar::parse(&args.var)
        .ok_or_else(|| CliError::Config(format!("unknown sweep variable `{}` (use N or T_u)", args.var)))?;
    let policy = make_policy(&args.policy, &loaded)?;
    let env = loaded.cfg.env_config(&loaded.map);
    let seeds = seeds_for(&args.policy, &loaded.cfg);
    let table = sweep(policy.as_ref(), var, &args.values, &env, &loaded.map, &seeds, args.policy.workers)?;
    emit_artifacts(&[], std::slice::from_ref(&table), &loaded.map, &loaded.out)?;
    print!("{}", table.to_csv());
    let means: Vec<f64> = table.rows.iter().map(|r| r.mean).collect();
    let trend = if means.windows(2).all(|w| w[1] < w[0]) {
        "strictly decreasing"
    } else if means.windows(2).all(|w| w[1] <= w[0]) {
        "non-increasing"
    } else if means.windows(2).all(|w| w[1] >= w[0]) {
        "non-decreasing"
    } else {
        "not monotone"
    };
    println!("trend in {}: {trend}", var.label());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let arch = match args.arch {
        ArchKind::Tiny => NetArch::tiny(),
        ArchKind::Default => NetArch::default_for(args.size),
    };
    let report = gradient_check(&arch, args.seed, args.draws).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "draws {}  coordinates {}  kinks skipped {}  max relative error {:.3e}",
        report.draws, report.coordinates, report.kinks, report.max_rel_error
    );
    if report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(CliError::Runtime(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )));
    }
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<(), CliError> {
    let loaded = load(&args.common)?;
    let policy = make_policy(&args.policy, &loaded)?;
    let env = loaded.cfg.env_config(&loaded.map);
    let seeds = seeds_for(&args.policy, &loaded.cfg);
    let report = evaluate(policy.as_ref(), &env, &loaded.map, &seeds, args.policy.workers, true)?;
    let dir = loaded.out.join(format!("render_{}", report.policy));
    let mut files = emit_artifacts(&report.traces, &[], &loaded.map, &dir)?;
    let m = loaded.map.size();
    for trace in &report.traces {
        let mut csv = String::from("t,row,col,u\n");
        for step in &trace.steps {
            for (k, u) in step.field.iter().flatten().enumerate() {
                csv.push_str(&format!("{},{},{},{u}\n", step.t, k / m, k % m));
            }
        }
        let path = dir.join(format!("field_{}.csv", trace.seed));
        write_file(&path, csv)?;
        files.push(path);
    }
    write_file(&dir.join("map.txt"), loaded.map.to_text())?;
    println!("wrote {} files to {}", files.len() + 1, dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::RenderData(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
