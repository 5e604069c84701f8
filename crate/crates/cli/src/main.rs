//! `dynasaur` command-line interface.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dynasaur::checkpoint::{load_run, save_run};
use dynasaur::config::{Profile, RunConfig};
use dynasaur::env::{viability_oracle, EnvId, SlopeCarParams, ViabilityGridSpec};
use dynasaur::metrics::{
    append_metrics, append_training, filter_interval_map, write_filter_map, write_json, write_viability,
    FilterMapGrid, RunSummary,
};
use dynasaur::orchestrator::{evaluate_control, stage_rng, LearnedFilter, Orchestrator, PassThrough, SafetyFilter, STAGE_EVAL};
use serde_json::json;

/// Default output root when `--out` is not given.
const OUT_ENV: &str = "DYNASAUR_OUT";

#[derive(Parser)]
#[command(name = "dynasaur", version, about = "Safe model-based RL with learned hyperplane safety filters")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the learning loop and write a run directory.
    Train(TrainArgs),
    /// Evaluate the greedy filtered policy of a checkpoint.
    Eval(EvalArgs),
    /// Export the admissible-action interval of a CartPole filter over (x, θ).
    ExportFilterMap(ExportArgs),
    /// Launch one training process per seed.
    Sweep(SweepArgs),
    /// Dump the slope-car viability kernel computed by dynamic programming.
    Oracle(OracleArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Environment: cartpole or slopecar.
    #[arg(long, default_value = "cartpole")]
    env: String,
    /// Hyperparameter profile: paper or desk.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// TOML configuration file; command-line values override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Ablation: no-regularization, no-start-state-shaping,
    /// raw-hyperplane-parametrization or disable-filter. Repeatable.
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    /// Override a dotted configuration key, e.g. `--set filter.c=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::new(self.env.parse::<EnvId>()?, self.profile.parse::<Profile>()?),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iters {
            cfg.iterations = n;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not of the form key=value"))?;
            cfg.set_override(k.trim(), v.trim())?;
        }
        for a in &self.ablate {
            cfg.apply_ablation(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn forwarded(&self) -> Vec<String> {
        let mut out = vec!["--env".into(), self.env.clone(), "--profile".into(), self.profile.clone()];
        if let Some(c) = &self.config {
            out.extend(["--config".into(), c.display().to_string()]);
        }
        if let Some(n) = self.iters {
            out.extend(["--iters".into(), n.to_string()]);
        }
        for a in &self.ablate {
            out.extend(["--ablate".into(), a.clone()]);
        }
        for s in &self.set {
            out.extend(["--set".into(), s.clone()]);
        }
        out
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output root; defaults to $DYNASAUR_OUT or ./runs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name under the output root.
    #[arg(long)]
    name: Option<String>,
    /// Continue from the run directory's latest checkpoint.
    #[arg(long)]
    resume: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (or a run directory).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Defaults to the seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Fail unless the checkpoint was trained on this environment.
    #[arg(long)]
    env: Option<String>,
    /// Write the summary JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grid as `<x cells>x<θ cells>`.
    #[arg(long, default_value = "50x50")]
    grid: String,
    #[arg(long, default_value_t = -2.4, allow_hyphen_values = true)]
    x_min: f64,
    #[arg(long, default_value_t = 2.4)]
    x_max: f64,
    #[arg(long, default_value_t = -std::f64::consts::PI, allow_hyphen_values = true)]
    theta_min: f64,
    #[arg(long, default_value_t = std::f64::consts::PI)]
    theta_max: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    x_dot: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    theta_dot: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Seeds as a list (`0,1,4`) or a half-open range (`0..5`).
    #[arg(long, default_value = "0..5")]
    seeds: String,
    /// Processes run at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 161)]
    pos_cells: usize,
    #[arg(long, default_value_t = 241)]
    vel_cells: usize,
    #[arg(long, default_value_t = 11)]
    actions: usize,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

fn out_root(explicit: Option<&PathBuf>) -> PathBuf {
    explicit
        .cloned()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_name(cfg: &RunConfig, ablate: &[String]) -> String {
    let mut name = format!("{}-{}-s{}", cfg.env, cfg.profile, cfg.seed);
    for a in ablate {
        name.push('-');
        name.push_str(a);
    }
    name
}

/// Resolve a checkpoint argument that may point at a run directory.
fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("manifest.json").exists() {
        p.to_path_buf()
    } else {
        p.join("checkpoint")
    }
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let cfg = args.cfg.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(ExitCode::SUCCESS);
    }
    let dir = out_root(args.out.as_ref()).join(args.name.clone().unwrap_or_else(|| run_name(&cfg, &args.cfg.ablate)));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let latest = dir.join("checkpoint");
    let mut orch = if args.resume && latest.join("manifest.json").exists() {
        let (saved, state) = load_run(&latest)?;
        if saved.env != cfg.env {
            bail!("checkpoint in {} was trained on {}, not {}", dir.display(), saved.env, cfg.env);
        }
        let mut resumed = saved;
        resumed.iterations = cfg.iterations;
        Orchestrator::from_state(resumed, state)?
    } else {
        for f in ["metrics.csv", "training.csv"] {
            let _ = std::fs::remove_file(dir.join(f));
        }
        Orchestrator::new(cfg)?
    };
    std::fs::write(dir.join("config.toml"), orch.config.to_toml_string()?)?;
    write_json(
        &dir.join("seeds.json"),
        &json!({
            "seed": orch.config.seed,
            "prior_data_seed": orch.config.seed,
            "stage_streams": "iteration j, stage k: ChaCha8(seed) on stream ((j + 1) << 8) | k; k = 0 model, 1 filter, 2 control, 3 eval",
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )?;
    log::info!("run directory {}", dir.display());

    let outcome = catch_unwind(AssertUnwindSafe(|| {
        orch.run(|o, m| {
            append_metrics(&dir.join("metrics.csv"), m)?;
            append_training(&dir.join("training.csv"), &o.state.training_log)?;
            save_run(&dir.join("checkpoints").join(format!("iter_{:03}", m.iteration)), &o.config, &o.state)?;
            save_run(&latest, &o.config, &o.state)?;
            Ok(())
        })
    }));
    orch.state.training_log.clear();
    let error = match outcome {
        Ok(Ok(())) => None,
        Ok(Err(e)) => Some(e.to_string()),
        Err(panic) => Some(
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()),
        ),
    };
    let last = orch.state.history.last().cloned().unwrap_or_default();
    let summary = RunSummary {
        env: orch.config.env.to_string(),
        seed: orch.config.seed,
        iterations: orch.state.j,
        env_steps_cum: orch.state.env_steps_cum,
        final_return_mean: last.eval_return_mean,
        final_return_ci: last.eval_return_ci,
        failures_cum: orch.state.failures_cum,
        eval_failures_cum: orch.state.eval_failures_cum,
        completed: error.is_none(),
        error: error.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match error {
        None => {
            println!("{}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Some(e) => {
            eprintln!("error: {e}");
            eprintln!("partial outputs kept in {}", dir.display());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let dir = checkpoint_dir(&args.checkpoint);
    let (cfg, state) = load_run(&dir)?;
    if let Some(e) = &args.env {
        let want: EnvId = e.parse()?;
        if want != cfg.env {
            bail!("checkpoint was trained on {}, not {}", cfg.env, want);
        }
    }
    let control = state
        .control_agent
        .as_ref()
        .context("checkpoint has no control policy")?;
    let env = cfg.env.make(cfg.episode_steps);
    if control.config.state_dim != env.spec().state_dim || control.config.action_dim != env.spec().action_dim {
        bail!("checkpoint policy does not match the {} environment", cfg.env);
    }
    let learned;
    let filter: &dyn SafetyFilter = match &state.filter_agent {
        Some(a) => {
            learned = LearnedFilter(a);
            &learned
        }
        None => &PassThrough,
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut rng = stage_rng(seed, state.j, STAGE_EVAL);
    let ev = evaluate_control(env.as_ref(), control, filter, args.episodes, &mut rng)?;
    let summary = json!({
        "env": cfg.env.as_str(),
        "iteration": state.j,
        "seed": seed,
        "episodes": ev.returns.len(),
        "return_mean": ev.mean_return,
        "return_ci95": ev.ci95,
        "failures": ev.failures,
        "returns": ev.returns,
    });
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    match &args.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn export_filter_map(args: ExportArgs) -> Result<ExitCode> {
    let (cx, ct) = args
        .grid
        .split_once('x')
        .context("grid must look like 50x50")?;
    let grid = FilterMapGrid {
        x_range: (args.x_min, args.x_max),
        theta_range: (args.theta_min, args.theta_max),
        x_cells: cx.trim().parse().context("grid x cells")?,
        theta_cells: ct.trim().parse().context("grid θ cells")?,
        x_dot: args.x_dot,
        theta_dot: args.theta_dot,
    };
    let (_, state) = load_run(&checkpoint_dir(&args.checkpoint))?;
    let agent = state.filter_agent.as_ref().context("checkpoint has no filter policy")?;
    let rows = filter_interval_map(agent, &grid)?;
    write_filter_map(&args.out, &rows)?;
    println!("{} rows written to {}", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| Ok(x.trim().parse()?)).collect()
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let seeds = parse_seeds(&args.seeds)?;
    args.cfg.resolve()?;
    let exe = std::env::current_exe()?;
    let root = out_root(args.out.as_ref());
    let mut failed = 0;
    for chunk in seeds.chunks(args.jobs.max(1)) {
        let children = chunk
            .iter()
            .map(|seed| {
                let mut cmd = Command::new(&exe);
                cmd.arg("train").args(args.cfg.forwarded()).args(["--seed", &seed.to_string()]);
                cmd.arg("--out").arg(&root);
                Ok((*seed, cmd.spawn()?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (seed, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                eprintln!("seed {seed} failed with {status}");
                failed += 1;
            }
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn oracle(args: OracleArgs) -> Result<ExitCode> {
    let spec = ViabilityGridSpec {
        pos_cells: args.pos_cells,
        vel_cells: args.vel_cells,
        actions: args.actions,
        horizon: args.horizon,
        ..ViabilityGridSpec::default()
    };
    let params = SlopeCarParams::default();
    let grid = viability_oracle(&params, &spec)?;
    for w in &grid.warnings {
        log::warn!("{w}");
    }
    write_viability(&args.out, &grid, &params)?;
    println!("viable fraction {:.4}", grid.viable_fraction());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::ExportFilterMap(a) => export_filter_map(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::Oracle(a) => oracle(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
