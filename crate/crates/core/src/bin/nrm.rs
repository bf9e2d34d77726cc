use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use nrm_core::baselines::EtcConfigFile;
use nrm_core::bench::{make_policy, run_bench, write_outputs, BenchPlan, PolicyKind, FLUID_TOL};
use nrm_core::checks::run_checks;
use nrm_core::fluid::{solve_fluid, Instance};
use nrm_core::pdnrm::{ConstantsMode, PdNrmConfig, PdNrmConfigFile};
use nrm_core::sim::{percentage_loss, run_episode, EpisodeOptions};
use nrm_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "nrm",
    version,
    about = "Network revenue management pricing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fluid problem and print the solution as JSON.
    Fluid { instance: PathBuf },
    /// Run one episode of a policy.
    Run {
        instance: PathBuf,
        /// pdnrm, clairvoyant or etc
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-period trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Algorithm event log (JSON lines).
        #[arg(long)]
        events: Option<PathBuf>,
        /// Policy configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the instance horizon.
        #[arg(long)]
        horizon: Option<u64>,
    },
    /// Execute a benchmark plan.
    Bench {
        plan: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        /// Record wall-clock times (outputs are then not byte-reproducible).
        #[arg(long)]
        timing: bool,
        /// Replace the plan's horizons, e.g. 10000,100000,1000000,10000000
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<u64>>,
        #[arg(long)]
        replications: Option<u64>,
    },
    /// Run the invariant suite; exits 1 if any check fails.
    Check {
        instance: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the resolved PD-NRM configuration.
    Constants {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Tuned)]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Theory,
    Tuned,
    Explicit,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn read_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn load_instance(path: &Path, horizon: Option<u64>) -> Result<Instance> {
    let inst = Instance::load(path)?;
    Ok(match horizon {
        Some(t) => inst.with_horizon(t),
        None => inst,
    })
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(
    instance: &Path,
    policy: &str,
    seed: u64,
    trace: Option<&Path>,
    events: Option<&Path>,
    config: Option<&PathBuf>,
    horizon: Option<u64>,
) -> Result<bool> {
    let inst = load_instance(instance, horizon)?;
    let kind = PolicyKind::parse(policy)?;
    let fluid = solve_fluid(&inst, FLUID_TOL)?;
    let (pd, etc): (PdNrmConfigFile, EtcConfigFile) = match kind {
        PolicyKind::Pdnrm => (read_or_default(config)?, EtcConfigFile::default()),
        PolicyKind::Etc => (PdNrmConfigFile::default(), read_or_default(config)?),
        PolicyKind::Clairvoyant => Default::default(),
    };
    let mut p = make_policy(kind, &inst, &fluid, &pd, &etc)?;
    let opts = EpisodeOptions {
        record: trace.is_some(),
        ..Default::default()
    };
    let out = run_episode(&inst, p.as_mut(), seed, &opts)?;
    if let Some(path) = trace {
        out.write_csv_file(path)?;
    }
    if let Some(path) = events {
        out.write_events(std::fs::File::create(path)?)?;
    }
    print_json(&serde_json::json!({
        "policy": kind.as_str(),
        "seed": seed,
        "T": inst.horizon,
        "revenue": out.total_revenue,
        "loss": percentage_loss(&inst, &fluid, out.total_revenue),
        "shutoff": out.shutoff_period,
        "final_inventory": out.final_inventory.as_slice(),
        "digest": format!("{:016x}", out.digest),
        "violations": out.violations,
    }))?;
    Ok(out.is_clean())
}

fn cmd_bench(
    plan: &Path,
    output_dir: Option<PathBuf>,
    threads: Option<usize>,
    timing: bool,
    t_grid: Option<Vec<u64>>,
    replications: Option<u64>,
) -> Result<()> {
    let mut plan = BenchPlan::load(plan)?;
    if let Some(n) = threads {
        plan.file.threads = Some(n);
    }
    if let Some(g) = t_grid {
        plan.file.t_grid = g;
    }
    if let Some(r) = replications {
        plan.file.replications = r;
    }
    plan.file.timing |= timing;
    plan.validate()?;
    let dir = output_dir
        .or_else(|| plan.file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let start = Instant::now();
    let summary = run_bench(&plan)?;
    let wall = if plan.file.timing {
        start.elapsed().as_secs_f64()
    } else {
        0.0
    };
    write_outputs(&plan, &summary, &dir, wall)?;
    println!(
        "{:<12} {:>10} {:>10} {:>10}",
        "policy", "T", "mean_loss", "stderr"
    );
    for r in &summary.rows {
        println!(
            "{:<12} {:>10} {:>10.4} {:>10.4}",
            r.policy.as_str(),
            r.horizon,
            r.mean_loss,
            r.stderr
        );
    }
    for (k, s) in &summary.slopes {
        if let Some(s) = s {
            println!("log-log regret slope {}: {s:.3}", k.as_str());
        }
    }
    let failed = summary
        .episodes
        .iter()
        .filter(|e| e.error.is_some())
        .count();
    if failed > 0 {
        eprintln!("{failed} episodes failed; see metadata.json");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_constants(
    instance: &Path,
    mode: Mode,
    config: Option<&PathBuf>,
    horizon: Option<u64>,
) -> Result<()> {
    let inst = load_instance(instance, horizon)?;
    let mut file: PdNrmConfigFile = read_or_default(config)?;
    file.mode = match mode {
        Mode::Theory => ConstantsMode::Theory,
        Mode::Tuned => ConstantsMode::Tuned,
        Mode::Explicit => ConstantsMode::Explicit,
    };
    let cfg = PdNrmConfig::resolve(&file, &inst)?;
    let pbox = cfg.interior_box(&inst);
    print_json(&serde_json::json!({
        "mode": cfg.mode,
        "T": cfg.horizon,
        "constants": cfg.constants,
        "lambda_max": cfg.dual_set.lambda_max,
        "p_margin": cfg.p_margin,
        "price_region": [pbox.lo.as_slice(), pbox.hi.as_slice()],
        "rho_bar": cfg.rho_bar,
        "warm_start": cfg.warm_start,
        "max_dual_updates": cfg.max_dual_updates(),
        "max_loops_per_epoch": cfg.max_loops_per_epoch(),
    }))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidInstance(_)
        | Error::Dimension { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fluid { instance } => load_instance(&instance, None)
            .and_then(|inst| solve_fluid(&inst, FLUID_TOL))
            .and_then(|sol| print_json(&sol.report())),
        Command::Run {
            instance,
            policy,
            seed,
            trace,
            events,
            config,
            horizon,
        } => match cmd_run(
            &instance,
            &policy,
            seed,
            trace.as_deref(),
            events.as_deref(),
            config.as_ref(),
            horizon,
        ) {
            Ok(false) => return ExitCode::from(1),
            other => other.map(|_| ()),
        },
        Command::Bench {
            plan,
            output_dir,
            threads,
            timing,
            t_grid,
            replications,
        } => cmd_bench(&plan, output_dir, threads, timing, t_grid, replications),
        Command::Check {
            instance,
            config,
            seed,
        } => {
            let run = || -> Result<bool> {
                let inst = load_instance(&instance, None)?;
                let report = run_checks(&inst, &read_or_default(config.as_ref())?, seed)?;
                print!("{report}");
                Ok(report.passed())
            };
            match run() {
                Ok(true) => Ok(()),
                Ok(false) => return ExitCode::from(1),
                Err(e) => Err(e),
            }
        }
        Command::Constants {
            instance,
            mode,
            config,
            horizon,
        } => cmd_constants(&instance, mode, config.as_ref(), horizon),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
