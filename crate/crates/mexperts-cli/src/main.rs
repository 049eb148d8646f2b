//! Command-line driver: synthetic simulations, incentive audits, noise
//! diagnostics, hindsight benchmarks, and the forecast-data pipeline.
//!
//! Exit codes: 0 success, 2 usage errors, 3 data/file errors, 4 config or
//! domain errors.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use mexperts::data::{self, synthetic_dataset, ExperimentConfig, ForecastDataset};
use mexperts::losses::{LossMatrix, UtilityKind};
use mexperts::noise::{NoiseKind, NoiseModel};
use mexperts::sim::{
    brute_force_opt, run_audited_experiment, run_experiment, AgentPolicy, AlgorithmSpec,
    AuditOptions, Environment, RegretTrace, SimConfig,
};
use mexperts::{losses, Error, Result};

#[derive(Parser)]
#[command(
    name = "mexperts",
    version,
    about = "Incentive-compatible expert selection: simulations, audits, and \
             forecast experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate a perturbation distribution: potential, its slope, and the
    /// hazard rate over a z grid.
    NoiseCheck(NoiseCheckArgs),
    /// Run one simulated experiment and emit its round-by-round trace.
    Simulate(SimulateArgs),
    /// Run an experiment while grid-auditing every expert's incentives on a
    /// fixed cadence.
    AuditIc(AuditArgs),
    /// Compute the best fixed expert set in hindsight for a scripted
    /// environment.
    Opt(OptArgs),
    /// Forecast-data pipeline: group sampling, both learners, percentile
    /// bands.
    Nfl(NflArgs),
}

fn parse_noise(s: &str) -> std::result::Result<NoiseKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    /// Single-expert weighted-score update (requires m = 1).
    Wsu,
    /// Weighted-score update over all m-subsets.
    MetaWsu,
    /// Follow the perturbed leader.
    Ftpl,
    /// Online distorted greedy.
    Odg,
}

#[derive(Clone, Copy, ValueEnum)]
enum UtilityArg {
    /// Average of the chosen experts' (1 - loss).
    Modular,
    /// 1 minus the product of the chosen experts' losses.
    Submodular,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// Experts report their beliefs.
    Truthful,
    /// Experts report belief plus a periodically re-audited best-response
    /// offset.
    BestResponse,
    /// Experts report belief plus uniform noise of half-width --delta.
    Uniform,
    /// Experts push reports away from 1/2 by the factor 1 + --gamma.
    Extremizer,
}

#[derive(Args)]
struct NoiseCheckArgs {
    /// laplace, hyperbolic, gaussian (alias: normal), or gumbel.
    #[arg(long, value_parser = parse_noise)]
    model: NoiseKind,
    #[arg(long, default_value_t = -20.0, allow_negative_numbers = true)]
    z_min: f64,
    #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
    z_max: f64,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Write the grid CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CommonRunArgs {
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[arg(long, value_enum, default_value_t = UtilityArg::Modular)]
    utility: UtilityArg,
    /// Number of experts (taken from the script file when --script is set).
    #[arg(short = 'K', long = "experts")]
    experts: Option<usize>,
    /// Experts selected per round.
    #[arg(short = 'm', long = "select", default_value_t = 1)]
    select: usize,
    /// Horizon in rounds (taken from the script file when --script is set).
    #[arg(short = 'T', long = "rounds", default_value_t = 256)]
    rounds: usize,
    /// Step size; each algorithm's documented default applies when absent.
    #[arg(long)]
    eta: Option<f64>,
    /// Perturbation distribution for --algo ftpl.
    #[arg(long, value_parser = parse_noise, default_value = "laplace")]
    noise: NoiseKind,
    #[arg(long, value_enum, default_value_t = PolicyArg::Truthful)]
    policy: PolicyArg,
    /// Half-width of the uniform report perturbation.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Extremizing factor.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Rounds between best-response policy refreshes.
    #[arg(long, default_value_t = 16)]
    refresh_every: usize,
    /// Report grid resolution for audits and the best-response policy.
    #[arg(long, default_value_t = 1e-3)]
    grid_step: f64,
    /// Rival-perturbation realizations per perturbed-leader audit (the
    /// audited expert's own perturbation is integrated exactly).
    #[arg(long, default_value_t = 10_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of scripted beliefs and outcomes (columns b1..bK, outcome).
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Write the trace CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Audit every this-many rounds, starting at round 1.
    #[arg(long, default_value_t = 16)]
    audit_every: usize,
    /// Write the audit CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the run's trace CSV here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct OptArgs {
    #[arg(long, value_enum, default_value_t = UtilityArg::Modular)]
    utility: UtilityArg,
    #[arg(short = 'm', long = "select", default_value_t = 1)]
    select: usize,
    /// CSV of scripted beliefs and outcomes (columns b1..bK, outcome).
    #[arg(long)]
    script: PathBuf,
}

#[derive(Args)]
struct NflArgs {
    /// Forecast CSV (game_id, date, forecaster_id, prob_home_win,
    /// home_won). Relative paths resolve under $MEXPERTS_DATA_DIR when it
    /// is set.
    #[arg(long, required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Generate a synthetic forecast panel instead of reading --data.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 284)]
    games: usize,
    #[arg(long, default_value_t = 274)]
    complete: usize,
    #[arg(long, default_value_t = 10)]
    extras: usize,
    /// Seed for the synthetic panel.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
    /// TOML file mirroring the experiment config fields; flags below
    /// override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short = 'K', long = "experts")]
    experts: Option<usize>,
    #[arg(short = 'm', long = "select")]
    select: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_parser = parse_noise)]
    noise: Option<NoiseKind>,
    #[arg(long)]
    ftpl_eta: Option<f64>,
    #[arg(long)]
    odg_eta: Option<f64>,
    /// Directory for band CSVs and run_meta.txt (created if missing).
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write every individual trace CSV under out_dir/traces.
    #[arg(long)]
    write_traces: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::NoiseCheck(args) => run_noise_check(args),
        Command::Simulate(args) => run_simulate(args),
        Command::AuditIc(args) => run_audit(args),
        Command::Opt(args) => run_opt(args),
        Command::Nfl(args) => run_nfl(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            Error::Data(_) | Error::Io(_) => 3,
            _ => 4,
        };
        std::process::exit(code);
    }
}

fn run_noise_check(args: NoiseCheckArgs) -> Result<()> {
    if !(args.step > 0.0) || args.z_min >= args.z_max {
        return Err(Error::Config(
            "need z-min < z-max and a positive step".into(),
        ));
    }
    let model = NoiseModel::new(args.model);
    let n = ((args.z_max - args.z_min) / args.step).round() as usize;
    let grid: Vec<f64> = (0..=n)
        .map(|i| args.z_min + i as f64 * args.step)
        .collect();
    let hazards = model.hazard_on_grid(&grid)?;

    let mut csv = String::with_capacity(grid.len() * 48);
    csv.push_str("z,nu,nu_prime,hazard\n");
    let mut max_hazard = f64::NEG_INFINITY;
    for (z, h) in grid.iter().zip(&hazards) {
        max_hazard = max_hazard.max(*h);
        csv.push_str(&format!(
            "{z},{},{},{h}\n",
            model.nu(*z),
            model.nu_prime(*z)
        ));
    }
    let cond = model.check_condition1(&grid);
    let mut summary = format!(
        "model: {}\ngrid: [{}, {}] step {} ({} points)\nmax hazard: {max_hazard}\nmax |nu'|: {}\n",
        model.kind(),
        args.z_min,
        args.z_max,
        args.step,
        grid.len(),
        cond.max_abs_nu_prime,
    );
    match model.condition1_bound() {
        Some(b) => {
            let ok = model.verify_hazard_bound(b, &grid)?;
            summary.push_str(&format!(
                "advertised potential-slope bound B = {b}: {}\nhazard <= B on grid: {}\n",
                if cond.bounded { "holds on grid" } else { "VIOLATED on grid" },
                if ok { "yes" } else { "NO" },
            ));
        }
        None => summary.push_str("no potential-slope bound advertised\n"),
    }

    match &args.out {
        Some(path) => {
            File::create(path)?.write_all(csv.as_bytes())?;
            print!("{summary}");
        }
        None => {
            print!("{csv}");
            eprint!("{summary}");
        }
    }
    Ok(())
}

fn with_path_context(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
        other => other,
    }
}

fn build_run(common: &CommonRunArgs) -> Result<(SimConfig, Environment)> {
    let env = match &common.script {
        Some(path) => Environment::from_script(path).map_err(|e| with_path_context(e, path))?,
        None => {
            let k = common.experts.ok_or_else(|| {
                Error::Config("pass -K/--experts or --script".into())
            })?;
            Environment::iid_uniform(common.rounds, k)?
        }
    };
    let k = env.k();
    let m = common.select;
    let utility = match common.utility {
        UtilityArg::Modular => UtilityKind::Modular { m },
        UtilityArg::Submodular => UtilityKind::Submodular,
    };
    let algorithm = match common.algo {
        AlgoArg::Wsu => AlgorithmSpec::Wsu { eta: common.eta },
        AlgoArg::MetaWsu => AlgorithmSpec::MetaWsu { eta: common.eta },
        AlgoArg::Ftpl => AlgorithmSpec::Ftpl {
            noise: common.noise,
            eta: common.eta,
        },
        AlgoArg::Odg => AlgorithmSpec::Odg { eta: common.eta },
    };
    let policy = match common.policy {
        PolicyArg::Truthful => AgentPolicy::Truthful,
        PolicyArg::BestResponse => AgentPolicy::BestResponse {
            refresh_every: common.refresh_every,
            grid_step: common.grid_step,
            mc_samples: common.mc_samples,
        },
        PolicyArg::Uniform => AgentPolicy::UniformPerturbed {
            delta: common.delta,
        },
        PolicyArg::Extremizer => AgentPolicy::Extremizer {
            gamma: common.gamma,
        },
    };
    Ok((
        SimConfig {
            algorithm,
            utility,
            k,
            m,
            seed: common.seed,
            policy,
        },
        env,
    ))
}

fn write_trace(trace: &RegretTrace, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => trace.write_csv(File::create(path)?),
        None => trace.write_csv(std::io::stdout().lock()),
    }
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let (cfg, env) = build_run(&args.common)?;
    let trace = run_experiment(&cfg, &env)?;
    write_trace(&trace, args.out.as_deref())?;
    eprintln!(
        "algo: {}  K = {}  m = {}  T = {}  eta = {}  alpha = {}",
        trace.meta.algorithm,
        trace.meta.k,
        trace.meta.m,
        trace.rounds.len(),
        trace.meta.eta,
        trace.alpha,
    );
    eprintln!(
        "benchmark set: {}  benchmark total: {}  final alpha-regret: {}",
        trace.opt_set,
        trace.opt_total,
        trace.final_regret(),
    );
    Ok(())
}

fn run_audit(args: AuditArgs) -> Result<()> {
    let (cfg, env) = build_run(&args.common)?;
    let opts = AuditOptions {
        every: args.audit_every,
        grid_step: args.common.grid_step,
        mc_samples: args.common.mc_samples,
    };
    let (trace, rows) = run_audited_experiment(&cfg, &env, opts)?;
    match &args.out {
        Some(path) => mexperts::sim::write_audit_csv(File::create(path)?, &rows)?,
        None => mexperts::sim::write_audit_csv(std::io::stdout().lock(), &rows)?,
    }
    if let Some(path) = &args.trace_out {
        trace.write_csv(File::create(path)?)?;
    }
    let max_dev = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let max_gap = rows.iter().map(|r| r.gap).fold(f64::NEG_INFINITY, f64::max);
    eprintln!(
        "audited {} (round, expert) pairs every {} rounds  max deviation: {max_dev}  max gap: {max_gap}",
        rows.len(),
        args.audit_every,
    );
    Ok(())
}

fn run_opt(args: OptArgs) -> Result<()> {
    let file = File::open(&args.script)
        .map_err(|e| with_path_context(Error::from(e), &args.script))?;
    let (beliefs, outcomes) = mexperts::sim::read_script_csv(file)?;
    let mut rows = Vec::with_capacity(beliefs.len());
    for (row, &r) in beliefs.iter().zip(&outcomes) {
        let mut losses_row = Vec::with_capacity(row.len());
        for &b in row {
            losses_row.push(losses::quadratic_loss(b, r)?);
        }
        rows.push(losses_row);
    }
    let matrix = LossMatrix::from_rows(rows)?;
    let kind = match args.utility {
        UtilityArg::Modular => UtilityKind::Modular { m: args.select },
        UtilityArg::Submodular => UtilityKind::Submodular,
    };
    let (set, total) = brute_force_opt(&matrix, kind, args.select)?;
    let alpha = losses::alpha_for(kind, &matrix)?;
    println!("set: {set}");
    println!("total: {total}");
    println!("alpha: {alpha}");
    Ok(())
}

fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(dir) = std::env::var("MEXPERTS_DATA_DIR") {
            return Path::new(&dir).join(path);
        }
    }
    path.to_path_buf()
}

fn load_dataset(args: &NflArgs) -> Result<ForecastDataset> {
    if args.synthetic {
        return synthetic_dataset(args.games, args.complete, args.extras, args.data_seed);
    }
    let raw = args
        .data
        .as_deref()
        .expect("clap enforces --data unless --synthetic");
    let resolved = resolve_data_path(raw);
    data::load_nfl_csv(&resolved).map_err(|e| with_path_context(e, &resolved))
}

fn run_nfl(args: NflArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("bad config file: {e}")))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(k) = args.experts {
        cfg.k = k;
    }
    if let Some(m) = args.select {
        cfg.m = m;
    }
    if let Some(g) = args.groups {
        cfg.groups = g;
    }
    if let Some(r) = args.runs {
        cfg.runs = r;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.horizon.is_some() {
        cfg.horizon = args.horizon;
    }
    if let Some(n) = args.noise {
        cfg.noise = n;
    }
    if args.ftpl_eta.is_some() {
        cfg.ftpl_eta = args.ftpl_eta;
    }
    if args.odg_eta.is_some() {
        cfg.odg_eta = args.odg_eta;
    }

    let dataset = load_dataset(&args)?;
    let outcome = data::run_nfl_experiment(&cfg, &dataset)?;

    std::fs::create_dir_all(&args.out_dir)?;
    data::write_band_csv(
        File::create(args.out_dir.join("band_ftpl.csv"))?,
        &outcome.ftpl.bands,
    )?;
    data::write_band_csv(
        File::create(args.out_dir.join("band_odg.csv"))?,
        &outcome.odg.bands,
    )?;
    let complete = dataset.filter_complete()?;
    let mut meta = outcome.meta.clone();
    for (g, members) in outcome.groups.iter().enumerate() {
        let names: Vec<&str> = members
            .iter()
            .map(|&f| complete.forecasters()[f].as_str())
            .collect();
        meta.push_str(&format!("group {}: {}\n", g + 1, names.join(", ")));
    }
    File::create(args.out_dir.join("run_meta.txt"))?.write_all(meta.as_bytes())?;

    if args.write_traces {
        let dir = args.out_dir.join("traces");
        std::fs::create_dir_all(&dir)?;
        for (result, name) in [(&outcome.ftpl, "ftpl"), (&outcome.odg, "odg")] {
            for (i, trace) in result.traces.iter().enumerate() {
                let g = i / cfg.runs + 1;
                let r = i % cfg.runs + 1;
                trace.write_csv(File::create(
                    dir.join(format!("{name}_g{g}_r{r}.csv")),
                )?)?;
            }
        }
    }
    let last_f = outcome.ftpl.bands.last().expect("nonempty bands");
    let last_o = outcome.odg.bands.last().expect("nonempty bands");
    eprintln!(
        "wrote {} (final mean average regret: ftpl {:.4}, odg {:.4})",
        args.out_dir.display(),
        last_f.mean,
        last_o.mean,
    );
    Ok(())
}
