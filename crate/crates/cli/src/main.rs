use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use branchlab::config::ConfigFile;
use branchlab::engine::{par_replicates, run_conditioned, run_conditioned_on, run_once, RunRecord, DEFAULT_PARTICLE_CAP};
use branchlab::genealogy::{coalescence_times, coalescent_csv_header, coalescent_csv_row, sample_survivors};
use branchlab::loglaplace::{self, GridSpec};
use branchlab::model::{ModelSpec, ValidatedModel};
use branchlab::report::{jsonl_line, Provenance};
use branchlab::rng::SeedPath;
use branchlab::stats::DEFAULT_LEVEL;
use branchlab::superprocess::{laplace_mc, solver_target, InitialIntensity, LaplaceRow, ScalingFamily, SolverSettings, TestFunction};
use branchlab::verify::{self, PassCache, VerifyOptions, CRITERIA, LEVEL_CALIBRATED_CHECKS};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const USAGE: u8 = 2;
const RUNTIME: u8 = 3;
const MAX_ATTEMPTS: u64 = 1_000_000;

/// Monte Carlo laboratory for critical age-dependent branching Markov processes.
#[derive(Parser, Debug)]
#[command(name = "branchlab", version = branchlab::report::version())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Base seed; every random draw derives from it. Required here or in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replicate count (overrides the command default).
    #[arg(long, global = true)]
    reps: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Key-value config file with the model and defaults for seed, reps and threads.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate runs and emit one JSONL row per run.
    Simulate {
        #[arg(long)]
        t: f64,
        /// Condition each run on survival to t.
        #[arg(long)]
        conditioned: bool,
    },
    /// Run an acceptance criterion by name, or `all`.
    Verify {
        name: String,
        /// Per-test level; `all` splits it across the calibrated tests.
        #[arg(long, default_value_t = DEFAULT_LEVEL)]
        level: f64,
    },
    /// Coalescence times of k survivors, one CSV row per conditioned run.
    Coalescent {
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Log-Laplace functional of the scaled particle system against the limit solver.
    Superprocess {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        t: f64,
        /// const:<c> | gauss | age-exp
        #[arg(long, default_value = "gauss")]
        f: TestFunction,
    },
    /// Solve the limit log-Laplace equation; CSV of (t, x, u) plus a JSON summary.
    Loglaplace {
        #[arg(long, default_value = "gauss")]
        f: TestFunction,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1601)]
        nx: usize,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

struct Settings {
    seed: u64,
    reps: Option<u64>,
    model: ValidatedModel,
    out: Option<PathBuf>,
}

fn settings(global: &Global) -> Result<Settings, Failure> {
    let config = match &global.config {
        Some(path) => fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?.parse::<ConfigFile>().map_err(usage)?,
        None => ConfigFile::default(),
    };
    let seed = match global.seed {
        Some(s) => s,
        None => config.parse_value::<u64>("seed").map_err(usage)?.ok_or_else(|| usage("--seed is required"))?,
    };
    let reps = match global.reps {
        Some(r) => Some(r),
        None => config.parse_value::<u64>("reps").map_err(usage)?,
    };
    let threads = match global.threads {
        Some(t) => Some(t),
        None => config.parse_value::<usize>("threads").map_err(usage)?,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    let spec = if config.get("lifetime").is_some() { config.model_spec().map_err(usage)? } else { ModelSpec::binary_exponential(1.0) };
    let model = spec.validate().map_err(usage)?;
    Ok(Settings { seed, reps, model, out: global.out.clone() })
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| usage(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn positive_horizon(t: f64) -> Result<f64, Failure> {
    if t.is_finite() && t >= 0.0 {
        Ok(t)
    } else {
        Err(usage(format!("--t must be a nonnegative number, got {t}")))
    }
}

#[derive(Serialize)]
struct SimulateRow<'a> {
    replicate: u64,
    attempts: u64,
    horizon: f64,
    n_alive: usize,
    snapshot: &'a [(f64, f64, usize)],
}

fn simulate(s: &Settings, t: f64, conditioned: bool) -> Result<bool, Failure> {
    let t = positive_horizon(t)?;
    let reps = s.reps.unwrap_or(10);
    let runs: Vec<RunRecord> = par_replicates(reps, |r| {
        let path = SeedPath::new(s.seed, r);
        if conditioned {
            run_conditioned(&s.model, t, path, DEFAULT_PARTICLE_CAP, MAX_ATTEMPTS)
        } else {
            run_once(&s.model, t, path, DEFAULT_PARTICLE_CAP)
        }
    })
    .into_iter()
    .collect::<Result<_, _>>()
    .map_err(runtime)?;
    let prov = Provenance::new(s.seed, reps, s.model.digest());
    let mut w = output(&s.out)?;
    let mut alive = 0;
    for run in &runs {
        let row = run.to_row();
        alive += row.n_alive;
        let body = SimulateRow { replicate: row.replicate, attempts: row.attempts, horizon: row.horizon, n_alive: row.n_alive, snapshot: &row.snapshot };
        writeln!(w, "{}", jsonl_line(&prov, &body)).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    eprintln!("simulate: {reps} runs to t={t}, mean alive {:.4}", alive as f64 / reps as f64);
    Ok(true)
}

fn run_verify(s: &Settings, name: &str, level: f64) -> Result<bool, Failure> {
    if !(level > 0.0 && level < 1.0) {
        return Err(usage(format!("--level must lie in (0, 1), got {level}")));
    }
    let names: Vec<&str> = if name == "all" {
        CRITERIA.iter().map(|(n, _)| *n).collect()
    } else if CRITERIA.iter().any(|(n, _)| *n == name) {
        vec![name]
    } else {
        let known: Vec<&str> = CRITERIA.iter().map(|(n, _)| *n).collect();
        return Err(usage(format!("unknown criterion `{name}`; expected one of: all, {}", known.join(", "))));
    };
    let level = if name == "all" { level / LEVEL_CALIBRATED_CHECKS as f64 } else { level };
    let opts = VerifyOptions { seed: s.seed, reps: s.reps, level };
    let mut cache = PassCache::default();
    let mut w = output(&s.out)?;
    let mut all_passed = true;
    for n in names {
        let outcome = verify::run_criterion(n, &opts, &mut cache).map_err(runtime)?;
        all_passed &= outcome.passed();
        for line in outcome.jsonl() {
            writeln!(w, "{line}").map_err(runtime)?;
        }
        eprintln!("{outcome}");
    }
    w.flush().map_err(runtime)?;
    Ok(all_passed)
}

fn coalescent(s: &Settings, t: f64, k: usize) -> Result<bool, Failure> {
    let t = positive_horizon(t)?;
    if k < 2 {
        return Err(usage("--k must be at least 2"));
    }
    let reps = s.reps.unwrap_or(1000);
    let rows: Vec<String> = par_replicates(reps, |r| {
        let path = SeedPath::new(s.seed, r);
        let run = run_conditioned_on(&s.model, t, path, DEFAULT_PARTICLE_CAP, MAX_ATTEMPTS, k).map_err(runtime)?;
        let ids = sample_survivors(&run, k, &mut branchlab::engine::auxiliary_stream(path, "survivors")).map_err(runtime)?;
        let sample = coalescence_times(&run.arena, &ids).map_err(runtime)?;
        Ok(coalescent_csv_row(t, &sample, run.alive_count()))
    })
    .into_iter()
    .collect::<Result<_, Failure>>()?;
    let mut w = output(&s.out)?;
    writeln!(w, "{}", coalescent_csv_header(k)).map_err(runtime)?;
    for row in rows {
        writeln!(w, "{row}").map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    eprintln!("coalescent: {reps} conditioned runs, seed {}, model {}", s.seed, s.model.digest());
    Ok(true)
}

fn superprocess(s: &Settings, n: usize, lambda: f64, t: f64, f: TestFunction) -> Result<bool, Failure> {
    let t = positive_horizon(t)?;
    let reps = s.reps.unwrap_or(1000);
    let family = ScalingFamily::standard(n, lambda).map_err(usage)?;
    let estimate = laplace_mc(&family, f, t, reps, s.seed, DEFAULT_PARTICLE_CAP).map_err(runtime)?;
    let target = solver_target(&family, f, t, SolverSettings::default()).map_err(runtime)?;
    let row = LaplaceRow { n, t, f: f.to_string(), estimate: estimate.value, stderr: estimate.stderr, solver_target: target };
    let prov = Provenance::new(s.seed, reps, family.base_model().map_err(runtime)?.digest());
    let mut w = output(&s.out)?;
    writeln!(w, "{}", jsonl_line(&prov, &row)).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    eprintln!("superprocess: n={n} t={t} f={f}: {estimate} against solver {target:.6}");
    Ok(true)
}

#[derive(Serialize)]
struct SolveSummary {
    f: String,
    lambda: f64,
    psi: f64,
    t: f64,
    dt: f64,
    nx: usize,
    x_lo: f64,
    x_hi: f64,
    nu: InitialIntensity,
    pairing: f64,
    max_u: f64,
    min_u: f64,
}

fn solve(s: &Settings, f: TestFunction, lambda: f64, psi: f64, t: f64, dt: f64, nx: usize) -> Result<bool, Failure> {
    let t = positive_horizon(t)?;
    let nu = InitialIntensity::standard(lambda);
    nu.check().map_err(usage)?;
    let radius = SolverSettings::default().radius.max(nu.mean.abs() + 8.0 * nu.sd);
    let grid = GridSpec::centred(lambda, psi, t, radius, nx, dt).map_err(usage)?;
    // step and grid problems come from the flags
    let sol = loglaplace::solve_u(|a, x| f.eval(a, x), lambda, psi, grid).map_err(usage)?;
    let pairing = sol.pair_final(|x| nu.spatial_density(x)).map_err(runtime)?;
    let summary = SolveSummary {
        f: f.to_string(),
        lambda,
        psi,
        t,
        dt,
        nx,
        x_lo: grid.x_lo(),
        x_hi: grid.x_hi(),
        nu,
        pairing,
        max_u: sol.max_value(),
        min_u: sol.min_value(),
    };
    let mut w = output(&s.out)?;
    w.write_all(sol.to_csv().as_bytes()).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    let line = jsonl_line(&Provenance::new(s.seed, 0, s.model.digest()), &summary);
    match &s.out {
        Some(path) => {
            let summary_path = summary_path(path);
            fs::write(&summary_path, format!("{line}\n")).map_err(runtime)?;
            println!("{line}");
        }
        None => eprintln!("{line}"),
    }
    Ok(true)
}

fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("summary.json")
}

fn dispatch(cli: Cli) -> Result<bool, Failure> {
    let s = settings(&cli.global)?;
    match cli.command {
        Command::Simulate { t, conditioned } => simulate(&s, t, conditioned),
        Command::Verify { name, level } => run_verify(&s, &name, level),
        Command::Coalescent { t, k } => coalescent(&s, t, k),
        Command::Superprocess { n, lambda, t, f } => superprocess(&s, n, lambda, t, f),
        Command::Loglaplace { f, lambda, psi, t, dt, nx } => solve(&s, f, lambda, psi, t, dt, nx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(RUNTIME)
        }
    }
}
