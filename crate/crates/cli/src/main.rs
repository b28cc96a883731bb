//! `aoi-lab`: runs the optimize, train, simulate, certify and gradcheck
//! experiments from a TOML config.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 certification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use aoi_core::harness::{self, ExperimentConfig, TrainOptions};
use aoi_core::Error;

#[derive(Parser, Debug)]
#[command(name = "aoi-lab", version, about = "Age-aware grant-free access experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Validate the configuration and report what would run.
    #[arg(long)]
    dry_run: bool,
    /// Override a config value, e.g. `system.pilot_len=12`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Best (delta, p) per pilot length.
    Optimize(Common),
    /// Train an unfolded autoencoder.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Run a simulation scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override the scenario seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Certify the error bound of the gated unfolded decoder.
    Certify(Common),
    /// Finite-difference check of the backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Certification(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Certification(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Runtime(e) | Failure::Certification(e) => e,
        }
    }
}

fn classify(e: Error) -> Failure {
    match e {
        Error::InvalidConfig(_)
        | Error::Toml(_)
        | Error::MissingCheckpoint(_)
        | Error::DimensionMismatch { .. }
        | Error::NoFeasiblePoint => Failure::Config(e.into()),
        Error::Inadmissible { .. } | Error::NotNormalized { .. } | Error::MembershipViolation { .. } => {
            Failure::Certification(e.into())
        }
        _ => Failure::Runtime(e.into()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).context("empty override key")?;
    let mut node = table;
    for part in parts {
        node = node
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{part}` is not a section"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn load(c: &Common) -> Result<ExperimentConfig, Failure> {
    if c.sets.is_empty() {
        return ExperimentConfig::load(&c.config).map_err(classify);
    }
    let text = std::fs::read_to_string(&c.config)
        .with_context(|| format!("cannot read {}", c.config.display()))
        .map_err(Failure::Config)?;
    let mut table: toml::Table = text.parse().context("parsing config").map_err(Failure::Config)?;
    for s in &c.sets {
        apply_override(&mut table, s).map_err(Failure::Config)?;
    }
    let merged = toml::to_string(&table).context("re-serializing config").map_err(Failure::Config)?;
    ExperimentConfig::from_toml_str(&merged).map_err(classify)
}

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn init_pool(workers: usize) {
    if workers > 0 {
        // only the first call configures the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

fn workers_or_all(workers: usize) -> usize {
    if workers > 0 {
        workers
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

fn optimize(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    init_pool(c.workers);
    if c.dry_run {
        let sec = cfg.optimize_section().map_err(classify)?;
        println!("pilot lengths: {:?}", sec.pilot_lengths);
        return Ok(());
    }
    let rows = harness::cmd_optimize(&cfg).map_err(classify)?;
    runtime(std::fs::create_dir_all(&c.out).context("creating output directory"))?;
    let path = c.out.join("optimize.csv");
    harness::write_csv(&rows, &path).map_err(classify)?;
    println!("{:>4} {:>6} {:>6} {:>6} {:>8} {:>10}", "M", "s_max", "delta", "p", "q", "avg_aoi");
    for r in &rows {
        println!(
            "{:>4} {:>6} {:>6} {:>6.2} {:>8.5} {:>10.4}",
            r.pilot_len, r.s_max, r.delta, r.p, r.q, r.avg_aoi
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn train(c: &Common, resume: Option<PathBuf>, max_steps: Option<u64>) -> Result<(), Failure> {
    let cfg = load(c)?;
    let plan = harness::train_plan(&cfg).map_err(classify)?;
    if c.dry_run {
        println!("{plan}");
        return Ok(());
    }
    init_pool(c.workers);
    let start = std::time::Instant::now();
    let outcome = harness::cmd_train(&cfg, c.seed, &c.out, &TrainOptions { resume, max_steps }).map_err(classify)?;
    println!(
        "{} steps in {:.1}s, final loss {}, {}",
        outcome.steps_run,
        start.elapsed().as_secs_f64(),
        outcome.last_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        if outcome.finished { "finished" } else { "stopped early" }
    );
    println!("wrote {} and {}", outcome.checkpoint.display(), outcome.loss_csv.display());
    Ok(())
}

fn simulate(c: &Common, seeds: Option<Vec<u64>>) -> Result<(), Failure> {
    let cfg = load(c)?;
    let scenario = cfg.simulate_section().map_err(classify)?;
    if c.dry_run {
        let points = harness::sweep_points(&cfg, scenario).map_err(classify)?;
        let n_seeds = seeds.as_ref().map_or(scenario.seeds.len(), Vec::len);
        println!(
            "{}: {} points x {} schemes x {} seeds, horizon {}",
            scenario.name,
            points.len(),
            scenario.schemes.len(),
            n_seeds,
            scenario.horizon
        );
        for p in &points {
            println!("  {} delta={} p={}", p.label, p.cfg.age_threshold, p.cfg.access_prob);
        }
        return Ok(());
    }
    let out = harness::cmd_simulate(&cfg, &c.out, workers_or_all(c.workers), seeds.as_deref()).map_err(classify)?;
    println!("{:<16} {:<10} {:>10} {:>8} {:>10}", "point", "scheme", "aoi", "std", "detect");
    for r in &out.aggregate {
        println!(
            "{:<16} {:<10} {:>10.4} {:>8.4} {:>10}",
            r.point,
            r.scheme,
            r.aoi_mean,
            r.aoi_std,
            r.detect_mean.map_or("n/a".into(), |d| format!("{d:.4}"))
        );
    }
    println!("wrote {}", c.out.display());
    Ok(())
}

fn certify(c: &Common) -> Result<(), Failure> {
    let cfg = load(c)?;
    let sec = cfg.certify_section().map_err(classify)?;
    if c.dry_run {
        println!("{sec:?}");
        return Ok(());
    }
    let reports = harness::cmd_certify(&cfg, c.seed, &c.out).map_err(classify)?;
    for (i, r) in reports.iter().enumerate() {
        println!("instance {i}");
        print!("{}", r.to_text());
    }
    let failed = reports.iter().filter(|r| !r.certified()).count();
    if failed > 0 {
        return Err(Failure::Certification(anyhow::anyhow!(
            "{failed} of {} instances have a negative margin",
            reports.len()
        )));
    }
    Ok(())
}

fn gradcheck(seed: u64, instances: usize, out: Option<PathBuf>) -> Result<(), Failure> {
    let rows = harness::cmd_gradcheck(seed, instances).map_err(classify)?;
    for r in &rows {
        println!(
            "{:<10} #{} matrix {:.2e} omega {:.2e} theta {:.2e} {}",
            r.model,
            r.instance,
            r.matrix_err,
            r.omega_err,
            r.theta_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        runtime(std::fs::create_dir_all(&dir).context("creating output directory"))?;
        harness::write_csv(&rows, &dir.join("gradcheck.csv")).map_err(classify)?;
    }
    if rows.iter().any(|r| !r.passed) {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "gradient mismatch above {:e}",
            harness::GRADCHECK_TOL
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Optimize(c) => optimize(&c),
        Command::Train {
            common,
            resume,
            max_steps,
        } => train(&common, resume, max_steps),
        Command::Simulate { common, seeds } => simulate(&common, seeds),
        Command::Certify(c) => certify(&c),
        Command::Gradcheck { seed, instances, out } => gradcheck(seed, instances, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
