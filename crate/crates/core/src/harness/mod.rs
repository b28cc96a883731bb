//! Experiment driver behind the `aoi-lab` binary.
//!
//! Every command is deterministic given its configuration and seeds. The
//! simulation grid runs on a bounded worker pool; each run draws from its
//! own stream `rng_stream(seed, point_index)`, so results do not depend on
//! scheduling.

pub mod config;
pub mod stats;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::access::{optimize_access, s_max, AccessProblem};
use crate::error::{Error, Result};
use crate::model::{rng_stream, PilotMatrix, SystemConfig};
use crate::sim::{self, Decoder, SchemePlug, StationarySummary};
use crate::solvers::default_step;
use crate::theory::{self, CertDataset, CertificationReport};
use crate::trainer::{self, checkpoint, GradCheckReport, LossRecord, ModelKind, ModelParams, TrainState};

pub use config::{
    CertifySection, Construction, DecoderSpec, ExperimentConfig, OptimizeSection, Scenario, SchemeSpec, Sweep,
};

/// Stream offset for pilot draws of untrained schemes, kept clear of the
/// per-point run streams.
const PILOT_STREAM: u64 = 1 << 32;

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

// ---------------------------------------------------------------- optimize

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeRow {
    pub pilot_len: usize,
    /// Largest decodable number of simultaneous transmissions.
    pub s_max: usize,
    pub delta: u32,
    pub p: f64,
    pub q: f64,
    pub avg_aoi: f64,
}

/// Best `(delta, p)` for every listed pilot length.
pub fn cmd_optimize(cfg: &ExperimentConfig) -> Result<Vec<OptimizeRow>> {
    let sec = cfg.optimize_section()?;
    if sec.pilot_lengths.is_empty() {
        return Err(Error::InvalidConfig("optimize: pilot_lengths is empty".into()));
    }
    sec.pilot_lengths
        .iter()
        .map(|&m| {
            let mut c = cfg.system.clone();
            c.pilot_len = m;
            c.validate()?;
            let best = optimize_access(&sec.grid, &AccessProblem::from_config(&c))?;
            Ok(OptimizeRow {
                pilot_len: m,
                s_max: s_max(m, c.total_devices()),
                delta: best.delta,
                p: best.p,
                q: best.q,
                avg_aoi: best.avg_aoi,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- train

/// What a training run would do, for `--dry-run`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub model: ModelKind,
    pub layers: usize,
    pub matrix_params: usize,
    pub scalar_params: usize,
    pub phases: usize,
    pub steps: u64,
    pub batch_size: usize,
}

impl TrainPlan {
    pub fn total_params(&self) -> usize {
        self.matrix_params + self.scalar_params
    }
}

impl std::fmt::Display for TrainPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "model          {}", self.model.label())?;
        writeln!(f, "layers         {}", self.layers)?;
        writeln!(f, "matrix params  {}", self.matrix_params)?;
        writeln!(f, "scalar params  {}", self.scalar_params)?;
        writeln!(f, "total params   {}", self.total_params())?;
        writeln!(f, "phases         {}", self.phases)?;
        writeln!(f, "step budget    {}", self.steps)?;
        write!(f, "batch size     {}", self.batch_size)
    }
}

/// Validates the configuration and counts parameters without training.
pub fn train_plan(cfg: &ExperimentConfig) -> Result<TrainPlan> {
    let tcfg = cfg.train_section()?;
    cfg.system.validate()?;
    tcfg.validate()?;
    let params = ModelParams::init(&cfg.system, tcfg.layers, tcfg.model.tied(), &mut rng_stream(0, 0));
    let matrix_params = params.decoder_matrix().len();
    Ok(TrainPlan {
        model: tcfg.model,
        layers: tcfg.layers,
        matrix_params,
        scalar_params: params.parameter_count() - matrix_params,
        phases: tcfg.phases().len(),
        steps: tcfg.steps,
        batch_size: tcfg.batch_size,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps of this invocation.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub steps_run: u64,
    pub finished: bool,
    pub last_loss: Option<f64>,
}

/// Trains into `out/checkpoint.json` and `out/loss.csv`. A resumed run
/// appends to the existing loss curve.
pub fn cmd_train(cfg: &ExperimentConfig, seed: u64, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    ensure_dir(out)?;
    let mut state = match &opts.resume {
        Some(path) => checkpoint::load(path)?,
        None => TrainState::new(&cfg.system, cfg.train_section()?, seed)?,
    };
    let history = state.run(opts.max_steps)?;

    let ckpt = out.join("checkpoint.json");
    let loss_csv = out.join("loss.csv");
    checkpoint::save(&state, &ckpt)?;
    let append = opts.resume.is_some() && loss_csv.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&loss_csv)?;
    let mut w = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    for r in &history {
        w.serialize(r)?;
    }
    w.flush()?;

    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_csv,
        steps_run: history.len() as u64,
        finished: state.is_finished(),
        last_loss: history.last().map(|r: &LossRecord| r.loss),
    })
}

// ---------------------------------------------------------------- simulate

/// One `(point, scheme, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub sweep: String,
    pub point: String,
    pub scheme: String,
    pub seed: u64,
    pub age_threshold: u32,
    pub access_prob: f64,
    pub stationary_aoi: f64,
    pub ad_detect_rate: Option<f64>,
    pub alarm_slots: u64,
    pub solver_failures: u64,
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep: String,
    pub point: String,
    pub scheme: String,
    pub runs: usize,
    pub aoi_mean: f64,
    pub aoi_std: f64,
    /// Runs that saw at least one active alarm device.
    pub detect_runs: usize,
    pub detect_mean: Option<f64>,
    pub detect_std: Option<f64>,
}

/// Groups by `(sweep, point, scheme)` in order of first appearance.
pub fn aggregate(runs: &[RunRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, String)> = Vec::new();
    let mut groups: HashMap<(String, String, String), Vec<&RunRow>> = HashMap::new();
    for r in runs {
        let key = (r.sweep.clone(), r.point.clone(), r.scheme.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let aoi: Vec<f64> = rows.iter().map(|r| r.stationary_aoi).collect();
            let det: Vec<f64> = rows.iter().filter_map(|r| r.ad_detect_rate).collect();
            AggregateRow {
                runs: rows.len(),
                aoi_mean: stats::mean(&aoi).unwrap_or(f64::NAN),
                aoi_std: stats::sample_std(&aoi).unwrap_or(f64::NAN),
                detect_runs: det.len(),
                detect_mean: stats::mean(&det),
                detect_std: stats::sample_std(&det),
                sweep: key.0,
                point: key.1,
                scheme: key.2,
            }
        })
        .collect()
}

/// A sweep point with its access parameters settled.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub cfg: SystemConfig,
}

/// Expands the sweep; with `reoptimize`, each point gets its own optimal
/// access pair (only `p` moves on a threshold sweep).
pub fn sweep_points(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<Vec<SweepPoint>> {
    let grid = cfg.optimize.as_ref().map(|o| o.grid.clone()).unwrap_or_default();
    scenario
        .sweep
        .points(&cfg.system)
        .into_iter()
        .map(|(label, mut c)| {
            c.validate()?;
            if scenario.reoptimize {
                let mut g = grid.clone();
                if matches!(scenario.sweep, Sweep::Threshold(_)) {
                    g.delta_min = c.age_threshold;
                    g.delta_max = c.age_threshold;
                }
                let best = optimize_access(&g, &AccessProblem::from_config(&c))?;
                c.age_threshold = best.delta;
                c.access_prob = best.p;
            }
            Ok(SweepPoint { label, cfg: c })
        })
        .collect()
}

fn resolve_path(template: &str, c: &SystemConfig) -> PathBuf {
    PathBuf::from(
        template
            .replace("{pilot_len}", &c.pilot_len.to_string())
            .replace("{n_alarm}", &c.n_alarm.to_string())
            .replace("{n_monitor}", &c.n_monitor.to_string())
            .replace("{age_threshold}", &c.age_threshold.to_string()),
    )
}

/// Loads every checkpoint the scenario needs, failing before any run starts.
fn load_checkpoints(
    scenario: &Scenario,
    points: &[SweepPoint],
) -> Result<HashMap<PathBuf, (ModelParams, ModelKind)>> {
    let mut cache = HashMap::new();
    for spec in &scenario.schemes {
        let DecoderSpec::Trained { checkpoint: template } = &spec.decoder else {
            continue;
        };
        for pt in points {
            let path = resolve_path(template, &pt.cfg);
            if cache.contains_key(&path) {
                continue;
            }
            let state = checkpoint::load(&path).map_err(|e| match e {
                Error::MissingCheckpoint(p) => Error::MissingCheckpoint(format!("{} ({p})", spec.name)),
                other => other,
            })?;
            let c = &state.cfg;
            if c.pilot_len != pt.cfg.pilot_len || c.total_devices() != pt.cfg.total_devices() {
                return Err(Error::InvalidConfig(format!(
                    "scheme {}: checkpoint {} was trained for M={}, S={} but point {} needs M={}, S={}",
                    spec.name,
                    path.display(),
                    c.pilot_len,
                    c.total_devices(),
                    pt.label,
                    pt.cfg.pilot_len,
                    pt.cfg.total_devices()
                )));
            }
            let kind = state.tcfg.model;
            cache.insert(path, (state.params, kind));
        }
    }
    Ok(cache)
}

fn build_plug(
    spec: &SchemeSpec,
    pt: &SweepPoint,
    point_idx: usize,
    seed: u64,
    trained: &HashMap<PathBuf, (ModelParams, ModelKind)>,
) -> SchemePlug {
    let gaussian = || {
        let mut rng = rng_stream(seed, PILOT_STREAM + point_idx as u64);
        PilotMatrix::gaussian(pt.cfg.pilot_len, pt.cfg.total_devices(), &mut rng)
    };
    match &spec.decoder {
        DecoderSpec::Ista { lambda, iters } => {
            let pilots = gaussian();
            let omega = default_step(pilots.matrix());
            SchemePlug {
                name: spec.name.clone(),
                pilots,
                decoder: Decoder::Ista {
                    omega,
                    theta: omega * lambda,
                    iters: *iters,
                },
                use_ara: spec.use_ara,
            }
        }
        DecoderSpec::Oracle { success_prob } => SchemePlug {
            name: spec.name.clone(),
            pilots: gaussian(),
            decoder: Decoder::Oracle {
                success_prob: *success_prob,
            },
            use_ara: spec.use_ara,
        },
        DecoderSpec::Trained { checkpoint } => {
            let (params, kind) = &trained[&resolve_path(checkpoint, &pt.cfg)];
            SchemePlug::trained(spec.name.clone(), params, *kind, spec.use_ara)
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub runs: Vec<RunRow>,
    pub aggregate: Vec<AggregateRow>,
}

/// Runs the full point x scheme x seed grid on `workers` threads and writes
/// `runs.csv`, `aggregate.csv` and, if asked, `slots/<scheme>_<point>_<seed>.csv`.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    out: &Path,
    workers: usize,
    seeds: Option<&[u64]>,
) -> Result<SimulateOutcome> {
    let scenario = cfg.simulate_section()?;
    let seeds = seeds.unwrap_or(&scenario.seeds);
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("simulate: no seeds".into()));
    }
    let points = sweep_points(cfg, scenario)?;
    let trained = load_checkpoints(scenario, &points)?;
    for (pi, pt) in points.iter().enumerate() {
        for spec in &scenario.schemes {
            build_plug(spec, pt, pi, seeds[0], &trained).validate(&pt.cfg)?;
        }
    }
    ensure_dir(out)?;
    let slot_dir = out.join("slots");
    if scenario.write_slots {
        ensure_dir(&slot_dir)?;
    }

    let mut jobs = Vec::new();
    for pi in 0..points.len() {
        for si in 0..scenario.schemes.len() {
            for &seed in seeds {
                jobs.push((pi, si, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let warmup = scenario.warmup();
    let results: Vec<Result<RunRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(pi, si, seed)| {
                let pt = &points[pi];
                let spec = &scenario.schemes[si];
                let plug = build_plug(spec, pt, pi, seed, &trained);
                let mut rng = rng_stream(seed, pi as u64);
                let summary: StationarySummary = if scenario.write_slots {
                    let (records, summary) = sim::run(&pt.cfg, &plug, scenario.horizon, warmup, &mut rng)?;
                    let name = format!("{}_{}_{}.csv", spec.name, pt.label, seed);
                    sim::write_slots(&records, fs::File::create(slot_dir.join(name))?)?;
                    summary
                } else {
                    sim::run_with(&pt.cfg, &plug, scenario.horizon, warmup, &mut rng, |_| {})?
                };
                Ok(RunRow {
                    sweep: scenario.sweep.kind().to_string(),
                    point: pt.label.clone(),
                    scheme: spec.name.clone(),
                    seed,
                    age_threshold: pt.cfg.age_threshold,
                    access_prob: pt.cfg.access_prob,
                    stationary_aoi: summary.stationary_aoi,
                    ad_detect_rate: summary.ad_detect_rate,
                    alarm_slots: summary.alarm_slots,
                    solver_failures: summary.solver_failures,
                })
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&runs);
    write_csv(&runs, &out.join("runs.csv"))?;
    write_csv(&aggregate, &out.join("aggregate.csv"))?;
    Ok(SimulateOutcome { runs, aggregate })
}

// ---------------------------------------------------------------- certify

/// Builds instance `index` of the certify recipe.
pub fn certify_instance(sec: &CertifySection, seed: u64, index: usize) -> Result<(PilotMatrix, CertDataset)> {
    sec.validate()?;
    let mut rng = rng_stream(seed, index as u64);
    let mut devices: Vec<usize> = (0..sec.devices).collect();
    devices.shuffle(&mut rng);
    let mut gated = devices[..sec.gated].to_vec();
    gated.sort_unstable();
    let pilots = match sec.construction {
        Construction::Harmonic => theory::scramble(&theory::harmonic_complement(sec.pilot_len, sec.devices)?, &mut rng),
        Construction::Gaussian => {
            theory::gaussian_admissible(sec.pilot_len, sec.devices, &gated, sec.sparsity, 1000, &mut rng)?
        }
    };
    let data = CertDataset::random(
        sec.devices,
        sec.pilot_len,
        gated,
        sec.sparsity,
        sec.bound,
        sec.sigma,
        sec.samples,
        &mut rng,
    );
    Ok((pilots, data))
}

/// Certifies every instance, writing `certify_<i>.txt` and `certify_<i>.csv`.
pub fn cmd_certify(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<CertificationReport>> {
    let sec = cfg.certify_section()?;
    ensure_dir(out)?;
    (0..sec.instances)
        .map(|i| {
            let (pilots, data) = certify_instance(sec, seed, i)?;
            let report = theory::certify_bound(&pilots, &data, sec.layers)?;
            theory::write_report(
                &report,
                &out.join(format!("certify_{i}.txt")),
                &out.join(format!("certify_{i}.csv")),
            )?;
            Ok(report)
        })
        .collect()
}

// ---------------------------------------------------------------- gradcheck

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub model: String,
    pub instance: usize,
    pub matrix_err: f64,
    pub omega_err: f64,
    pub theta_err: f64,
    pub max_err: f64,
    pub passed: bool,
}

/// Finite-difference check of every model kind on `instances` small
/// random problems.
pub fn cmd_gradcheck(seed: u64, instances: usize) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for model in [ModelKind::Piaae, ModelKind::ListaAe, ModelKind::Lista] {
        for i in 0..instances {
            let (params, samples) = trainer::gradcheck_instance(4, 8, 8, 3, model, seed.wrapping_add(i as u64))?;
            let r: GradCheckReport = trainer::gradient_check(&params, &samples, GRADCHECK_FD_STEP)?;
            let max_err = r.max_error();
            rows.push(GradCheckRow {
                model: model.label().to_string(),
                instance: i,
                matrix_err: r.matrix,
                omega_err: r.omega,
                theta_err: r.thetas.iter().copied().fold(0.0, f64::max),
                max_err,
                passed: max_err < GRADCHECK_TOL,
            });
        }
    }
    Ok(rows)
}
