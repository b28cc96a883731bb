//! Closed-loop slotted simulation.
//!
//! Each slot: monitor devices decide to transmit from their current age,
//! alarms fire independently, the base station decodes the superimposed
//! pilots, and every detected monitor device resets its age to one while
//! all others age by one slot. A device counts as detected when it is
//! active, lands in the estimated support and its channel estimate is within
//! the tolerance.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, generate_instance_with, AccessRule, AgeVector, PilotMatrix, SystemConfig};
use crate::solvers::{detect, detection_rate, ista_solve, lista_age_forward, AgeGate, SolverParams};
use crate::trainer::{ModelKind, ModelParams};

/// How the base station turns measurements into per-device outcomes.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    /// Fixed-threshold ISTA on the encoder pilots.
    Ista { omega: f64, theta: f64, iters: usize },
    /// Unfolded decoder with its own matrix, optionally age-gated.
    Unfolded {
        matrix: DMatrix<f64>,
        params: SolverParams,
        gated: bool,
    },
    /// Skips decoding: each active device succeeds independently with `success_prob`.
    Oracle { success_prob: f64 },
    /// Returns the true channel.
    Exact,
    /// Returns the zero vector.
    Zero,
}

/// One compared scheme: pilots, access rule and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemePlug {
    pub name: String,
    pub pilots: PilotMatrix,
    pub decoder: Decoder,
    /// Age-based access when true, plain random access otherwise.
    pub use_ara: bool,
}

impl SchemePlug {
    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if self.pilots.rows() != cfg.pilot_len || self.pilots.cols() != cfg.total_devices() {
            return Err(Error::DimensionMismatch {
                context: "scheme pilots",
                expected: cfg.pilot_len * cfg.total_devices(),
                found: self.pilots.rows() * self.pilots.cols(),
            });
        }
        match &self.decoder {
            Decoder::Unfolded { gated: true, .. } if !self.use_ara => Err(Error::InvalidConfig(format!(
                "scheme {}: the age gate needs age-based access",
                self.name
            ))),
            Decoder::Unfolded { matrix, .. } if matrix.shape() != self.pilots.matrix().shape() => {
                Err(Error::DimensionMismatch {
                    context: "scheme decoder",
                    expected: self.pilots.rows() * self.pilots.cols(),
                    found: matrix.len(),
                })
            }
            Decoder::Oracle { success_prob } if !(0.0..=1.0).contains(success_prob) => Err(Error::InvalidConfig(
                format!("scheme {}: success probability {success_prob} outside [0, 1]", self.name),
            )),
            _ => Ok(()),
        }
    }

    /// Wraps trained parameters; gating follows the model kind.
    pub fn trained(name: impl Into<String>, params: &ModelParams, kind: ModelKind, use_ara: bool) -> Self {
        Self {
            name: name.into(),
            pilots: params.pilots.clone(),
            decoder: Decoder::Unfolded {
                matrix: params.decoder_matrix().clone(),
                params: params.solver_params(),
                gated: kind.gated(),
            },
            use_ara,
        }
    }

    pub fn access_rule(&self, cfg: &SystemConfig) -> AccessRule {
        if self.use_ara {
            AccessRule::from_config(cfg)
        } else {
            AccessRule::Aloha { p: cfg.access_prob }
        }
    }
}

/// Outcome of one slot. `avg_aoi` is the mean monitor age at the start of the slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    pub t: u64,
    pub n_active_ad: usize,
    pub n_active_md: usize,
    /// Absent when no alarm device was active.
    pub ad_detect_rate: Option<f64>,
    pub md_successes: usize,
    pub avg_aoi: f64,
    /// The decoder diverged; every device counted as failed.
    pub solver_failed: bool,
}

/// Per-slot CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotRow {
    pub t: u64,
    pub n_active_ad: usize,
    pub n_active_md: usize,
    pub ad_detect_rate: Option<f64>,
    pub avg_aoi: f64,
}

impl From<&SlotRecord> for SlotRow {
    fn from(r: &SlotRecord) -> Self {
        Self {
            t: r.t,
            n_active_ad: r.n_active_ad,
            n_active_md: r.n_active_md,
            ad_detect_rate: r.ad_detect_rate,
            avg_aoi: r.avg_aoi,
        }
    }
}

/// Advances the system by one slot, updating `ages` in place.
pub fn step<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    scheme: &SchemePlug,
    ages: &mut AgeVector,
    t: u64,
    rng: &mut R,
) -> Result<SlotRecord> {
    let n = cfg.n_alarm;
    let rule = scheme.access_rule(cfg);
    let avg_aoi = ages.mean();
    let (h, mask) = generate_instance_with(cfg, ages, rule, rng);
    if let AccessRule::AgeBased { threshold, .. } = rule {
        for (k, (&active, &age)) in mask.monitor_active.iter().zip(ages.as_slice()).enumerate() {
            assert!(!active || age > threshold, "monitor {k} transmitted at age {age} <= {threshold}");
        }
    }
    let alarm_support = mask.alarm_support();

    let mut solver_failed = false;
    let (success, ad_detect_rate) = match &scheme.decoder {
        Decoder::Oracle { success_prob } => {
            let success: Vec<bool> = (0..h.len())
                .map(|i| mask.is_active(i) && rng.random_bool(*success_prob))
                .collect();
            let rate = (!alarm_support.is_empty()).then(|| {
                alarm_support.iter().filter(|&&i| success[i]).count() as f64 / alarm_support.len() as f64
            });
            (success, rate)
        }
        decoder => {
            let y = encode(&scheme.pilots, &h, cfg.noise_std_under(rule), rng)?;
            let estimate = match decoder {
                Decoder::Ista { omega, theta, iters } => ista_solve(scheme.pilots.matrix(), &y, *omega, *theta, *iters),
                Decoder::Unfolded { matrix, params, gated } => {
                    let gate = if *gated {
                        AgeGate::from_ages(n, ages, cfg.age_threshold)
                    } else {
                        AgeGate::open(h.len())
                    };
                    lista_age_forward(matrix, &y, &gate, params, false).map(|(e, _)| e)
                }
                Decoder::Exact => Ok(h.clone()),
                Decoder::Zero => Ok(crate::model::SparseChannelVector::zeros(h.len())),
                Decoder::Oracle { .. } => unreachable!(),
            };
            match estimate {
                Ok(est) => {
                    let result = detect(est, &h, &mask, cfg.detect_tol, cfg.support_tol)?;
                    let rate = detection_rate(&result, &alarm_support).ok();
                    let success = (0..h.len())
                        .map(|i| result.per_device_success[i] && result.in_support(i))
                        .collect();
                    (success, rate)
                }
                Err(Error::Divergence { .. }) => {
                    solver_failed = true;
                    let rate = (!alarm_support.is_empty()).then_some(0.0);
                    (vec![false; h.len()], rate)
                }
                Err(e) => return Err(e),
            }
        }
    };

    let md_success = &success[n..];
    ages.advance(md_success);
    Ok(SlotRecord {
        t,
        n_active_ad: mask.n_active_alarm(),
        n_active_md: mask.n_active_monitor(),
        ad_detect_rate,
        md_successes: md_success.iter().filter(|s| **s).count(),
        avg_aoi,
        solver_failed,
    })
}

/// Post-warmup averages of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarySummary {
    pub horizon: u64,
    pub warmup: u64,
    /// Mean over post-warmup slots of the mean monitor age.
    pub stationary_aoi: f64,
    /// Mean over post-warmup slots with an active alarm device.
    pub ad_detect_rate: Option<f64>,
    pub alarm_slots: u64,
    pub solver_failures: u64,
}

/// Default warmup: the first fifth of the horizon.
pub fn default_warmup(horizon: u64) -> u64 {
    horizon / 5
}

/// Runs `horizon` slots from all-ones ages, handing every record to
/// `on_slot`, and averages the slots after `warmup`.
pub fn run_with<R, F>(
    cfg: &SystemConfig,
    scheme: &SchemePlug,
    horizon: u64,
    warmup: u64,
    rng: &mut R,
    mut on_slot: F,
) -> Result<StationarySummary>
where
    R: Rng + ?Sized,
    F: FnMut(&SlotRecord),
{
    if horizon <= warmup {
        return Err(Error::InvalidConfig(format!(
            "horizon {horizon} must exceed warmup {warmup}"
        )));
    }
    scheme.validate(cfg)?;
    let mut ages = AgeVector::ones(cfg.n_monitor);
    let mut aoi_sum = 0.0;
    let mut rate_sum = 0.0;
    let mut alarm_slots = 0;
    let mut solver_failures = 0;
    for t in 0..horizon {
        let rec = step(cfg, scheme, &mut ages, t, rng)?;
        if t >= warmup {
            aoi_sum += rec.avg_aoi;
            if let Some(r) = rec.ad_detect_rate {
                rate_sum += r;
                alarm_slots += 1;
            }
            solver_failures += rec.solver_failed as u64;
        }
        on_slot(&rec);
    }
    Ok(StationarySummary {
        horizon,
        warmup,
        stationary_aoi: aoi_sum / (horizon - warmup) as f64,
        ad_detect_rate: (alarm_slots > 0).then(|| rate_sum / alarm_slots as f64),
        alarm_slots,
        solver_failures,
    })
}

/// Like [`run_with`], keeping every record.
pub fn run<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    scheme: &SchemePlug,
    horizon: u64,
    warmup: u64,
    rng: &mut R,
) -> Result<(Vec<SlotRecord>, StationarySummary)> {
    let mut records = Vec::with_capacity(horizon as usize);
    let summary = run_with(cfg, scheme, horizon, warmup, rng, |r| records.push(*r))?;
    Ok((records, summary))
}

/// Writes the per-slot series: `t,n_active_ad,n_active_md,ad_detect_rate,avg_aoi`.
pub fn write_slots<W: std::io::Write>(records: &[SlotRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(SlotRow::from(r))?;
    }
    wtr.flush()?;
    Ok(())
}
