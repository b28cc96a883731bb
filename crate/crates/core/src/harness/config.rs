//! TOML experiment configuration.
//!
//! ```toml
//! [system]            # every SystemConfig field
//! [optimize]          # pilot_lengths = [...], optional [optimize.grid]
//! [train]             # TrainConfig fields, all optional
//! [simulate]          # scenario: sweep, schemes, horizon, seeds
//! [certify]           # certification instance recipe
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::access::GridSpec;
use crate::error::{Error, Result};
use crate::model::SystemConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub optimize: Option<OptimizeSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub simulate: Option<Scenario>,
    #[serde(default)]
    pub certify: Option<CertifySection>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if let Some(o) = &self.optimize {
            o.grid.validate()?;
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(s) = &self.simulate {
            s.validate()?;
        }
        if let Some(c) = &self.certify {
            c.validate()?;
        }
        Ok(())
    }

    fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("config has no [{name}] section")))
    }

    pub fn optimize_section(&self) -> Result<&OptimizeSection> {
        self.section(&self.optimize, "optimize")
    }

    pub fn train_section(&self) -> Result<&TrainConfig> {
        self.section(&self.train, "train")
    }

    pub fn simulate_section(&self) -> Result<&Scenario> {
        self.section(&self.simulate, "simulate")
    }

    pub fn certify_section(&self) -> Result<&CertifySection> {
        self.section(&self.certify, "certify")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub pilot_lengths: Vec<usize>,
    #[serde(default)]
    pub grid: GridSpec,
}

/// The swept quantity and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    PilotLength(Vec<usize>),
    Snr(Vec<f64>),
    Threshold(Vec<u32>),
    /// `[n_alarm, n_monitor]` pairs.
    Population(Vec<[usize; 2]>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::PilotLength(v) => v.len(),
            Sweep::Snr(v) => v.len(),
            Sweep::Threshold(v) => v.len(),
            Sweep::Population(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Sweep::PilotLength(_) => "pilot_length",
            Sweep::Snr(_) => "snr",
            Sweep::Threshold(_) => "threshold",
            Sweep::Population(_) => "population",
        }
    }

    /// Label and configuration of every sweep point.
    pub fn points(&self, base: &SystemConfig) -> Vec<(String, SystemConfig)> {
        let with = |f: &dyn Fn(&mut SystemConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Sweep::PilotLength(v) => v
                .iter()
                .map(|&m| (m.to_string(), with(&|c| c.pilot_len = m)))
                .collect(),
            Sweep::Snr(v) => v.iter().map(|&s| (s.to_string(), with(&|c| c.snr_db = s))).collect(),
            Sweep::Threshold(v) => v
                .iter()
                .map(|&d| (d.to_string(), with(&|c| c.age_threshold = d)))
                .collect(),
            Sweep::Population(v) => v
                .iter()
                .map(|&[n, k]| {
                    (
                        format!("{n}+{k}"),
                        with(&|c| {
                            c.n_alarm = n;
                            c.n_monitor = k;
                        }),
                    )
                })
                .collect(),
        }
    }
}

/// A simulated scheme as written in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub name: String,
    /// Age-based access (true) or plain random access.
    #[serde(default = "yes")]
    pub use_ara: bool,
    pub decoder: DecoderSpec,
}

fn yes() -> bool {
    true
}

fn default_iters() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    /// ISTA on Gaussian pilots with step `1 / lambda_max` and threshold
    /// `step * lambda`.
    Ista {
        lambda: f64,
        #[serde(default = "default_iters")]
        iters: usize,
    },
    /// Checkpoint path; `{pilot_len}`, `{n_alarm}`, `{n_monitor}` and
    /// `{age_threshold}` are replaced per sweep point.
    Trained { checkpoint: String },
    /// Each active device succeeds independently with this probability.
    Oracle { success_prob: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub sweep: Sweep,
    pub schemes: Vec<SchemeSpec>,
    pub horizon: u64,
    /// Defaults to a fifth of the horizon.
    #[serde(default)]
    pub warmup: Option<u64>,
    pub seeds: Vec<u64>,
    /// Re-run the access optimizer at every sweep point.
    #[serde(default)]
    pub reoptimize: bool,
    /// Also write one per-slot CSV per run.
    #[serde(default)]
    pub write_slots: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("simulate: {m}")));
        if self.sweep.is_empty() {
            return bad("sweep has no values".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds".into());
        }
        if self.schemes.is_empty() {
            return bad("no schemes".into());
        }
        if self.horizon <= self.warmup() {
            return bad(format!("horizon {} must exceed warmup {}", self.horizon, self.warmup()));
        }
        let mut names: Vec<&str> = self.schemes.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("scheme names must be unique".into());
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup.unwrap_or(crate::sim::default_warmup(self.horizon))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    /// Gaussian pilots, redrawn until the sparsity is admissible.
    Gaussian,
    /// Fourier-complement pilots with scrambled columns.
    Harmonic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    pub construction: Construction,
    pub pilot_len: usize,
    pub devices: usize,
    /// Number of devices known to be silent, chosen at random.
    #[serde(default)]
    pub gated: usize,
    pub sparsity: usize,
    pub bound: f64,
    pub sigma: f64,
    pub samples: usize,
    pub layers: usize,
    #[serde(default = "one")]
    pub instances: usize,
}

fn one() -> usize {
    1
}

impl CertifySection {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("certify: {m}")));
        if self.pilot_len == 0 || self.pilot_len > self.devices {
            return bad("need 0 < pilot_len <= devices".into());
        }
        if self.sparsity == 0 || self.gated + self.sparsity > self.devices {
            return bad("need 1 <= sparsity <= devices - gated".into());
        }
        if !(self.bound > 0.0) || !(self.sigma >= 0.0) {
            return bad("bound must be positive and sigma nonnegative".into());
        }
        if self.samples == 0 || self.instances == 0 {
            return bad("samples and instances must be positive".into());
        }
        Ok(())
    }
}
