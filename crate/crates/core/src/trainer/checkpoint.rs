//! Versioned JSON checkpoints.
//!
//! Layout: a `format`/`version` header, the two configs, matrix shapes with
//! column-major data, `omega`, thresholds, ADAM moments, schedule position,
//! plateau tracker and the ChaCha state of the data stream. Restoring and
//! continuing reproduces the uninterrupted run bit for bit.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Adam, ModelParams, Plateau, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{PilotMatrix, RngStream, SystemConfig};

pub const FORMAT: &str = "aoi-autoencoder-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    /// Column-major.
    pub data: Vec<f64>,
}

impl MatrixData {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Checkpoint(format!(
                "matrix {}x{} carries {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub pilots: MatrixData,
    pub decoder: Option<MatrixData>,
    pub omega: f64,
    pub thetas: Vec<f64>,
    pub adam: Adam,
    pub step: u64,
    pub phase: usize,
    pub phase_step: u64,
    pub lr: f64,
    pub decays_used: usize,
    pub plateau: Plateau,
    pub rng: RngStream,
}

impl Checkpoint {
    pub fn capture(state: &TrainState) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            system: state.cfg.clone(),
            train: state.tcfg.clone(),
            pilots: MatrixData::from_matrix(state.params.pilots.matrix()),
            decoder: state.params.decoder.as_ref().map(MatrixData::from_matrix),
            omega: state.params.omega,
            thetas: state.params.thetas.clone(),
            adam: state.adam.clone(),
            step: state.step,
            phase: state.phase,
            phase_step: state.phase_step,
            lr: state.lr,
            decays_used: state.decays_used,
            plateau: state.plateau.clone(),
            rng: state.rng.clone(),
        }
    }

    pub fn restore(self) -> Result<TrainState> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let pilots = self.pilots.to_matrix()?;
        let (m, s) = pilots.shape();
        if m != self.system.pilot_len || s != self.system.total_devices() {
            return Err(Error::DimensionMismatch {
                context: "checkpoint pilots",
                expected: self.system.pilot_len * self.system.total_devices(),
                found: m * s,
            });
        }
        let decoder = self.decoder.map(|d| d.to_matrix()).transpose()?;
        if decoder.as_ref().is_some_and(|d| d.shape() != (m, s)) {
            return Err(Error::Checkpoint("decoder shape differs from pilots".into()));
        }
        if self.thetas.len() != self.train.layers {
            return Err(Error::Checkpoint(format!(
                "{} thresholds for {} layers",
                self.thetas.len(),
                self.train.layers
            )));
        }
        let params = ModelParams {
            pilots: PilotMatrix::from_raw(pilots),
            decoder,
            omega: self.omega,
            thetas: self.thetas,
        };
        if self.adam.m.len() != params.parameter_count() || self.adam.v.len() != params.parameter_count() {
            return Err(Error::Checkpoint("optimizer state has the wrong length".into()));
        }
        Ok(TrainState {
            cfg: self.system,
            tcfg: self.train,
            params,
            adam: self.adam,
            step: self.step,
            phase: self.phase,
            phase_step: self.phase_step,
            lr: self.lr,
            decays_used: self.decays_used,
            plateau: self.plateau,
            rng: self.rng,
        })
    }
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&Checkpoint::capture(state))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.restore()
}
