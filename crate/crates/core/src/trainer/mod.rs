//! End-to-end training of the pilot autoencoder with the unfolded decoder.
//!
//! The trainable parameters are the pilot matrix `P` (shared by encoder and
//! decoder), the step size `omega` and one threshold per layer. Training is
//! online: every step draws a fresh batch. After each ADAM step the pilot
//! columns are projected back to unit norm and thresholds are clamped at
//! zero.
//!
//! Stage-wise schedule: for depth `d = 1..=L`, first train `theta_d` and
//! `omega` on the depth-`d` network with earlier thresholds frozen, then
//! fine-tune every parameter of the depth-`d` network (including the
//! matrix). Each phase restarts ADAM at `lr0` and walks the decay factors
//! on loss plateaus.

pub mod adam;
pub mod backward;
pub mod checkpoint;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    generate_instance_with, rng_stream, AccessRule, ActivityMask, AgeVector, PilotMatrix,
    RngStream, SparseChannelVector, SystemConfig,
};
use crate::solvers::{default_step, lista_age_forward, AgeGate, SolverParams};

pub use adam::Adam;
pub use backward::{backward, Gradients};

/// Which network is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Learned pilots tied to an age-gated decoder.
    Piaae,
    /// Learned pilots tied to an ungated decoder.
    ListaAe,
    /// Fixed random pilots; the decoder learns its own copy of the matrix.
    Lista,
}

impl ModelKind {
    pub fn gated(self) -> bool {
        matches!(self, ModelKind::Piaae)
    }

    /// Encoder and decoder share one matrix, which is then learned.
    pub fn tied(self) -> bool {
        !matches!(self, ModelKind::Lista)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Piaae => "piaae",
            ModelKind::ListaAe => "lista_ae",
            ModelKind::Lista => "lista",
        }
    }
}

/// Access rule used to draw training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainAccess {
    AgeBased,
    Aloha,
}

impl TrainAccess {
    pub fn rule(self, cfg: &SystemConfig) -> AccessRule {
        match self {
            TrainAccess::AgeBased => AccessRule::from_config(cfg),
            TrainAccess::Aloha => AccessRule::Aloha {
                p: cfg.access_prob,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Steps without a new minimum of the moving-average loss that count as a plateau.
    pub plateau_patience: u64,
    /// Length of the moving average used for plateau detection.
    pub plateau_window: usize,
    /// Successive learning-rate factors (relative to `lr0`), at most three.
    pub decay_factors: Vec<f64>,
    pub layers: usize,
    pub stagewise: bool,
    /// Total step budget, split evenly over the phases.
    pub steps: u64,
    pub model: ModelKind,
    pub access: TrainAccess,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 1e-3,
            plateau_patience: 500,
            plateau_window: 100,
            decay_factors: vec![0.5, 0.1, 0.01],
            layers: 15,
            stagewise: true,
            steps: 20_000,
            model: ModelKind::Piaae,
            access: TrainAccess::AgeBased,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.layers == 0 {
            return bad("layers must be positive".into());
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 {} must be positive", self.lr0));
        }
        if self.decay_factors.len() > 3 {
            return bad("at most three learning-rate decays".into());
        }
        if self.decay_factors.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("decay factors must lie in (0, 1]".into());
        }
        if self.plateau_window == 0 {
            return bad("plateau_window must be positive".into());
        }
        Ok(())
    }

    pub fn phases(&self) -> Vec<Phase> {
        if !self.stagewise {
            return vec![Phase {
                depth: self.layers,
                tune: true,
            }];
        }
        (1..=self.layers)
            .flat_map(|depth| [Phase { depth, tune: false }, Phase { depth, tune: true }])
            .collect()
    }
}

/// One block of the training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    /// Number of decoder layers in the truncated network.
    pub depth: usize,
    /// Fine-tune everything (true) or only the newest threshold and `omega`.
    pub tune: bool,
}

/// The trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Encoder pilots.
    pub pilots: PilotMatrix,
    /// Separate decoder matrix for untied models.
    pub decoder: Option<DMatrix<f64>>,
    pub omega: f64,
    pub thetas: Vec<f64>,
}

impl ModelParams {
    /// Gaussian column-normalized pilots, `theta = 0.1`, `omega = 1 / lambda_max`.
    pub fn init<R: Rng + ?Sized>(cfg: &SystemConfig, layers: usize, tied: bool, rng: &mut R) -> Self {
        let pilots = PilotMatrix::gaussian(cfg.pilot_len, cfg.total_devices(), rng);
        let omega = default_step(pilots.matrix());
        let decoder = (!tied).then(|| pilots.matrix().clone());
        Self {
            pilots,
            decoder,
            omega,
            thetas: vec![0.1; layers],
        }
    }

    pub fn decoder_matrix(&self) -> &DMatrix<f64> {
        self.decoder.as_ref().unwrap_or(self.pilots.matrix())
    }

    pub fn tied(&self) -> bool {
        self.decoder.is_none()
    }

    pub fn solver_params(&self) -> SolverParams {
        SolverParams::new(self.omega, self.thetas.clone())
    }

    fn matrix_len(&self) -> usize {
        self.pilots.rows() * self.pilots.cols()
    }

    /// `[matrix (column-major), omega, thetas...]`.
    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.matrix_len() + 1 + self.thetas.len());
        v.extend_from_slice(self.decoder_matrix().as_slice());
        v.push(self.omega);
        v.extend_from_slice(&self.thetas);
        v
    }

    fn unflatten(&mut self, v: &[f64]) {
        let n = self.matrix_len();
        match self.decoder.as_mut() {
            Some(d) => d.as_mut_slice().copy_from_slice(&v[..n]),
            None => self.pilots.matrix_mut().as_mut_slice().copy_from_slice(&v[..n]),
        }
        self.omega = v[n];
        self.thetas.copy_from_slice(&v[n + 1..]);
    }

    pub fn parameter_count(&self) -> usize {
        self.matrix_len() + 1 + self.thetas.len()
    }
}

fn flatten_grads(g: &Gradients, layers: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(g.matrix.len() + 1 + layers);
    v.extend_from_slice(g.matrix.as_slice());
    v.push(g.omega);
    v.extend_from_slice(&g.thetas);
    v.resize(g.matrix.len() + 1 + layers, 0.0);
    v
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub ages: AgeVector,
    pub truth: DVector<f64>,
    pub mask: ActivityMask,
    pub gate: AgeGate,
    pub noise: DVector<f64>,
    pub y: DVector<f64>,
}

impl TrainSample {
    /// Re-encodes with other pilots, keeping the same channel and noise.
    pub fn reencode(&mut self, pilots: &DMatrix<f64>) {
        self.y = pilots * &self.truth + &self.noise;
    }
}

/// Draws `batch` examples: ages uniform on `1..=age_max`, activity by
/// `rule`, measurements through `pilots`. The gate is derived from the ages
/// when `gated`, otherwise it is open.
pub fn make_batch<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    rule: AccessRule,
    gated: bool,
    pilots: &PilotMatrix,
    batch: usize,
    rng: &mut R,
) -> Vec<TrainSample> {
    let noise_std = cfg.noise_std_under(rule);
    (0..batch)
        .map(|_| {
            let ages = AgeVector::uniform(cfg.n_monitor, cfg.age_max, rng);
            let (h, mask) = generate_instance_with(cfg, &ages, rule, rng);
            let gate = match rule {
                AccessRule::AgeBased { threshold, .. } if gated => {
                    AgeGate::from_ages(cfg.n_alarm, &ages, threshold)
                }
                _ => AgeGate::open(cfg.total_devices()),
            };
            let noise = DVector::from_fn(cfg.pilot_len, |_, _| {
                if noise_std > 0.0 {
                    noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            });
            let truth = h.into_values();
            let y = pilots.matrix() * &truth + &noise;
            TrainSample {
                ages,
                truth,
                mask,
                gate,
                noise,
                y,
            }
        })
        .collect()
}

/// Sum over the batch of squared l2 errors.
pub fn loss(estimates: &[DVector<f64>], truths: &[DVector<f64>]) -> f64 {
    assert_eq!(estimates.len(), truths.len(), "batch sizes differ");
    estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| (e - t).norm_squared())
        .sum()
}

/// Loss and gradient of the depth-`depth` network over `samples`. Per-sample
/// work runs in parallel; the reduction is sequential in sample order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    samples: &[TrainSample],
    depth: usize,
) -> Result<(f64, Gradients)> {
    let decoder = params.decoder_matrix();
    let solver = SolverParams::new(params.omega, params.thetas[..depth].to_vec());
    let tied = params.tied();
    let per_sample: Vec<Result<(f64, Gradients)>> = samples
        .par_iter()
        .map(|s| {
            let (est, traj) = lista_age_forward(decoder, &s.y, &s.gate, &solver, true)?;
            let l = (est.values() - &s.truth).norm_squared();
            let g = backward(
                traj.as_ref(),
                &s.truth,
                &s.y,
                &s.gate,
                decoder,
                params.omega,
                &solver.thetas,
                tied,
            )?;
            Ok((l, g))
        })
        .collect();
    let (m, n) = decoder.shape();
    let mut total = Gradients::zeros(m, n, depth);
    let mut total_loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        total_loss += l;
        total.accumulate(&g);
    }
    Ok((total_loss, total))
}

/// Loss of the depth-`depth` network without gradients.
pub fn batch_loss(params: &ModelParams, samples: &[TrainSample], depth: usize) -> Result<f64> {
    let solver = SolverParams::new(params.omega, params.thetas[..depth].to_vec());
    let decoder = params.decoder_matrix();
    let mut total = 0.0;
    for s in samples {
        let (est, _) = lista_age_forward(decoder, &s.y, &s.gate, &solver, false)?;
        total += (est.values() - &s.truth).norm_squared();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    window: VecDeque<f64>,
    best: Option<f64>,
    since_best: u64,
}

impl Plateau {
    pub fn new() -> Self {
        Self {
            window: VecDeque::new(),
            best: None,
            since_best: 0,
        }
    }

    /// Feeds one loss; true once the moving average has not improved for `patience` steps.
    pub fn update(&mut self, loss: f64, window: usize, patience: u64) -> bool {
        self.window.push_back(loss);
        if self.window.len() > window {
            self.window.pop_front();
        }
        if self.window.len() < window {
            return false;
        }
        let avg = self.window.iter().sum::<f64>() / window as f64;
        if self.best.is_none_or(|b| avg < b) {
            self.best = Some(avg);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= patience
    }
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new()
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: usize,
    pub depth: usize,
    pub lr: f64,
    /// Batch loss (sum over the batch).
    pub loss: f64,
}

/// Everything needed to continue training: parameters, optimizer moments,
/// schedule position and the data stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: SystemConfig,
    pub tcfg: TrainConfig,
    pub params: ModelParams,
    pub adam: Adam,
    pub step: u64,
    pub phase: usize,
    pub phase_step: u64,
    pub lr: f64,
    pub decays_used: usize,
    pub plateau: Plateau,
    pub rng: RngStream,
}

impl TrainState {
    /// Fresh initialization; parameters come from stream 0 of `seed`, data
    /// from stream 1.
    pub fn new(cfg: &SystemConfig, tcfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        tcfg.validate()?;
        let mut init_rng = rng_stream(seed, 0);
        let params = ModelParams::init(cfg, tcfg.layers, tcfg.model.tied(), &mut init_rng);
        let adam = Adam::new(params.parameter_count());
        Ok(Self {
            cfg: cfg.clone(),
            tcfg: tcfg.clone(),
            params,
            adam,
            step: 0,
            phase: 0,
            phase_step: 0,
            lr: tcfg.lr0,
            decays_used: 0,
            plateau: Plateau::new(),
            rng: rng_stream(seed, 1),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.phase >= self.tcfg.phases().len()
    }

    fn phase_budget(&self, phase: usize) -> u64 {
        let n = self.tcfg.phases().len() as u64;
        let base = self.tcfg.steps / n;
        if phase as u64 == n - 1 {
            self.tcfg.steps - base * (n - 1)
        } else {
            base
        }
    }

    fn trainable_mask(&self, phase: Phase) -> Vec<bool> {
        let n = self.params.pilots.rows() * self.params.pilots.cols();
        let layers = self.params.thetas.len();
        let mut mask = vec![phase.tune; n];
        mask.push(true);
        mask.extend((0..layers).map(|l| {
            if phase.tune {
                l < phase.depth
            } else {
                l + 1 == phase.depth
            }
        }));
        mask
    }

    fn next_phase(&mut self) {
        self.phase += 1;
        self.phase_step = 0;
        self.lr = self.tcfg.lr0;
        self.decays_used = 0;
        self.plateau = Plateau::new();
        self.adam.reset();
    }

    /// One optimizer step on a fresh batch.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let phases = self.tcfg.phases();
        let phase = phases[self.phase];
        let rule = self.tcfg.access.rule(&self.cfg);
        let batch = make_batch(
            &self.cfg,
            rule,
            self.tcfg.model.gated(),
            &self.params.pilots,
            self.tcfg.batch_size,
            &mut self.rng,
        );
        let (loss, grads) = batch_loss_and_grad(&self.params, &batch, phase.depth)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let mut flat = self.params.flatten();
        let g = flatten_grads(&grads, self.params.thetas.len());
        let mask = self.trainable_mask(phase);
        self.adam.step(&mut flat, &g, &mask, self.lr);
        self.params.unflatten(&flat);
        self.params.omega = self.params.omega.max(1e-9);
        for t in self.params.thetas.iter_mut() {
            *t = t.max(0.0);
        }
        if self.params.tied() {
            self.params.pilots.normalize_columns();
        }

        let record = LossRecord {
            step: self.step,
            phase: self.phase,
            depth: phase.depth,
            lr: self.lr,
            loss,
        };
        self.step += 1;
        self.phase_step += 1;

        let mut end_phase = self.phase_step >= self.phase_budget(self.phase);
        if self
            .plateau
            .update(loss, self.tcfg.plateau_window, self.tcfg.plateau_patience)
        {
            if let Some(&f) = self.tcfg.decay_factors.get(self.decays_used) {
                self.lr = self.tcfg.lr0 * f;
                self.decays_used += 1;
                self.plateau = Plateau::new();
            } else {
                end_phase = true;
            }
        }
        if end_phase {
            self.next_phase();
        }
        Ok(record)
    }

    /// Trains until the schedule ends or `max_steps` more steps have run.
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<Vec<LossRecord>> {
        let mut history = Vec::new();
        while !self.is_finished() && max_steps.is_none_or(|m| (history.len() as u64) < m) {
            history.push(self.train_step()?);
        }
        Ok(history)
    }
}

/// Trains from scratch to the end of the schedule.
pub fn train(cfg: &SystemConfig, tcfg: &TrainConfig, seed: u64) -> Result<(TrainState, Vec<LossRecord>)> {
    let mut state = TrainState::new(cfg, tcfg, seed)?;
    let history = state.run(None)?;
    Ok((state, history))
}

/// Relative discrepancies between backpropagated and finite-difference
/// gradients, per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub matrix: f64,
    pub omega: f64,
    pub thetas: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.thetas
            .iter()
            .copied()
            .fold(self.matrix.max(self.omega), f64::max)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        // both vanish: finite differences only see rounding noise here
        return (a - b).abs();
    }
    (a - b).abs() / scale
}

/// Central finite differences against [`backward`] on one batch. The noise
/// realization is held fixed; tied models re-encode when the matrix moves.
pub fn gradient_check(
    params: &ModelParams,
    samples: &[TrainSample],
    fd_step: f64,
) -> Result<GradCheckReport> {
    let depth = params.thetas.len();
    let (_, analytic) = batch_loss_and_grad(params, samples, depth)?;

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut local = samples.to_vec();
        if p.tied() {
            for s in local.iter_mut() {
                s.reencode(p.pilots.matrix());
            }
        }
        batch_loss(p, &local, depth)
    };

    let base = params.flatten();
    let mut numeric = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = params.clone();
        let mut v = base.clone();
        v[i] += fd_step;
        plus.unflatten(&v);
        let mut minus = params.clone();
        v[i] = base[i] - fd_step;
        minus.unflatten(&v);
        numeric[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * fd_step);
    }

    let n = params.decoder_matrix().len();
    let a = analytic.matrix.as_slice();
    let diff: f64 = a.iter().zip(&numeric[..n]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
    let matrix = if na.max(nn) < 1e-7 { diff } else { diff / na.max(nn) };

    Ok(GradCheckReport {
        matrix,
        omega: rel_err(analytic.omega, numeric[n]),
        thetas: (0..depth)
            .map(|l| rel_err(analytic.thetas[l], numeric[n + 1 + l]))
            .collect(),
    })
}

/// Small random problem for gradient checks: `S = n_alarm + n_monitor`
/// devices, busy enough that every layer sees active coordinates.
pub fn gradcheck_instance(
    n_alarm: usize,
    n_monitor: usize,
    pilot_len: usize,
    layers: usize,
    model: ModelKind,
    seed: u64,
) -> Result<(ModelParams, Vec<TrainSample>)> {
    let cfg = SystemConfig {
        n_alarm,
        n_monitor,
        pilot_len,
        snr_db: 20.0,
        ad_active_prob: 0.3,
        age_max: 10,
        access_prob: 0.5,
        age_threshold: 3,
        detect_tol: 0.1,
        support_tol: 1e-3,
        seed,
    };
    cfg.validate()?;
    let mut rng = rng_stream(seed, 0);
    let mut params = ModelParams::init(&cfg, layers, model.tied(), &mut rng);
    // spread the thresholds so every layer has its own gradient signature
    for (l, t) in params.thetas.iter_mut().enumerate() {
        *t = 0.05 + 0.02 * l as f64;
    }
    if let Some(d) = params.decoder.as_mut() {
        // untied decoder drifts away from the encoder during training
        for v in d.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let samples = make_batch(&cfg, AccessRule::from_config(&cfg), model.gated(), &params.pilots, 4, &mut rng);
    Ok((params, samples))
}

/// Estimates for a batch, for evaluation.
pub fn predict(params: &ModelParams, samples: &[TrainSample]) -> Result<Vec<SparseChannelVector>> {
    let solver = params.solver_params();
    samples
        .iter()
        .map(|s| lista_age_forward(params.decoder_matrix(), &s.y, &s.gate, &solver, false).map(|(h, _)| h))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let a = DVector::from_column_slice(&[1.0, 2.0]);
        assert_eq!(loss(std::slice::from_ref(&a), std::slice::from_ref(&a)), 0.0);
        let e = DVector::from_column_slice(&[3.0, 4.0]);
        let z = DVector::zeros(2);
        assert_eq!(loss(&[e.clone()], &[z.clone()]), 25.0);
        assert_eq!(loss(&[e.clone(), e.clone()], &[z.clone(), z.clone()]), 50.0);
    }

    #[test]
    fn phases_layout() {
        let t = TrainConfig {
            layers: 3,
            ..TrainConfig::default()
        };
        let p = t.phases();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], Phase { depth: 1, tune: false });
        assert_eq!(p[5], Phase { depth: 3, tune: true });
        let flat = TrainConfig {
            stagewise: false,
            ..t
        };
        assert_eq!(flat.phases(), vec![Phase { depth: 3, tune: true }]);
    }

    #[test]
    fn zero_steps_is_initialization() {
        let cfg = SystemConfig::desk_default();
        let tcfg = TrainConfig {
            steps: 0,
            layers: 4,
            stagewise: false,
            ..TrainConfig::default()
        };
        let state = TrainState::new(&cfg, &tcfg, 3).unwrap();
        assert!(state.params.thetas.iter().all(|t| *t == 0.1));
        assert!(state.params.pilots.max_norm_deviation() < 1e-12);
        let expected = default_step(state.params.pilots.matrix());
        assert_eq!(state.params.omega, expected);
    }

    #[test]
    fn batch_respects_gate() {
        let cfg = SystemConfig::desk_default();
        let mut rng = rng_stream(5, 0);
        let pilots = PilotMatrix::gaussian(cfg.pilot_len, cfg.total_devices(), &mut rng);
        let b = make_batch(&cfg, AccessRule::from_config(&cfg), true, &pilots, 1, &mut rng);
        assert_eq!(b.len(), 1);
        for i in b[0].gate.gated_indices() {
            assert_eq!(b[0].truth[i], 0.0);
        }
    }

    #[test]
    fn batch_ages_are_uniform() {
        let cfg = SystemConfig::desk_default();
        let mut rng = rng_stream(21, 0);
        let pilots = PilotMatrix::gaussian(cfg.pilot_len, cfg.total_devices(), &mut rng);
        let batch = make_batch(&cfg, AccessRule::from_config(&cfg), true, &pilots, 3125, &mut rng);
        let mut counts = vec![0u64; cfg.age_max as usize];
        for s in &batch {
            for &a in s.ages.as_slice() {
                counts[(a - 1) as usize] += 1;
            }
        }
        let n: u64 = counts.iter().sum();
        assert_eq!(n, 100_000);
        let expected = n as f64 / counts.len() as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99 degrees of freedom, 0.999 quantile
        assert!(chi2 < 148.23, "chi2 = {chi2}");
    }

    #[test]
    fn batch_is_deterministic() {
        let cfg = SystemConfig::desk_default();
        let pilots = PilotMatrix::gaussian(cfg.pilot_len, cfg.total_devices(), &mut rng_stream(5, 0));
        let a = make_batch(&cfg, AccessRule::from_config(&cfg), true, &pilots, 8, &mut rng_stream(9, 1));
        let b = make_batch(&cfg, AccessRule::from_config(&cfg), true, &pilots, 8, &mut rng_stream(9, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn all_gated_gives_zero_theta_gradient() {
        let (params, mut samples) = gradcheck_instance(0, 6, 4, 3, ModelKind::Piaae, 2).unwrap();
        for s in samples.iter_mut() {
            s.gate = AgeGate::from_mask(vec![false; 6]);
        }
        let (_, g) = batch_loss_and_grad(&params, &samples, 3).unwrap();
        assert!(g.thetas.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn huge_thresholds_flatten_everything() {
        let (mut params, samples) = gradcheck_instance(4, 8, 8, 3, ModelKind::ListaAe, 4).unwrap();
        params.thetas = vec![1e6; 3];
        let (_, g) = batch_loss_and_grad(&params, &samples, 3).unwrap();
        assert!(g.thetas.iter().all(|t| *t == 0.0));
        assert_eq!(g.omega, 0.0);
        for est in predict(&params, &samples).unwrap() {
            assert!(est.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for model in [ModelKind::Piaae, ModelKind::ListaAe, ModelKind::Lista] {
            let (params, samples) = gradcheck_instance(4, 8, 8, 3, model, 11).unwrap();
            let r = gradient_check(&params, &samples, 1e-6).unwrap();
            assert!(r.max_error() < 1e-5, "{model:?}: {r:?}");
        }
    }

    #[test]
    fn missing_trajectory_is_an_error() {
        let d = DMatrix::identity(2, 2);
        let v = DVector::zeros(2);
        let err = backward(None, &v, &v, &AgeGate::open(2), &d, 1.0, &[0.1], true).unwrap_err();
        assert!(matches!(err, Error::MissingTrajectory));
    }

    #[test]
    fn pilots_stay_normalized_during_training() {
        let cfg = SystemConfig::desk_default();
        let tcfg = TrainConfig {
            steps: 40,
            layers: 3,
            batch_size: 8,
            stagewise: false,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&cfg, &tcfg, 1).unwrap();
        for _ in 0..40 {
            state.train_step().unwrap();
            assert!(state.params.pilots.max_norm_deviation() < 1e-9);
            assert!(state.params.thetas.iter().all(|t| *t >= 0.0));
        }
        assert!(state.is_finished());
    }

    #[test]
    fn plateau_triggers_after_patience() {
        let mut p = Plateau::new();
        let mut fired = None;
        for i in 0..100 {
            if p.update(1.0, 5, 10) {
                fired = Some(i);
                break;
            }
        }
        // window fills at i = 4 (new best), then 10 non-improving steps
        assert_eq!(fired, Some(14));
    }
}
