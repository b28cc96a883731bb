//! Shared domain types, random instance generation and the linear
//! measurement model `y = P h + n`.
//!
//! Devices are laid out with the `N` alarm devices first and the `K`
//! monitor devices last, so index `i < N` is an alarm device and
//! `N + k` is monitor device `k`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream used everywhere in the crate.
pub type RngStream = ChaCha8Rng;

/// Opens an independent stream `stream` of the generator seeded by `seed`.
///
/// Parallel tasks each take their own stream id so results do not depend on
/// scheduling.
pub fn rng_stream(seed: u64, stream: u64) -> RngStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Tolerance used when checking unit column norms.
pub const UNIT_NORM_TOL: f64 = 1e-12;

/// Full scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Number of alarm devices (N).
    pub n_alarm: usize,
    /// Number of monitor devices (K).
    pub n_monitor: usize,
    /// Pilot length (M).
    pub pilot_len: usize,
    /// Per-measurement SNR in dB; `inf` disables noise.
    pub snr_db: f64,
    /// Per-slot activation probability of an alarm device.
    pub ad_active_prob: f64,
    /// Largest AoI assumed by the access analysis (a_max).
    pub age_max: u32,
    /// Access probability of an eligible monitor device (p).
    pub access_prob: f64,
    /// Age threshold (delta): a monitor device may transmit only when its age exceeds it.
    pub age_threshold: u32,
    /// Maximum channel estimation error for a successful detection (tau).
    pub detect_tol: f64,
    /// Magnitude above which an estimated entry counts as detected.
    pub support_tol: f64,
    pub seed: u64,
}

impl SystemConfig {
    /// Full-scale setting: N = 64, K = 128, M = 39, 20 dB, with the
    /// optimal access pair for M = 39.
    pub fn full_scale_default() -> Self {
        Self {
            n_alarm: 64,
            n_monitor: 128,
            pilot_len: 39,
            snr_db: 20.0,
            ad_active_prob: 0.05,
            age_max: 100,
            access_prob: 0.05,
            age_threshold: 29,
            detect_tol: 0.1,
            support_tol: 1e-3,
            seed: 0,
        }
    }

    /// Small scenario that trains and simulates in seconds.
    pub fn desk_default() -> Self {
        Self {
            n_alarm: 16,
            n_monitor: 32,
            pilot_len: 16,
            snr_db: 20.0,
            ad_active_prob: 0.05,
            age_max: 100,
            access_prob: 0.1,
            age_threshold: 4,
            detect_tol: 0.1,
            support_tol: 1e-3,
            seed: 0,
        }
    }

    pub fn total_devices(&self) -> usize {
        self.n_alarm + self.n_monitor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_monitor < 1 {
            return bad("n_monitor must be at least 1".into());
        }
        if self.pilot_len < 1 {
            return bad("pilot_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.access_prob) {
            return bad(format!("access_prob {} outside [0, 1]", self.access_prob));
        }
        if !(0.0..=1.0).contains(&self.ad_active_prob) {
            return bad(format!("ad_active_prob {} outside [0, 1]", self.ad_active_prob));
        }
        if self.age_threshold < 1 || self.age_threshold > self.age_max {
            return bad(format!(
                "age_threshold {} must lie in [1, age_max = {}]",
                self.age_threshold, self.age_max
            ));
        }
        if !(self.detect_tol > 0.0) {
            return bad(format!("detect_tol {} must be positive", self.detect_tol));
        }
        if !(self.support_tol >= 0.0) {
            return bad(format!("support_tol {} must be nonnegative", self.support_tol));
        }
        if self.snr_db.is_nan() {
            return bad("snr_db is NaN".into());
        }
        Ok(())
    }

    /// Expected number of transmitting devices per slot, assuming ages
    /// uniform on `1..=age_max` (the access analysis assumption).
    pub fn expected_active(&self) -> f64 {
        let eligible = (self.age_max - self.age_threshold) as f64 / self.age_max as f64;
        self.n_alarm as f64 * self.ad_active_prob
            + self.n_monitor as f64 * eligible * self.access_prob
    }

    /// Per-entry noise standard deviation realizing `snr_db` for unit-norm
    /// pilots and unit-variance channel gains.
    pub fn noise_std(&self) -> f64 {
        noise_std_for_snr(self.snr_db, self.expected_active(), self.pilot_len)
    }

    /// Noise level for the expected number of transmitters under `rule`.
    pub fn noise_std_under(&self, rule: AccessRule) -> f64 {
        let expected = match rule {
            AccessRule::AgeBased { threshold, p } => {
                let eligible = self.age_max.saturating_sub(threshold) as f64 / self.age_max as f64;
                self.n_alarm as f64 * self.ad_active_prob + self.n_monitor as f64 * eligible * p
            }
            AccessRule::Aloha { p } => self.n_alarm as f64 * self.ad_active_prob + self.n_monitor as f64 * p,
        };
        noise_std_for_snr(self.snr_db, expected, self.pilot_len)
    }
}

/// Noise standard deviation such that `E||P h||^2 / E||n||^2 = 10^(snr_db/10)`
/// given the expected signal energy `signal_power` spread over `m` entries.
pub fn noise_std_for_snr(snr_db: f64, signal_power: f64, m: usize) -> f64 {
    if snr_db == f64::INFINITY || signal_power <= 0.0 {
        return 0.0;
    }
    let linear = 10f64.powf(snr_db / 10.0);
    (signal_power / (linear * m as f64)).sqrt()
}

/// Column-normalized `M x S` pilot matrix. Columns `0..N` are the alarm
/// pilots, the remaining `K` the monitor pilots.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix(DMatrix<f64>);

impl PilotMatrix {
    /// Normalizes the columns of `m`. Zero columns are left at zero.
    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        let mut p = Self(m);
        p.normalize_columns();
        p
    }

    /// Wraps `m` without touching it; use [`Self::max_norm_deviation`] to check it.
    pub fn from_raw(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    /// I.i.d. standard normal entries, then column normalization.
    pub fn gaussian<R: Rng + ?Sized>(m: usize, s: usize, rng: &mut R) -> Self {
        let data = DMatrix::from_fn(m, s, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::from_matrix(data)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    /// Scales every nonzero column to unit norm. Columns already within a
    /// few ulps of unit norm are left alone, which makes the operation
    /// exactly idempotent.
    pub fn normalize_columns(&mut self) {
        for mut col in self.0.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 && (norm - 1.0).abs() > 4.0 * f64::EPSILON {
                col /= norm;
            }
        }
    }

    /// Largest `| ||P_i|| - 1 |` over the columns.
    pub fn max_norm_deviation(&self) -> f64 {
        self.0
            .column_iter()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Channel vector with its activity support (`values[i] != 0` iff `i` is in
/// the support).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseChannelVector {
    values: DVector<f64>,
}

impl SparseChannelVector {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(DVector::zeros(len))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self::new(DVector::from_vec(values))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn support(&self) -> Vec<usize> {
        self.support_above(0.0)
    }

    /// Indices with `|value| > tol`.
    pub fn support_above(&self, tol: f64) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() > tol)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sparsity(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// Instantaneous AoI of every monitor device; every entry is at least one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeVector(Vec<u32>);

impl AgeVector {
    pub fn new(ages: Vec<u32>) -> Result<Self> {
        if let Some(pos) = ages.iter().position(|a| *a < 1) {
            return Err(Error::InvalidConfig(format!("age at index {pos} is zero")));
        }
        Ok(Self(ages))
    }

    pub fn ones(k: usize) -> Self {
        Self(vec![1; k])
    }

    /// Ages uniform on `1..=age_max`.
    pub fn uniform<R: Rng + ?Sized>(k: usize, age_max: u32, rng: &mut R) -> Self {
        Self((0..k).map(|_| rng.random_range(1..=age_max)).collect())
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// AoI evolution: reset to one on success, otherwise grow by one.
    pub fn advance(&mut self, success: &[bool]) {
        debug_assert_eq!(success.len(), self.0.len());
        for (age, ok) in self.0.iter_mut().zip(success) {
            *age = if *ok { 1 } else { age.saturating_add(1) };
        }
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|a| *a as f64).sum::<f64>() / self.0.len() as f64
    }
}

/// Which devices transmit in a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMask {
    pub alarm_active: Vec<bool>,
    pub monitor_active: Vec<bool>,
}

impl ActivityMask {
    pub fn n_active_alarm(&self) -> usize {
        self.alarm_active.iter().filter(|a| **a).count()
    }

    pub fn n_active_monitor(&self) -> usize {
        self.monitor_active.iter().filter(|a| **a).count()
    }

    /// Activity over the concatenated device index space.
    pub fn is_active(&self, device: usize) -> bool {
        let n = self.alarm_active.len();
        if device < n {
            self.alarm_active[device]
        } else {
            self.monitor_active[device - n]
        }
    }

    pub fn alarm_support(&self) -> Vec<usize> {
        self.alarm_active
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Monitor-device access rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccessRule {
    /// Age-based random access: transmit with probability `p` once the age exceeds `threshold`.
    AgeBased { threshold: u32, p: f64 },
    /// Plain slotted random access: every device transmits with probability `p`.
    Aloha { p: f64 },
}

impl AccessRule {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        AccessRule::AgeBased {
            threshold: cfg.age_threshold,
            p: cfg.access_prob,
        }
    }

    pub fn access_prob(&self) -> f64 {
        match *self {
            AccessRule::AgeBased { p, .. } | AccessRule::Aloha { p } => p,
        }
    }

    pub fn eligible(&self, age: u32) -> bool {
        match *self {
            AccessRule::AgeBased { threshold, .. } => age > threshold,
            AccessRule::Aloha { .. } => true,
        }
    }
}

/// Draws one slot under the age-based access rule of `cfg`.
pub fn generate_instance<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    ages: &AgeVector,
    rng: &mut R,
) -> (SparseChannelVector, ActivityMask) {
    generate_instance_with(cfg, ages, AccessRule::from_config(cfg), rng)
}

/// Draws activity and channel gains for one slot. Active devices get a
/// standard normal gain (unit path loss).
pub fn generate_instance_with<R: Rng + ?Sized>(
    cfg: &SystemConfig,
    ages: &AgeVector,
    rule: AccessRule,
    rng: &mut R,
) -> (SparseChannelVector, ActivityMask) {
    let n = cfg.n_alarm;
    let k = cfg.n_monitor;
    debug_assert_eq!(ages.len(), k);

    let alarm_active: Vec<bool> = (0..n).map(|_| rng.random_bool(cfg.ad_active_prob)).collect();
    let p = rule.access_prob();
    let monitor_active: Vec<bool> = ages
        .as_slice()
        .iter()
        .map(|&age| rule.eligible(age) && rng.random_bool(p))
        .collect();

    let mut values = DVector::zeros(n + k);
    for (i, v) in values.iter_mut().enumerate() {
        let active = if i < n { alarm_active[i] } else { monitor_active[i - n] };
        if active {
            let mut g: f64 = rng.sample(StandardNormal);
            // an exact zero would silently drop the device from the support
            while g == 0.0 {
                g = rng.sample(StandardNormal);
            }
            *v = g;
        }
    }
    (
        SparseChannelVector::new(values),
        ActivityMask {
            alarm_active,
            monitor_active,
        },
    )
}

/// `P h + n` with i.i.d. `N(0, noise_std^2)` noise; `noise_std = 0` returns
/// exactly `P h` and draws nothing from `rng`.
pub fn encode<R: Rng + ?Sized>(
    pilots: &PilotMatrix,
    h: &SparseChannelVector,
    noise_std: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if pilots.cols() != h.len() {
        return Err(Error::DimensionMismatch {
            context: "encode",
            expected: pilots.cols(),
            found: h.len(),
        });
    }
    let mut y = pilots.matrix() * h.values();
    if noise_std > 0.0 {
        for v in y.iter_mut() {
            *v += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// Real embedding of a complex pilot matrix `Re + j Im`:
/// `[[Re, -Im], [Im, Re]]`, of size `2M x 2S`.
pub fn stack_complex_matrix(re: &DMatrix<f64>, im: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(re.shape(), im.shape(), "real and imaginary parts differ in shape");
    let (m, s) = re.shape();
    let mut out = DMatrix::zeros(2 * m, 2 * s);
    out.view_mut((0, 0), (m, s)).copy_from(re);
    out.view_mut((0, s), (m, s)).copy_from(&(-im));
    out.view_mut((m, 0), (m, s)).copy_from(im);
    out.view_mut((m, s), (m, s)).copy_from(re);
    out
}

/// Real embedding `[Re; Im]` of a complex vector.
pub fn stack_complex_vector(re: &DVector<f64>, im: &DVector<f64>) -> DVector<f64> {
    assert_eq!(re.len(), im.len(), "real and imaginary parts differ in length");
    let mut out = DVector::zeros(2 * re.len());
    out.rows_mut(0, re.len()).copy_from(re);
    out.rows_mut(re.len(), im.len()).copy_from(im);
    out
}
