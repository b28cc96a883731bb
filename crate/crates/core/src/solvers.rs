//! Sparse recovery: ISTA, the unfolded (tied-weight) decoder with an
//! optional age gate, and detection metrics.
//!
//! Every solver here runs the same layer kernel
//!
//! ```text
//! r = y - D h
//! z = h + omega * D^T r            (= omega D^T y + (I - omega D^T D) h)
//! h' = eta(z; gamma, theta)
//! ```
//!
//! so ISTA is literally the unfolded decoder with an open gate and a
//! constant threshold. `D` is usually the pilot matrix itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivityMask, AgeVector, SparseChannelVector};

/// Step size and per-layer thresholds of the unfolded decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub omega: f64,
    pub thetas: Vec<f64>,
}

impl SolverParams {
    pub fn new(omega: f64, thetas: Vec<f64>) -> Self {
        Self { omega, thetas }
    }

    pub fn constant(omega: f64, theta: f64, layers: usize) -> Self {
        Self::new(omega, vec![theta; layers])
    }

    pub fn layers(&self) -> usize {
        self.thetas.len()
    }
}

/// Per-device indicator of "may be active". Alarm devices are always open;
/// monitor device `k` is open iff its age exceeds the access threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgeGate {
    gamma: Vec<bool>,
}

impl AgeGate {
    /// Gate that excludes nothing.
    pub fn open(len: usize) -> Self {
        Self {
            gamma: vec![true; len],
        }
    }

    pub fn from_ages(n_alarm: usize, ages: &AgeVector, threshold: u32) -> Self {
        let mut gamma = vec![true; n_alarm];
        gamma.extend(ages.as_slice().iter().map(|&a| a > threshold));
        Self { gamma }
    }

    pub fn from_mask(gamma: Vec<bool>) -> Self {
        Self { gamma }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn is_open(&self, i: usize) -> bool {
        self.gamma[i]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.gamma
    }

    /// Indices forced to zero (the set Lambda of the coherence analysis).
    pub fn gated_indices(&self) -> Vec<usize> {
        self.gamma
            .iter()
            .enumerate()
            .filter(|(_, g)| !**g)
            .map(|(i, _)| i)
            .collect()
    }
}

#[inline]
pub fn shrink(x: f64, theta: f64) -> f64 {
    if x > theta {
        x - theta
    } else if x < -theta {
        x + theta
    } else {
        0.0
    }
}

/// Elementwise `sign(x) max(|x| - theta, 0)`.
pub fn soft_threshold(x: &DVector<f64>, theta: f64) -> DVector<f64> {
    x.map(|v| shrink(v, theta))
}

/// Soft threshold on open coordinates, exact zero on gated ones.
pub fn age_gated_threshold(x: &DVector<f64>, gate: &AgeGate, theta: f64) -> DVector<f64> {
    assert_eq!(x.len(), gate.len(), "gate length must match the vector");
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(gate.as_slice())
            .map(|(&v, &open)| if open { shrink(v, theta) } else { 0.0 }),
    )
}

/// Largest eigenvalue of `D^T D`, via the smaller of the two Gram matrices.
pub fn lambda_max(d: &DMatrix<f64>) -> f64 {
    let gram = if d.nrows() <= d.ncols() {
        d * d.transpose()
    } else {
        d.transpose() * d
    };
    gram.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// The convergent ISTA step `1 / lambda_max(D^T D)`.
pub fn default_step(d: &DMatrix<f64>) -> f64 {
    1.0 / lambda_max(d)
}

/// Every iterate `h^0 = 0, h^1, ..., h^L` and every pre-activation
/// `z^0, ..., z^{L-1}` of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub iterates: Vec<DVector<f64>>,
    pub preactivations: Vec<DVector<f64>>,
}

fn check_dims(d: &DMatrix<f64>, y: &DVector<f64>, gate: &AgeGate) -> Result<()> {
    if d.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "decoder measurement",
            expected: d.nrows(),
            found: y.len(),
        });
    }
    if d.ncols() != gate.len() {
        return Err(Error::DimensionMismatch {
            context: "decoder gate",
            expected: d.ncols(),
            found: gate.len(),
        });
    }
    Ok(())
}

/// One decoder layer: returns `(z, h')`.
pub fn layer_step(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DVector<f64>,
    omega: f64,
    gate: &AgeGate,
    theta: f64,
) -> (DVector<f64>, DVector<f64>) {
    let residual = y - d * h;
    let z = h + d.tr_mul(&residual) * omega;
    let next = age_gated_threshold(&z, gate, theta);
    (z, next)
}

/// Forward pass of the age-gated unfolded decoder from `h^0 = 0`.
/// With `retain` the full trajectory is kept for backpropagation and
/// analysis.
pub fn lista_age_forward(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    gate: &AgeGate,
    params: &SolverParams,
    retain: bool,
) -> Result<(SparseChannelVector, Option<Trajectory>)> {
    check_dims(d, y, gate)?;
    let mut h = DVector::zeros(d.ncols());
    let mut traj = retain.then(|| Trajectory {
        iterates: vec![h.clone()],
        preactivations: Vec::with_capacity(params.layers()),
    });
    for (l, &theta) in params.thetas.iter().enumerate() {
        let (z, next) = layer_step(d, y, &h, params.omega, gate, theta);
        if next.iter().any(|v| !v.is_finite()) || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: l + 1 });
        }
        h = next;
        if let Some(t) = traj.as_mut() {
            t.preactivations.push(z);
            t.iterates.push(h.clone());
        }
    }
    Ok((SparseChannelVector::new(h), traj))
}

/// Plain ISTA with a constant threshold.
pub fn ista_solve(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    omega: f64,
    theta: f64,
    iters: usize,
) -> Result<SparseChannelVector> {
    let gate = AgeGate::open(d.ncols());
    let params = SolverParams::constant(omega, theta, iters);
    lista_age_forward(d, y, &gate, &params, false).map(|(h, _)| h)
}

/// Geometrically decreasing thresholds `start * decay^k`, floored at `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub decay: f64,
    pub floor: f64,
}

impl Default for Continuation {
    fn default() -> Self {
        Self {
            decay: 0.97,
            floor: 1e-7,
        }
    }
}

impl Continuation {
    pub fn thresholds(&self, start: f64, iters: usize) -> Vec<f64> {
        let mut theta = start;
        (0..iters)
            .map(|_| {
                let t = theta.max(self.floor);
                theta *= self.decay;
                t
            })
            .collect()
    }
}

/// ISTA whose threshold starts at `max |omega D^T y|` and decays
/// geometrically. Reaches the exact sparse solution in a fixed iteration
/// budget where a constant small threshold stalls.
pub fn ista_continuation(
    d: &DMatrix<f64>,
    y: &DVector<f64>,
    omega: f64,
    schedule: Continuation,
    iters: usize,
) -> Result<SparseChannelVector> {
    let start = (d.tr_mul(y) * omega).amax();
    let params = SolverParams::new(omega, schedule.thresholds(start, iters));
    let gate = AgeGate::open(d.ncols());
    lista_age_forward(d, y, &gate, &params, false).map(|(h, _)| h)
}

/// `0.5 ||y - D h||^2 + lambda ||h||_1`.
pub fn lasso_objective(d: &DMatrix<f64>, y: &DVector<f64>, h: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (y - d * h).norm_squared() + lambda * h.lp_norm(1)
}

/// Per-device outcome of one decoded slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Sorted indices with `|estimate| > support_tol`.
    pub estimated_support: Vec<usize>,
    pub estimate: SparseChannelVector,
    /// Active and estimated within `tau`.
    pub per_device_success: Vec<bool>,
}

impl DetectionResult {
    pub fn in_support(&self, i: usize) -> bool {
        self.estimated_support.binary_search(&i).is_ok()
    }
}

/// Marks device `k` successful iff it is active and `|h_k - h_hat_k| <= tau`.
pub fn detect(
    estimate: SparseChannelVector,
    truth: &SparseChannelVector,
    mask: &ActivityMask,
    tau: f64,
    support_tol: f64,
) -> Result<DetectionResult> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            context: "detect",
            expected: truth.len(),
            found: estimate.len(),
        });
    }
    let per_device_success = (0..truth.len())
        .map(|i| mask.is_active(i) && (truth.values()[i] - estimate.values()[i]).abs() <= tau)
        .collect();
    Ok(DetectionResult {
        estimated_support: estimate.support_above(support_tol),
        estimate,
        per_device_success,
    })
}

/// Fraction of active alarm devices that are both in the estimated support
/// and estimated within `tau`.
pub fn detection_rate(result: &DetectionResult, true_alarm_support: &[usize]) -> Result<f64> {
    if true_alarm_support.is_empty() {
        return Err(Error::UndefinedMetric("no active alarm device in this slot"));
    }
    let hits = true_alarm_support
        .iter()
        .filter(|&&i| result.in_support(i) && result.per_device_success[i])
        .count();
    Ok(hits as f64 / true_alarm_support.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{rng_stream, PilotMatrix};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn soft_threshold_cases() {
        assert!((shrink(0.5, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(shrink(-0.05, 0.1), 0.0);
        assert_eq!(shrink(-0.5, 0.1), -0.4);
        let x = v(&[1.5, -2.0, 0.0, 3e-9]);
        assert_eq!(soft_threshold(&x, 0.0), x);
    }

    #[test]
    fn gated_threshold_cases() {
        let x = v(&[5.0, -4.0, 0.2, 100.0]);
        let closed = AgeGate::from_mask(vec![false; 4]);
        assert!(age_gated_threshold(&x, &closed, 0.1).iter().all(|v| *v == 0.0));
        let open = AgeGate::open(4);
        assert_eq!(age_gated_threshold(&x, &open, 0.1), soft_threshold(&x, 0.1));
        let mixed = AgeGate::from_mask(vec![true, true, true, false]);
        let out = age_gated_threshold(&x, &mixed, 0.1);
        assert_eq!(out[3], 0.0);
        assert_eq!(out[0], 4.9);
    }

    #[test]
    fn gate_from_ages() {
        let ages = AgeVector::new(vec![1, 5, 3, 9]).unwrap();
        let gate = AgeGate::from_ages(2, &ages, 3);
        assert_eq!(gate.as_slice(), &[true, true, false, true, false, true]);
        assert_eq!(gate.gated_indices(), vec![2, 4]);
    }

    #[test]
    fn ista_identity_one_step() {
        let id = DMatrix::identity(5, 5);
        let truth = v(&[0.0, 1.0, 0.0, -2.0, 0.5]);
        let h = ista_solve(&id, &truth, 1.0, 0.0, 1).unwrap();
        assert_eq!(h.values(), &truth);
    }

    #[test]
    fn huge_threshold_keeps_zero() {
        let mut rng = rng_stream(1, 0);
        let p = PilotMatrix::gaussian(6, 10, &mut rng);
        let y = v(&[1.0, -1.0, 2.0, 0.3, 0.0, 1.0]);
        let h = ista_solve(p.matrix(), &y, default_step(p.matrix()), 1e6, 50).unwrap();
        assert!(h.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_layers_give_zero() {
        let d = DMatrix::identity(3, 3);
        let (h, _) = lista_age_forward(&d, &v(&[1.0, 2.0, 3.0]), &AgeGate::open(3), &SolverParams::new(1.0, vec![]), false).unwrap();
        assert!(h.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let d = DMatrix::identity(2, 2) * 10.0;
        let params = SolverParams::constant(10.0, 0.0, 400);
        let err = lista_age_forward(&d, &v(&[1.0, 1.0]), &AgeGate::open(2), &params, false).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn lambda_max_of_identity_and_scaled() {
        assert!((lambda_max(&DMatrix::identity(4, 4)) - 1.0).abs() < 1e-12);
        let d = DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((lambda_max(&d) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn detection_examples() {
        let truth = SparseChannelVector::from_vec(vec![1.0, 0.0, -0.7, 0.0]);
        let mask = ActivityMask {
            alarm_active: vec![true, false],
            monitor_active: vec![true, false],
        };
        let exact = detect(truth.clone(), &truth, &mask, 0.1, 1e-3).unwrap();
        assert_eq!(exact.per_device_success, vec![true, false, true, false]);
        assert_eq!(detection_rate(&exact, &[0]).unwrap(), 1.0);

        let close = SparseChannelVector::from_vec(vec![1.05, 0.9, -0.7, 0.0]);
        let r = detect(close, &truth, &mask, 0.1, 1e-3).unwrap();
        assert!(r.per_device_success[0]);
        // inactive device 1 never succeeds whatever the estimate
        assert!(!r.per_device_success[1]);

        let empty = detect(SparseChannelVector::zeros(4), &truth, &mask, 0.1, 1e-3).unwrap();
        assert_eq!(detection_rate(&empty, &[0]).unwrap(), 0.0);
        assert!(matches!(detection_rate(&empty, &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn detection_rate_half() {
        let truth = SparseChannelVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let est = SparseChannelVector::from_vec(vec![1.0, 0.0, 1.02, 0.0]);
        let mask = ActivityMask {
            alarm_active: vec![true; 4],
            monitor_active: vec![],
        };
        let r = detect(est, &truth, &mask, 0.1, 1e-3).unwrap();
        assert_eq!(detection_rate(&r, &[0, 1, 2, 3]).unwrap(), 0.5);
    }
}
