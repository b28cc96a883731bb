//! Reverse-mode gradients of the squared reconstruction error through the
//! unfolded decoder.
//!
//! Layer `l` computes `r = y - D h`, `z = h + omega D^T r`,
//! `h' = eta(z; gamma, theta_l)`. Walking the layers backwards with the
//! adjoint `g_h` of `h'`:
//!
//! ```text
//! g_z      = g_h * [gamma_i and |z_i| > theta_l]
//! g_theta  = -sum_i sign(z_i) g_z_i
//! g_omega += r . (D g_z)
//! g_D     += omega r g_z^T - omega (D g_z) h^T
//! g_y     += omega D g_z
//! g_h      = g_z - omega D^T D g_z
//! ```
//!
//! When the pilot matrix is tied to the encoder (`y = D h* + n`), the
//! encoder contributes `g_y h*^T` on top of the per-layer terms. Noise is
//! data and gets no gradient.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::solvers::{AgeGate, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub matrix: DMatrix<f64>,
    pub omega: f64,
    pub thetas: Vec<f64>,
}

impl Gradients {
    pub fn zeros(rows: usize, cols: usize, layers: usize) -> Self {
        Self {
            matrix: DMatrix::zeros(rows, cols),
            omega: 0.0,
            thetas: vec![0.0; layers],
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        self.matrix += &other.matrix;
        self.omega += other.omega;
        for (a, b) in self.thetas.iter_mut().zip(&other.thetas) {
            *a += b;
        }
    }
}

/// Gradient of `||h^L - h*||^2` for one sample.
///
/// `trajectory` must come from a retained forward pass with the same
/// `decoder`, `omega`, `thetas` and `gate`. `tied_encoder` adds the path
/// through `y = decoder * truth + n`.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    trajectory: Option<&Trajectory>,
    truth: &DVector<f64>,
    y: &DVector<f64>,
    gate: &AgeGate,
    decoder: &DMatrix<f64>,
    omega: f64,
    thetas: &[f64],
    tied_encoder: bool,
) -> Result<Gradients> {
    let traj = trajectory.ok_or(Error::MissingTrajectory)?;
    let depth = traj.preactivations.len();
    if traj.iterates.len() != depth + 1 || thetas.len() < depth {
        return Err(Error::MissingTrajectory);
    }
    let (m, s) = decoder.shape();
    let mut grads = Gradients::zeros(m, s, depth);
    let mut g_y = DVector::zeros(m);

    let output = &traj.iterates[depth];
    let mut g_h: DVector<f64> = (output - truth) * 2.0;

    for l in (0..depth).rev() {
        let z = &traj.preactivations[l];
        let h = &traj.iterates[l];
        let theta = thetas[l];

        let mut g_z = DVector::zeros(s);
        let mut g_theta = 0.0;
        for i in 0..s {
            if gate.is_open(i) && z[i].abs() > theta {
                g_z[i] = g_h[i];
                g_theta -= z[i].signum() * g_h[i];
            }
        }
        grads.thetas[l] = g_theta;

        let residual = y - decoder * h;
        let u = decoder * &g_z;
        grads.omega += residual.dot(&u);
        grads.matrix.ger(omega, &residual, &g_z, 1.0);
        let g_r = u * omega;
        grads.matrix.ger(-1.0, &g_r, h, 1.0);
        g_y += &g_r;
        g_h = g_z - decoder.tr_mul(&g_r);
    }

    if tied_encoder {
        grads.matrix.ger(1.0, &g_y, truth, 1.0);
    }
    Ok(grads)
}
