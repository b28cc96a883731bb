//! Coherence quantities and an empirical certificate for the linear
//! convergence bound of the age-gated iteration.
//!
//! The certified iteration is the unit-step form
//! `h' = eta(h - P^T (P h - y); gamma, theta_l)` started at `h = 0`, with the
//! threshold schedule `theta_l = max_data mu2 ||h_l - h*||_1 + C_P sigma`
//! built one layer at a time. Suprema are taken over the supplied dataset,
//! so every certificate is relative to that dataset.

use std::fmt::Write as _;
use std::io::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{PilotMatrix, UNIT_NORM_TOL};
use crate::solvers::{layer_step, AgeGate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoherenceReport {
    /// Largest off-diagonal Gram entry in magnitude.
    pub mu1: f64,
    /// Same, restricted to rows outside the gated set.
    pub mu2: f64,
    /// Largest entry of `P` in magnitude.
    pub c_p: f64,
    /// Sparsity the constants were evaluated at.
    pub s: usize,
    /// Contraction factor `mu1 s - mu1 + mu2 s`.
    pub contraction: f64,
    /// `-ln(contraction)`.
    pub c_rate: f64,
    /// `2 s C_P / (1 - contraction)`.
    pub c_const: f64,
    pub s_admissible: usize,
}

impl CoherenceReport {
    pub fn converges(&self) -> bool {
        self.contraction < 1.0
    }
}

/// Rate and noise constant of the ungated bound, `(-ln(2 mu s - mu), 2 s C_P / (1 - 2 mu s + mu))`.
pub fn ungated_constants(mu: f64, s: usize, c_p: f64) -> (f64, f64) {
    let s = s as f64;
    (-(2.0 * mu * s - mu).ln(), 2.0 * s * c_p / (1.0 - 2.0 * mu * s + mu))
}

/// Rate and noise constant for given coherences.
pub fn gated_constants(mu1: f64, mu2: f64, s: usize, c_p: f64) -> (f64, f64, f64) {
    let sf = s as f64;
    let contraction = mu1 * sf - mu1 + mu2 * sf;
    (contraction, -contraction.ln(), 2.0 * sf * c_p / (1.0 - mu1 * sf - mu2 * sf + mu1))
}

/// Largest `s <= total` with `s <= (1 + mu1) / (mu1 + mu2)`.
pub fn s_admissible(mu1: f64, mu2: f64, total: usize) -> usize {
    if mu1 + mu2 == 0.0 {
        return total;
    }
    let limit = ((1.0 + mu1) / (mu1 + mu2)).floor();
    if limit >= total as f64 {
        total
    } else {
        limit as usize
    }
}

pub fn check_normalized(p: &PilotMatrix) -> Result<()> {
    let deviation = p.max_norm_deviation();
    if deviation > UNIT_NORM_TOL * p.rows().max(1) as f64 {
        return Err(Error::NotNormalized { deviation });
    }
    Ok(())
}

/// Coherences of `p` with the devices in `gated` excluded from `mu2`, and
/// the convergence constants at sparsity `s`.
pub fn coherence(p: &PilotMatrix, gated: &[usize], s: usize) -> Result<CoherenceReport> {
    check_normalized(p)?;
    let n = p.cols();
    if let Some(&bad) = gated.iter().find(|&&i| i >= n) {
        return Err(Error::DimensionMismatch {
            context: "gated index",
            expected: n,
            found: bad,
        });
    }
    let mut excluded = vec![false; n];
    for &i in gated {
        excluded[i] = true;
    }
    let gram = p.matrix().tr_mul(p.matrix());
    let mut mu1: f64 = 0.0;
    let mut mu2: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = gram[(i, j)].abs();
            mu1 = mu1.max(g);
            if !excluded[i] {
                mu2 = mu2.max(g);
            }
        }
    }
    let c_p = p.matrix().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (contraction, c_rate, c_const) = gated_constants(mu1, mu2, s, c_p);
    Ok(CoherenceReport {
        mu1,
        mu2,
        c_p,
        s,
        contraction,
        c_rate,
        c_const,
        s_admissible: s_admissible(mu1, mu2, n),
    })
}

/// Relative headroom added to every threshold. When the worst sample sits
/// on the most coherent pair, an off-support pre-activation equals the
/// threshold in exact arithmetic and rounding alone decides the zero.
pub const THETA_ROUNDING: f64 = 1e-12;

/// One threshold of the schedule: `mu2 * max ||h_l - h*||_1 + c_p * sigma`,
/// widened by [`THETA_ROUNDING`].
pub fn theta_for_layer<'a, I>(errors: I, mu2: f64, c_p: f64, sigma: f64) -> Result<f64>
where
    I: IntoIterator<Item = (&'a DVector<f64>, &'a DVector<f64>)>,
{
    let mut worst: Option<f64> = None;
    for (h, truth) in errors {
        let e = (h - truth).lp_norm(1);
        worst = Some(worst.map_or(e, |w: f64| w.max(e)));
    }
    let worst = worst.ok_or(Error::EmptyDataset)?;
    Ok((mu2 * worst + c_p * sigma) * (1.0 + THETA_ROUNDING))
}

/// One element of a certification dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CertSample {
    pub truth: DVector<f64>,
    pub noise: DVector<f64>,
}

/// Signals bounded by `bound`, at most `s` nonzeros, zero on `gated`, and
/// noise with l1 norm at most `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertDataset {
    pub gated: Vec<usize>,
    pub bound: f64,
    pub s: usize,
    pub sigma: f64,
    pub samples: Vec<CertSample>,
}

impl CertDataset {
    pub fn check_membership(&self, n: usize, m: usize) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (index, x) in self.samples.iter().enumerate() {
            let fail = |reason: String| Err(Error::MembershipViolation { index, reason });
            if x.truth.len() != n || x.noise.len() != m {
                return fail("wrong dimensions".into());
            }
            if x.truth.iter().any(|v| v.abs() > self.bound) {
                return fail(format!("entry exceeds bound {}", self.bound));
            }
            let nnz = x.truth.iter().filter(|v| **v != 0.0).count();
            if nnz > self.s {
                return fail(format!("{nnz} nonzeros exceed sparsity {}", self.s));
            }
            if self.gated.iter().any(|&i| x.truth[i] != 0.0) {
                return fail("nonzero entry on a gated device".into());
            }
            let l1 = x.noise.lp_norm(1);
            if l1 > self.sigma {
                return fail(format!("noise l1 norm {l1} exceeds {}", self.sigma));
            }
        }
        Ok(())
    }

    /// Random members: support size uniform on `1..=s` among ungated
    /// devices, magnitudes uniform on `[bound/10, bound]` with random signs,
    /// noise direction Gaussian with l1 norm uniform on `[0, sigma]`.
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        m: usize,
        gated: Vec<usize>,
        s: usize,
        bound: f64,
        sigma: f64,
        count: usize,
        rng: &mut R,
    ) -> Self {
        let mut free: Vec<usize> = (0..n).filter(|i| !gated.contains(i)).collect();
        let samples = (0..count)
            .map(|_| {
                let k = rng.random_range(1..=s.min(free.len()).max(1)).min(free.len());
                free.shuffle(rng);
                let mut truth = DVector::zeros(n);
                for &i in &free[..k] {
                    let mag = bound * rng.random_range(0.1..=1.0);
                    truth[i] = if rng.random::<bool>() { mag } else { -mag };
                }
                let mut noise = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                let l1 = noise.lp_norm(1);
                if sigma > 0.0 && l1 > 0.0 {
                    // shrink slightly so rounding never pushes past sigma
                    noise *= sigma * rng.random_range(0.0..1.0) / l1 * (1.0 - 1e-12);
                } else {
                    noise.fill(0.0);
                }
                CertSample { truth, noise }
            })
            .collect();
        Self {
            gated,
            bound,
            s,
            sigma,
            samples,
        }
    }
}

/// Worst case over the dataset at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerCertificate {
    pub layer: usize,
    pub theta: f64,
    pub max_error_l2: f64,
    pub bound_l2: f64,
    /// `bound_l2 - max_error_l2`.
    pub margin_l2: f64,
    /// Smallest slack of the one-step l1 recursion into this layer, with the
    /// same relative rounding headroom as the thresholds (none at layer 0).
    pub recursion_margin: Option<f64>,
    /// Off-support entries that are not exactly zero.
    pub support_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationReport {
    pub coherence: CoherenceReport,
    pub samples: usize,
    pub bound: f64,
    pub sigma: f64,
    pub layers: Vec<LayerCertificate>,
}

impl CertificationReport {
    pub fn certified(&self) -> bool {
        self.layers.iter().all(|l| {
            l.support_violations == 0 && l.margin_l2 >= 0.0 && l.recursion_margin.is_none_or(|m| m >= 0.0)
        })
    }

    pub fn min_margin(&self) -> f64 {
        self.layers.iter().map(|l| l.margin_l2).fold(f64::INFINITY, f64::min)
    }

    pub fn to_text(&self) -> String {
        let c = &self.coherence;
        let mut out = String::new();
        let _ = writeln!(out, "certification: {}", if self.certified() { "PASS" } else { "FAIL" });
        let _ = writeln!(out, "samples: {}  B: {}  sigma: {}", self.samples, self.bound, self.sigma);
        let _ = writeln!(
            out,
            "mu1: {:.6}  mu2: {:.6}  C_P: {:.6}  s: {}  s_admissible: {}",
            c.mu1, c.mu2, c.c_p, c.s, c.s_admissible
        );
        let _ = writeln!(
            out,
            "contraction: {:.6}  c: {:.6}  C: {:.6}",
            c.contraction, c.c_rate, c.c_const
        );
        let _ = writeln!(out, "min l2 margin: {:.6e}", self.min_margin());
        for l in &self.layers {
            let _ = writeln!(
                out,
                "layer {:>3}  theta {:.6e}  error {:.6e}  bound {:.6e}  margin {:.6e}  recursion {}  off-support {}",
                l.layer,
                l.theta,
                l.max_error_l2,
                l.bound_l2,
                l.margin_l2,
                l.recursion_margin.map_or("-".to_string(), |m| format!("{m:.3e}")),
                l.support_violations
            );
        }
        out
    }

    /// Columns: `layer,theta,max_error_l2,bound_l2,margin_l2,recursion_margin,support_violations`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for l in &self.layers {
            wtr.serialize(l)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs the unit-step gated iteration for `layers` layers with the
/// dataset-relative threshold schedule and checks support inclusion, the
/// one-step l1 recursion and the l2 bound at every layer.
pub fn certify_bound(p: &PilotMatrix, data: &CertDataset, layers: usize) -> Result<CertificationReport> {
    let (m, n) = (p.rows(), p.cols());
    let coh = coherence(p, &data.gated, data.s)?;
    if data.s > coh.s_admissible || !coh.converges() {
        return Err(Error::Inadmissible {
            s: data.s,
            s_admissible: coh.s_admissible,
        });
    }
    data.check_membership(n, m)?;

    let mut mask = vec![true; n];
    for &i in &data.gated {
        mask[i] = false;
    }
    let gate = AgeGate::from_mask(mask);
    let ys: Vec<DVector<f64>> = data
        .samples
        .iter()
        .map(|x| p.matrix() * &x.truth + &x.noise)
        .collect();
    let supports: Vec<Vec<bool>> = data
        .samples
        .iter()
        .map(|x| x.truth.iter().map(|v| *v != 0.0).collect())
        .collect();

    let mut h: Vec<DVector<f64>> = vec![DVector::zeros(n); data.samples.len()];
    let mut out = Vec::with_capacity(layers + 1);
    let bound_at = |l: usize| data.s as f64 * data.bound * (-coh.c_rate * l as f64).exp() + coh.c_const * data.sigma;
    let mut recursion_margin = None;

    for l in 0..=layers {
        let theta = theta_for_layer(
            h.iter().zip(data.samples.iter().map(|x| &x.truth)),
            coh.mu2,
            coh.c_p,
            data.sigma,
        )?;
        let max_error_l2 = h
            .iter()
            .zip(&data.samples)
            .map(|(e, x)| (e - &x.truth).norm())
            .fold(0.0, f64::max);
        let support_violations = h
            .iter()
            .zip(&supports)
            .map(|(e, sup)| e.iter().zip(sup).filter(|(v, on)| !**on && **v != 0.0).count())
            .sum();
        let bound_l2 = bound_at(l);
        out.push(LayerCertificate {
            layer: l,
            theta,
            max_error_l2,
            bound_l2,
            margin_l2: bound_l2 - max_error_l2,
            recursion_margin,
            support_violations,
        });
        if l == layers {
            break;
        }

        let next: Vec<DVector<f64>> = h
            .par_iter()
            .zip(ys.par_iter())
            .map(|(hl, y)| layer_step(p.matrix(), y, hl, 1.0, &gate, theta).1)
            .collect();
        let slack = next
            .iter()
            .zip(&h)
            .zip(&data.samples)
            .zip(&supports)
            .map(|(((hn, hl), x), sup)| {
                let size = sup.iter().filter(|b| **b).count() as f64;
                let before = (hl - &x.truth).lp_norm(1);
                let after = (hn - &x.truth).lp_norm(1);
                let rhs = coh.mu1 * (size - 1.0).max(0.0) * before + theta * size + size * coh.c_p * data.sigma;
                rhs * (1.0 + THETA_ROUNDING) - after
            })
            .fold(f64::INFINITY, f64::min);
        recursion_margin = Some(slack);
        h = next;
    }

    Ok(CertificationReport {
        coherence: coh,
        samples: data.samples.len(),
        bound: data.bound,
        sigma: data.sigma,
        layers: out,
    })
}

/// Writes the text report and the per-layer CSV side by side.
pub fn write_report(report: &CertificationReport, text: &std::path::Path, csv_path: &std::path::Path) -> Result<()> {
    let mut f = std::fs::File::create(text)?;
    f.write_all(report.to_text().as_bytes())?;
    report.write_csv(std::fs::File::create(csv_path)?)?;
    Ok(())
}

/// Real Fourier rows on `n` points: the constant row, cos/sin pairs for
/// each harmonic, and the alternating row when `n` is even. Orthonormal.
fn fourier_rows(n: usize) -> Vec<Vec<f64>> {
    let nf = n as f64;
    let mut rows = Vec::with_capacity(n);
    rows.push(vec![1.0 / nf.sqrt(); n]);
    for k in 1..n.div_ceil(2) {
        let w = 2.0 * std::f64::consts::PI * k as f64 / nf;
        let a = (2.0 / nf).sqrt();
        rows.push((0..n).map(|j| a * (w * j as f64).cos()).collect());
        rows.push((0..n).map(|j| a * (w * j as f64).sin()).collect());
    }
    if n.is_multiple_of(2) {
        rows.push((0..n).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 } / nf.sqrt()).collect());
    }
    rows
}

/// Low-coherence `m x n` pilots: the complement of the `n - m` lowest
/// Fourier rows (kept in cos/sin pairs), so every column has the same norm
/// and the Gram matrix is circulant. Columns are then scaled to unit norm.
pub fn harmonic_complement(m: usize, n: usize) -> Result<PilotMatrix> {
    if m == 0 || m > n {
        return Err(Error::InvalidConfig(format!("need 0 < m <= n, got m={m}, n={n}")));
    }
    let rows = fourier_rows(n);
    let d = n - m;
    // removed rows: harmonic pairs 1..=d/2, plus the constant row when d is odd
    let mut removed = vec![false; n];
    for k in 1..=d / 2 {
        removed[2 * k - 1] = true;
        removed[2 * k] = true;
    }
    if d % 2 == 1 {
        removed[0] = true;
    }
    let kept: Vec<&Vec<f64>> = rows.iter().zip(&removed).filter(|(_, r)| !**r).map(|(row, _)| row).collect();
    if kept.len() != m {
        return Err(Error::InvalidConfig(format!("cannot split {n} Fourier rows into {m} kept rows")));
    }
    let mat = DMatrix::from_fn(m, n, |i, j| kept[i][j]);
    Ok(PilotMatrix::from_matrix(mat))
}

/// Random column permutation and sign flips; coherences are unchanged.
pub fn scramble<R: Rng + ?Sized>(p: &PilotMatrix, rng: &mut R) -> PilotMatrix {
    let n = p.cols();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let signs: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let src = p.matrix();
    PilotMatrix::from_raw(DMatrix::from_fn(p.rows(), n, |i, j| signs[j] * src[(i, order[j])]))
}

/// Gaussian pilots redrawn until `s <= s_admissible` for the gated set, at
/// most `tries` draws.
pub fn gaussian_admissible<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    gated: &[usize],
    s: usize,
    tries: usize,
    rng: &mut R,
) -> Result<PilotMatrix> {
    for _ in 0..tries {
        let p = PilotMatrix::gaussian(m, n, rng);
        let c = coherence(&p, gated, s)?;
        if s <= c.s_admissible && c.converges() {
            return Ok(p);
        }
    }
    Err(Error::InvalidConfig(format!(
        "no admissible {m}x{n} Gaussian draw for s={s} in {tries} tries"
    )))
}
