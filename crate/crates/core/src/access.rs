//! Average AoI of age-based random access and the offline search for the
//! access pair `(delta, p)`.
//!
//! The success probability `q` comes from a compressed-sensing capacity
//! argument: a slot decodes when the total number of active devices does
//! not exceed the largest sparsity `S_max` that `M` measurements support,
//! `S_t log2(1 + S / S_t) <= M`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SystemConfig;

/// Average AoI of one monitor device under age-based access with
/// threshold `delta`, access probability `p` and per-attempt success
/// probability `q`. Returns `+inf` when `p q = 0`.
pub fn avg_aoi(delta: u32, p: f64, q: f64) -> f64 {
    let pq = p * q;
    if pq <= 0.0 {
        return f64::INFINITY;
    }
    let d = delta as f64;
    d / 2.0 + 1.0 / pq - d / (2.0 * (d * pq + 1.0 - pq))
}

/// `S_t log2(1 + S / S_t)`, the number of measurements needed for an
/// `S_t`-sparse vector of length `S`.
pub fn measurements_needed(sparsity: usize, total: usize) -> f64 {
    if sparsity == 0 {
        return 0.0;
    }
    let st = sparsity as f64;
    st * (1.0 + total as f64 / st).log2()
}

/// Largest sparsity recoverable from `m` measurements of a length-`s` vector.
pub fn s_max(m: usize, s: usize) -> usize {
    // measurements_needed is increasing in the sparsity, so stop at the first violation
    let mut best = 0;
    for st in 1..=s {
        if measurements_needed(st, s) <= m as f64 {
            best = st;
        } else {
            break;
        }
    }
    best
}

/// Monitor devices that can be eligible under threshold `delta` when ages are
/// uniform on `1..=age_max`: `floor((age_max - delta) / age_max * K)`.
pub fn eligible_population(delta: u32, n_monitor: usize, age_max: u32) -> usize {
    let delta = delta.min(age_max) as usize;
    let age_max = age_max as usize;
    (age_max - delta) * n_monitor / age_max
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// `ln C(n, k)`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    debug_assert!(k <= n);
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Binomial probability mass evaluated in log space.
pub fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let lp = ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p();
    lp.exp()
}

/// `P(X <= limit)` for `X ~ Binomial(n, p)`.
pub fn binomial_cdf(n: usize, limit: usize, p: f64) -> f64 {
    if limit >= n {
        return 1.0;
    }
    let s: f64 = (0..=limit).map(|k| binomial_pmf(n, k, p)).sum();
    s.clamp(0.0, 1.0)
}

/// The quantities the success probability depends on besides `(delta, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessProblem {
    /// Monitor devices (K).
    pub n_monitor: usize,
    pub age_max: u32,
    /// Active alarm devices assumed per slot (N_t).
    pub n_alarm_active: usize,
    /// Pilot length (M).
    pub pilot_len: usize,
    /// All devices (S = N + K).
    pub total_devices: usize,
}

impl AccessProblem {
    /// Takes `N_t` as the expected number of active alarm devices, rounded.
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            n_monitor: cfg.n_monitor,
            age_max: cfg.age_max,
            n_alarm_active: (cfg.n_alarm as f64 * cfg.ad_active_prob).round() as usize,
            pilot_len: cfg.pilot_len,
            total_devices: cfg.total_devices(),
        }
    }

    pub fn success_rate(&self, delta: u32, p: f64) -> f64 {
        success_rate(
            delta,
            p,
            self.n_monitor,
            self.age_max,
            self.n_alarm_active,
            self.pilot_len,
            self.total_devices,
        )
    }

    pub fn avg_aoi(&self, delta: u32, p: f64) -> f64 {
        avg_aoi(delta, p, self.success_rate(delta, p))
    }
}

/// Probability that the number of active monitor devices fits into the
/// sparsity budget left by the alarm devices, `P(K_t <= S_max - N_t)` with
/// `K_t ~ Binomial(floor((a_max - delta) / a_max * K), p)`. The sum starts
/// at `k = 0`, so an idle slot counts as a success.
pub fn success_rate(
    delta: u32,
    p: f64,
    n_monitor: usize,
    age_max: u32,
    n_alarm_active: usize,
    pilot_len: usize,
    total_devices: usize,
) -> f64 {
    let capacity = s_max(pilot_len, total_devices);
    if n_alarm_active > capacity {
        return 0.0;
    }
    let limit = capacity - n_alarm_active;
    let population = eligible_population(delta, n_monitor, age_max);
    binomial_cdf(population, limit, p)
}

/// Search grid over `(delta, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub p_min: f64,
    pub p_max: f64,
    pub p_step: f64,
    pub delta_min: u32,
    pub delta_max: u32,
    pub delta_step: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            p_min: 0.0,
            p_max: 1.0,
            p_step: 0.01,
            delta_min: 1,
            delta_max: 100,
            delta_step: 1,
        }
    }
}

impl GridSpec {
    pub fn single(delta: u32, p: f64) -> Self {
        Self {
            p_min: p,
            p_max: p,
            p_step: 1.0,
            delta_min: delta,
            delta_max: delta,
            delta_step: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("grid: {m}")));
        if !(self.p_step > 0.0) || self.delta_step == 0 {
            return bad("steps must be positive");
        }
        if self.p_min < 0.0 || self.p_max > 1.0 || self.p_min > self.p_max {
            return bad("p range must satisfy 0 <= p_min <= p_max <= 1");
        }
        if self.delta_min < 1 || self.delta_min > self.delta_max {
            return bad("delta range must satisfy 1 <= delta_min <= delta_max");
        }
        Ok(())
    }

    /// Grid values of `p`, built from integer offsets so they do not drift.
    pub fn p_values(&self) -> Vec<f64> {
        let n = ((self.p_max - self.p_min) / self.p_step + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| {
                let v = self.p_min + i as f64 * self.p_step;
                // snap to 12 decimals: 0.01 * 7 should print and compare as 0.07
                ((v * 1e12).round() / 1e12).min(self.p_max)
            })
            .collect()
    }

    pub fn delta_values(&self) -> Vec<u32> {
        (self.delta_min..=self.delta_max)
            .step_by(self.delta_step as usize)
            .collect()
    }
}

/// One evaluated grid point / the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessParams {
    pub delta: u32,
    pub p: f64,
    pub q: f64,
    pub avg_aoi: f64,
}

/// Every grid point, ordered by `delta` then `p`.
pub fn aoi_surface(grid: &GridSpec, problem: &AccessProblem) -> Result<Vec<AccessParams>> {
    grid.validate()?;
    let ps = grid.p_values();
    let rows: Vec<Vec<AccessParams>> = grid
        .delta_values()
        .into_par_iter()
        .map(|delta| {
            ps.iter()
                .map(|&p| {
                    let q = problem.success_rate(delta, p);
                    AccessParams {
                        delta,
                        p,
                        q,
                        avg_aoi: avg_aoi(delta, p, q),
                    }
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Exhaustive grid search for the pair minimizing the average AoI. Ties go
/// to the smaller `delta`, then the smaller `p`.
pub fn optimize_access(grid: &GridSpec, problem: &AccessProblem) -> Result<AccessParams> {
    let surface = aoi_surface(grid, problem)?;
    let mut best: Option<AccessParams> = None;
    // surface is in (delta, p) order, so a strict comparison keeps the tie-break
    for point in surface {
        if !point.avg_aoi.is_finite() {
            continue;
        }
        if best.is_none_or(|b| point.avg_aoi < b.avg_aoi) {
            best = Some(point);
        }
    }
    best.ok_or(Error::NoFeasiblePoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_scale_problem(m: usize) -> AccessProblem {
        AccessProblem {
            n_monitor: 128,
            age_max: 100,
            n_alarm_active: 3,
            pilot_len: m,
            total_devices: 192,
        }
    }

    #[test]
    fn avg_aoi_limits() {
        assert_eq!(avg_aoi(1, 1.0, 1.0), 1.0);
        assert!((avg_aoi(1, 0.5, 1.0) - 2.0).abs() < 1e-12);
        assert_eq!(avg_aoi(5, 0.0, 1.0), f64::INFINITY);
        assert_eq!(avg_aoi(5, 0.3, 0.0), f64::INFINITY);
        let mut last = 0.0;
        for e in 1..12 {
            let pq = 10f64.powi(-e);
            let v = avg_aoi(10, pq, 1.0);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn s_max_covers_everything_when_m_is_large() {
        assert_eq!(s_max(192, 192), 192);
        assert_eq!(s_max(500, 192), 192);
        assert_eq!(s_max(10, 10), 10);
    }

    #[test]
    fn s_max_brute_force() {
        // independent oracle: count every S_t that satisfies the constraint
        for (m, s) in [(39usize, 192usize), (35, 192), (16, 48), (1, 2), (7, 30)] {
            let count = (1..=s)
                .filter(|&st| {
                    let st = st as f64;
                    st * (1.0 + s as f64 / st).ln() / std::f64::consts::LN_2 <= m as f64
                })
                .count();
            assert_eq!(s_max(m, s), count, "m={m} s={s}");
        }
        assert_eq!(s_max(39, 192), 8);
    }

    #[test]
    fn success_rate_edges() {
        let pr = full_scale_problem(39);
        assert_eq!(pr.success_rate(100, 0.3), 1.0);
        assert_eq!(pr.success_rate(20, 0.0), 1.0);
        let overloaded = AccessProblem {
            n_alarm_active: 50,
            ..pr
        };
        assert_eq!(overloaded.success_rate(20, 0.05), 0.0);
    }

    #[test]
    fn pmf_sums_to_one() {
        for &(n, p) in &[(128usize, 0.05), (71, 0.5), (3, 0.99), (0, 0.3)] {
            let total: f64 = (0..=n).map(|k| binomial_pmf(n, k, p)).sum();
            assert!((total - 1.0).abs() < 1e-9, "n={n} p={p} total={total}");
        }
    }

    #[test]
    fn eligible_population_truncates() {
        assert_eq!(eligible_population(29, 128, 100), 90); // 90.88
        assert_eq!(eligible_population(100, 128, 100), 0);
        assert_eq!(eligible_population(1, 128, 100), 126); // 126.72
    }

    #[test]
    fn single_point_grid() {
        let best = optimize_access(&GridSpec::single(17, 0.07), &full_scale_problem(39)).unwrap();
        assert_eq!((best.delta, best.p), (17, 0.07));
    }

    #[test]
    fn infeasible_grid() {
        let err = optimize_access(&GridSpec::single(17, 0.0), &full_scale_problem(39)).unwrap_err();
        assert!(matches!(err, Error::NoFeasiblePoint));
    }

    #[test]
    fn grid_values() {
        let g = GridSpec::default();
        let ps = g.p_values();
        assert_eq!(ps.len(), 101);
        assert_eq!(ps[5], 0.05);
        assert_eq!(ps[100], 1.0);
        assert_eq!(g.delta_values().len(), 100);
        assert!(GridSpec {
            p_step: 0.0,
            ..GridSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn table_one_pairs() {
        let expected = [
            (35, 43, 0.05),
            (37, 43, 0.05),
            (39, 29, 0.05),
            (41, 18, 0.05),
            (43, 18, 0.05),
            (45, 11, 0.05),
            (47, 11, 0.06),
            (49, 11, 0.06),
        ];
        for (m, delta, p) in expected {
            let best = optimize_access(&GridSpec::default(), &full_scale_problem(m)).unwrap();
            assert_eq!((best.delta, best.p), (delta, p), "M = {m}");
        }
    }
}
