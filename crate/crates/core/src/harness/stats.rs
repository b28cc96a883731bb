//! Small statistics helpers for aggregating runs.

use crate::access::binomial_pmf;

/// Arithmetic mean; `None` for an empty slice.
pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample standard deviation (n - 1 denominator); zero for a single value.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    if xs.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// One-sided sign test on paired differences `a_i - b_i` for the
/// alternative "a tends to exceed b". Ties are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "sign test needs paired samples");
    let mut wins = 0;
    let mut losses = 0;
    let mut ties = 0;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = (wins..=n).map(|k| binomial_pmf(n, k, 0.5)).sum::<f64>().min(1.0);
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_std() {
        assert_eq!(mean(&[]), None);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), Some(2.0));
        assert_eq!(sample_std(&[5.0]), Some(0.0));
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.2909944487358056).abs() < 1e-15);
    }

    #[test]
    fn sign_test_values() {
        let t = sign_test(&[2.0; 5], &[1.0; 5]);
        assert_eq!(t.wins, 5);
        assert!((t.p_value - 1.0 / 32.0).abs() < 1e-15);
        let t = sign_test(&[2.0, 2.0, 2.0, 2.0, 0.0], &[1.0; 5]);
        assert!((t.p_value - 6.0 / 32.0).abs() < 1e-15);
        let t = sign_test(&[1.0, 2.0], &[1.0, 1.0]);
        assert_eq!((t.wins, t.ties), (1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-15);
        assert_eq!(sign_test(&[], &[]).p_value, 1.0);
    }
}
