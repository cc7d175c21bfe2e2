use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest effective sample size evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_NONZERO: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

impl WilcoxonMethod {
    pub fn name(self) -> &'static str {
        match self {
            WilcoxonMethod::Exact => "exact",
            WilcoxonMethod::NormalApproximation => "normal-approximation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`, possibly a half-integer when ranks are tied.
    pub statistic: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Ranks of `abs` (1-based, ties get the average), doubled so they stay
/// integral.
pub fn doubled_midranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && abs[order[end + 1]] == abs[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end+1, doubled mean = (start + 1) + (end + 1)
        let r = (start + end + 2) as u64;
        for &i in &order[start..=end] {
            ranks[i] = r;
        }
        start = end + 1;
    }
    ranks
}

/// Two-sided signed-rank test on the paired differences `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite paired difference".into()));
    }
    let n = d.len();
    if n < MIN_NONZERO {
        return Err(Error::InsufficientData(format!(
            "{n} non-zero differences, at least {MIN_NONZERO} required"
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_midranks(&abs);
    let total: u64 = ranks.iter().sum();
    let plus: u64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w2 = plus.min(total - plus);
    let statistic = w2 as f64 / 2.0;

    if n <= EXACT_MAX_N {
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|&(s, _)| (s as u64) <= w2 || (s as u64) >= total - w2)
            .map(|(_, &c)| c)
            .sum();
        return Ok(WilcoxonResult {
            statistic,
            n_effective: n,
            p_value: extreme as f64 / (1u64 << n) as f64,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("valid parameters");
    Ok(WilcoxonResult {
        statistic,
        n_effective: n,
        p_value: (2.0 * std_normal.cdf(-z)).min(1.0),
        method: WilcoxonMethod::NormalApproximation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_are_insufficient() {
        let a = [0.3, 0.5, 0.1, 0.9, 0.2, 0.4];
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn six_positive_differences() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [0.0; 6];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 2.0 / 64.0);
        assert_eq!(r.method, WilcoxonMethod::Exact);
    }

    #[test]
    fn midranks_for_ties() {
        assert_eq!(doubled_midranks(&[3.0, 1.0, 3.0, 2.0]), vec![7, 2, 7, 4]);
    }

    #[test]
    fn large_samples_use_the_normal_approximation() {
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.11).cos() * 0.5).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, WilcoxonMethod::NormalApproximation);
        assert!((0.0..=1.0).contains(&r.p_value));
        let shifted: Vec<f64> = a.iter().map(|v| v + 3.0).collect();
        let strong = wilcoxon_signed_rank(&shifted, &a).unwrap();
        assert!(strong.p_value < 1e-6);
    }
}
