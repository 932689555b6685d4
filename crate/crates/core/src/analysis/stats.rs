//! Two-sample tests: Mann-Whitney U and Welch's t.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// `n_a · n_b` at or below which Mann-Whitney p-values are exact.
pub const EXACT_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
    /// Welch–Satterthwaite degrees of freedom (t-test only).
    pub df: Option<f64>,
    /// Whether the p-value is exact (Mann-Whitney only).
    pub exact: Option<bool>,
}

impl StatTestResult {
    pub fn p_display(&self) -> String {
        format_p(self.p_value)
    }
}

/// p-values under 1e-12 print as `<1e-12`, small ones in scientific notation.
pub fn format_p(p: f64) -> String {
    if p < 1e-12 {
        "<1e-12".to_string()
    } else if p < 1e-3 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_samples(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    if a.len() < min || b.len() < min {
        return Err(Error::Parameter(format!(
            "samples need at least {min} values each, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("samples must be finite".into()));
    }
    Ok(())
}

/// Mann-Whitney U test. The statistic is `U_a`, the number of pairs with
/// `a > b` plus half the ties. Two-sided p-value: exact over all
/// equally likely group assignments of the pooled midranks when
/// `n_a·n_b ≤ 10⁴`, otherwise a normal approximation with tie and
/// continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    check_samples(a, b, 1)?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    // Doubled midranks are integers.
    let r2: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let s2: u64 = r2[..na].iter().sum();
    let u = s2 as f64 / 2.0 - (na * (na + 1)) as f64 / 2.0;
    let exact = na * nb <= EXACT_LIMIT;
    let p = if exact {
        exact_p(&r2, na, s2)
    } else {
        normal_p(&ranks, na, nb, u)
    };
    Ok(StatTestResult {
        test: "mann-whitney-u".into(),
        statistic: u,
        p_value: p.clamp(0.0, 1.0),
        n_a: na,
        n_b: nb,
        df: None,
        exact: Some(exact),
    })
}

/// Exact two-sided p from the distribution of the doubled rank sum of a
/// random size-`k` subset of `r2`.
fn exact_p(r2: &[u64], na: usize, s2_obs: u64) -> f64 {
    let n = r2.len();
    // Work with the smaller group; its rank sum is determined by the other's.
    let total_sum: u64 = r2.iter().sum();
    let (k, obs) = if na <= n - na {
        (na, s2_obs)
    } else {
        (n - na, total_sum - s2_obs)
    };
    let max_sum: u64 = {
        let mut sorted = r2.to_vec();
        sorted.sort_unstable_by(|x, y| y.cmp(x));
        sorted[..k].iter().sum()
    };
    let width = max_sum as usize + 1;
    // counts[j][s]: subsets of size j with doubled sum s.
    let mut counts = vec![vec![0.0f64; width]; k + 1];
    counts[0][0] = 1.0;
    for (i, &r) in r2.iter().enumerate() {
        let r = r as usize;
        for j in (1..=k.min(i + 1)).rev() {
            let (lo, hi) = counts.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                let c = prev[s - r];
                if c != 0.0 {
                    cur[s] += c;
                }
            }
        }
    }
    let dist = &counts[k];
    let total: f64 = dist.iter().sum();
    // Mean doubled rank sum of the chosen group is k·(n+1).
    let mean2 = (k * (n + 1)) as i64;
    let dev = (obs as i64 - mean2).abs();
    let tail: f64 = dist
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as i64 - mean2).abs() >= dev)
        .map(|(_, c)| c)
        .sum();
    (tail / total).min(1.0)
}

fn normal_p(ranks: &[f64], na: usize, nb: usize, u: f64) -> f64 {
    let n = (na + nb) as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nanb = (na * nb) as f64;
    let var = nanb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - nanb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    2.0 * normal.sf(z)
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    check_samples(a, b, 2)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::Parameter("both samples have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(StatTestResult {
        test: "welch-t".into(),
        statistic: t,
        p_value: p,
        n_a: a.len(),
        n_b: b.len(),
        df: Some(df),
        exact: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_pairs_give_zero_u() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        // Only the two extreme assignments of 6 are as far from the mean.
        assert!((r.p_value - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identical_multisets_sit_at_centre() {
        let a = [1.0, 2.0, 2.0, 5.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.statistic, 8.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn midranks_share_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn large_samples_match_reference_approximation() {
        // Reference: tie-corrected, continuity-corrected normal tail evaluated at 40 digits.
        let a: Vec<f64> = (0..150).map(|i| (i % 37) as f64).collect();
        let b: Vec<f64> = (0..90).map(|i| ((i * 7) % 41) as f64).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.exact, Some(false));
        assert_eq!(r.statistic, 6194.0);
        assert!(
            (r.p_value - 0.285_884_801_143_171_5).abs() < 1e-10,
            "{}",
            r.p_value
        );
    }

    #[test]
    fn welch_identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn welch_separated_means() {
        let b = [1.0, 1.1, 0.9, 1.05, 0.95];
        let a: Vec<f64> = b.iter().map(|v| v + 1000.0).collect();
        assert!(welch_t(&a, &b).unwrap().p_value < 1e-4);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(welch_t(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t(&[1.0], &[2.0, 3.0]).is_err());
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn tiny_p_formatting() {
        assert_eq!(format_p(1e-13), "<1e-12");
        assert_eq!(format_p(0.5), "0.5000");
        assert_eq!(format_p(2.5e-7), "2.500e-7");
    }
}
