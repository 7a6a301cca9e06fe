//! Agreement and rank statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("correlation undefined: {0} is constant")]
    Constant(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Cohen's kappa for two raters over the same items. When chance
/// agreement is 1 (both raters used one and the same category) kappa is 1.
pub fn cohens_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFew { need: 1, got: 0 });
    }
    let n = a.len() as f64;
    let mut ma: BTreeMap<&T, f64> = BTreeMap::new();
    let mut mb: BTreeMap<&T, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let po = agree / n;
    let pe: f64 = ma.iter().map(|(k, ca)| ca / n * mb.get(k).copied().unwrap_or(0.0) / n).sum();
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((po - pe) / (1.0 - pe))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
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

fn finite(x: &[f64], name: &'static str) -> Result<(), StatsError> {
    if x.iter().all(|v| v.is_finite()) { Ok(()) } else { Err(StatsError::NonFinite(name)) }
}

/// Spearman's rho: Pearson correlation of the average-rank vectors.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: x.len() });
    }
    finite(x, "x")?;
    finite(y, "y")?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 {
        return Err(StatsError::Constant("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::Constant("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U of sample a: its rank sum minus n_a(n_a+1)/2, with midranks.
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided.
    pub p: f64,
    pub method: PMethod,
}

/// Largest pooled size for which the p-value is computed exactly.
pub const EXACT_MAX_N: usize = 12;

/// Mann-Whitney U test. Exact p-values enumerate every split of the
/// pooled midranks when n_a + n_b <= 12, otherwise a normal approximation
/// with continuity and tie correction is used.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    finite(a, "a")?;
    finite(b, "b")?;
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let offset = (na * (na + 1)) as f64 / 2.0;
    let u_a = ranks[..na].iter().sum::<f64>() - offset;
    let u_b = (na * nb) as f64 - u_a;
    if na + nb <= EXACT_MAX_N {
        let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
        let eps = 1e-9;
        for_each_subset(na + nb, na, &mut |subset| {
            let u = subset.iter().map(|&i| ranks[i]).sum::<f64>() - offset;
            total += 1;
            if u <= u_a + eps {
                le += 1;
            }
            if u >= u_a - eps {
                ge += 1;
            }
        });
        let p = (2.0 * le.min(ge) as f64 / total as f64).min(1.0);
        return Ok(MannWhitney { u_a, u_b, p, method: PMethod::Exact });
    }
    let n = (na + nb) as f64;
    let mut counts: BTreeMap<u64, f64> = BTreeMap::new();
    for v in &pooled {
        *counts.entry(v.to_bits()).or_default() += 1.0;
    }
    let ties: f64 = counts.values().map(|t| t * t * t - t).sum();
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let mu = (na * nb) as f64 / 2.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * normal.sf(z)).min(1.0)
    };
    Ok(MannWhitney { u_a, u_b, p, method: PMethod::Normal })
}

/// Calls `f` with every k-subset of 0..n, in lexicographic order.
fn for_each_subset(n: usize, k: usize, f: &mut dyn FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] < i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Running count, sum and sum of squares; merging two is exact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl SufficientStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&self, other: &SufficientStats) -> SufficientStats {
        SufficientStats { n: self.n + other.n, sum: self.sum + other.sum, sum_sq: self.sum_sq + other.sum_sq }
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }

    /// Sample standard deviation; undefined below two values.
    pub fn sd(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let var = (self.sum_sq - self.sum * self.sum / n) / (n - 1.0);
        Some(var.max(0.0).sqrt())
    }

    /// Standard error of the mean, sd / sqrt(n).
    pub fn se(&self) -> Option<f64> {
        self.sd().map(|sd| sd / (self.n as f64).sqrt())
    }
}

impl FromIterator<f64> for SufficientStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = SufficientStats::default();
        for x in iter {
            s.push(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_hand_cases() {
        assert_eq!(cohens_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&["a", "a"], &["a", "a"]).unwrap(), 1.0);
        assert!(cohens_kappa(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn subsets_are_complete() {
        let mut seen = Vec::new();
        for_each_subset(5, 2, &mut |s| seen.push(s.to_vec()));
        assert_eq!(seen.len(), 10);
        assert_eq!(seen[0], vec![0, 1]);
        assert_eq!(seen[9], vec![3, 4]);
        let mut one = 0;
        for_each_subset(3, 3, &mut |_| one += 1);
        assert_eq!(one, 1);
    }

    #[test]
    fn mwu_hand_cases() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.u_a, 0.0);
        assert_eq!(r.u_b, 9.0);
        assert!((r.p - 0.1).abs() < 1e-12, "{}", r.p);
        let r = mann_whitney_u(&[7.0], &[7.0]).unwrap();
        assert_eq!(r.u_a, 0.5);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn se_undefined_for_singleton() {
        let s: SufficientStats = [0.25].into_iter().collect();
        assert_eq!(s.mean(), Some(0.25));
        assert_eq!(s.se(), None);
        let s: SufficientStats = [1.0, 3.0].into_iter().collect();
        assert!((s.sd().unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }
}
