//! Two-sample Kolmogorov–Smirnov and Wasserstein-1 distances.

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSampleReport {
    /// `sup_x |F_A(x) − F_B(x)|`
    pub ks: f64,
    /// `∫ |F_A − F_B| dx`
    pub wasserstein1: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub alpha: f64,
    /// Asymptotic KS critical value at level `alpha`.
    pub critical: f64,
    /// `ks > critical`
    pub reject: bool,
}

fn sorted(sample: &[f64]) -> Vec<f64> {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact KS statistic and W₁ between the empirical laws of `a` and `b`.
///
/// Both are computed in one sweep over the merged order statistics; ties are
/// consumed together so the ECDF gap is only read between distinct values.
pub fn two_sample_stats(a: &[f64], b: &[f64], alpha: f64) -> Result<TwoSampleReport, HarnessError> {
    if a.is_empty() || b.is_empty() {
        return Err(HarnessError::EmptySample);
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut ks, mut w1) = (0.0f64, 0.0);
    let mut last: Option<f64> = None;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        let gap = (i as f64 / na - j as f64 / nb).abs();
        if let Some(prev) = last {
            w1 += gap * (x - prev);
        }
        while i < sa.len() && sa[i] == x {
            i += 1;
        }
        while j < sb.len() && sb[j] == x {
            j += 1;
        }
        ks = ks.max((i as f64 / na - j as f64 / nb).abs());
        last = Some(x);
    }
    let critical = (-(alpha / 2.0).ln() / 2.0).sqrt() * ((na + nb) / (na * nb)).sqrt();
    Ok(TwoSampleReport { ks, wasserstein1: w1, n_a: sa.len(), n_b: sb.len(), alpha, critical, reject: ks > critical })
}
