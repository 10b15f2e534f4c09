//! Small numerical kernels shared by the deterministic modules: adaptive
//! Gauss–Kronrod quadrature, the periodic trapezoid rule, and a safeguarded
//! Newton/bisection root finder.

use std::collections::BinaryHeap;
use std::f64::consts::TAU;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("quadrature did not reach tolerance (estimate {estimate}, error {error:e})")]
    QuadratureTolerance { estimate: f64, error: f64 },
    #[error("integrand returned a non-finite value at {at}")]
    NonFinite { at: f64 },
    #[error("root not bracketed on [{lo}, {hi}]")]
    NotBracketed { lo: f64, hi: f64 },
}

// Kronrod 15-point abscissae and weights (QUADPACK qk15); the Gauss 7-point
// rule uses the odd-indexed abscissae.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

fn kronrod15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
///
/// Stops once the summed error estimate is below `max(abs_tol, rel_tol·|I|)`.
/// The bounds may be given in either order.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64, NumericsError> {
    if a == b {
        return Ok(0.0);
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let (value, error) = kronrod15(&mut f, lo, hi);
    if !value.is_finite() {
        return Err(NumericsError::NonFinite { at: 0.5 * (lo + hi) });
    }
    let mut heap = BinaryHeap::new();
    heap.push(Segment { a: lo, b: hi, value, error });
    let mut total = value;
    let mut total_err = error;
    const MAX_SEGMENTS: usize = 4000;
    // the error estimate cannot drop much below the rounding floor of the sum
    while total_err > abs_tol.max(rel_tol * total.abs()).max(50.0 * f64::EPSILON * total.abs()) {
        if heap.len() >= MAX_SEGMENTS {
            return Err(NumericsError::QuadratureTolerance { estimate: sign * total, error: total_err });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval exhausted at machine resolution
            heap.push(worst);
            break;
        }
        let (lv, le) = kronrod15(&mut f, worst.a, mid);
        let (rv, re) = kronrod15(&mut f, mid, worst.b);
        if !(lv.is_finite() && rv.is_finite()) {
            return Err(NumericsError::NonFinite { at: mid });
        }
        total += lv + rv - worst.value;
        total_err += le + re - worst.error;
        heap.push(Segment { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Segment { a: mid, b: worst.b, value: rv, error: re });
    }
    // re-sum to shed the running-update rounding
    let total: f64 = heap.iter().map(|s| s.value).sum();
    Ok(sign * total)
}

/// Integral of a smooth `2π`-periodic function over one period by the
/// trapezoid rule, doubling the node count until successive estimates agree
/// to `rel_tol` (relative to `max(1, |I|)`). Converges geometrically for
/// analytic integrands.
pub fn integrate_periodic<F: FnMut(f64) -> f64>(mut f: F, rel_tol: f64) -> Result<f64, NumericsError> {
    let mut n: usize = 64;
    let mut sum = 0.0;
    for i in 0..n {
        let x = TAU * i as f64 / n as f64;
        let v = f(x);
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { at: x });
        }
        sum += v;
    }
    let mut estimate = TAU * sum / n as f64;
    const MAX_NODES: usize = 1 << 20;
    while n < MAX_NODES {
        let mut added = 0.0;
        for i in 0..n {
            let x = TAU * (2 * i + 1) as f64 / (2 * n) as f64;
            let v = f(x);
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { at: x });
            }
            added += v;
        }
        sum += added;
        n *= 2;
        let next = TAU * sum / n as f64;
        let done = (next - estimate).abs() <= rel_tol * next.abs().max(1e-300);
        estimate = next;
        if done {
            return Ok(estimate);
        }
    }
    Err(NumericsError::QuadratureTolerance { estimate, error: f64::NAN })
}

/// Safeguarded Newton iteration for a root of `f` on a sign-changing bracket.
/// `f_df` returns the value and derivative; a Newton step leaving the current
/// bracket is replaced by bisection.
pub fn newton_bisect<F: FnMut(f64) -> (f64, f64)>(
    mut f_df: F,
    mut lo: f64,
    mut hi: f64,
    x_tol: f64,
) -> Result<f64, NumericsError> {
    let (flo, _) = f_df(lo);
    let (fhi, _) = f_df(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(NumericsError::NotBracketed { lo, hi });
    }
    let lo_negative = flo < 0.0;
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (fx, dfx) = f_df(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if (fx < 0.0) == lo_negative {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx != 0.0 && newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= x_tol * (1.0 + x.abs()) || hi - lo <= x_tol {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn kronrod_handles_polynomials_and_logs() {
        let v = integrate(|x| x.powi(5) - 2.0 * x, 0.0, 2.0, 1e-14, 0.0).unwrap();
        assert_abs_diff_eq!(v, 64.0 / 6.0 - 4.0, epsilon = 1e-12);
        // near-singular endpoint; the oracle uses the rounded endpoint itself
        let b = 1.0 - 1e-9;
        let v = integrate(|x| 1.0 / (1.0 - x), 0.0, b, 1e-11, 0.0).unwrap();
        // 1 - x loses ~7 digits within 1e-9 of the endpoint
        assert_abs_diff_eq!(v, -(1.0 - b).ln(), epsilon = 1e-8);
        let v = integrate(|x| x.sin(), PI, 0.0, 1e-14, 0.0).unwrap();
        assert_abs_diff_eq!(v, -2.0, epsilon = 1e-13);
    }

    #[test]
    fn periodic_trapezoid_is_spectral() {
        // ∫ dθ / (2 + cos θ) = 2π/√3
        let v = integrate_periodic(|t| 1.0 / (2.0 + t.cos()), 1e-14).unwrap();
        assert_abs_diff_eq!(v, TAU / 3f64.sqrt(), epsilon = 1e-13);
    }

    #[test]
    fn newton_bisect_finds_roots_and_rejects_bad_brackets() {
        let r = newton_bisect(|x| (x * x - 2.0, 2.0 * x), 0.0, 2.0, 1e-15).unwrap();
        assert_abs_diff_eq!(r, 2f64.sqrt(), epsilon = 1e-14);
        assert!(newton_bisect(|x| (x * x + 1.0, 2.0 * x), -1.0, 1.0, 1e-12).is_err());
    }
}
