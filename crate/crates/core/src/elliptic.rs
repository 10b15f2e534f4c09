//! Legendre elliptic integrals F(φ|m), E(φ|m), the complete integrals K(m),
//! E(m) and the Jacobi amplitude am(u|m), all in the parameter convention
//! (`K(m) = F(π/2|m)`).
//!
//! Incomplete integrals use Carlson's symmetric forms R_F and R_D after
//! reducing φ to `[−π/2, π/2]`; complete integrals use the AGM.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::numerics::newton_bisect;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EllipticError {
    #[error("elliptic parameter m={0} outside [0,1)")]
    ParamOutOfRange(f64),
    #[error("non-finite argument {0}")]
    NonFinite(f64),
}

fn check(m: f64) -> Result<(), EllipticError> {
    if (0.0..1.0).contains(&m) {
        Ok(())
    } else {
        Err(EllipticError::ParamOutOfRange(m))
    }
}

const CARLSON_TOL: f64 = 1e-16;

/// Carlson's R_F(x,y,z) for nonnegative arguments, at most one zero.
pub fn carlson_rf(x: f64, y: f64, z: f64) -> f64 {
    let (x0, y0) = (x, y);
    let (mut x, mut y, mut z) = (x, y, z);
    let a0 = (x + y + z) / 3.0;
    let q = (3.0 * CARLSON_TOL).powf(-1.0 / 6.0) * (a0 - x).abs().max((a0 - y).abs()).max((a0 - z).abs());
    let mut a = a0;
    let mut scale = 1.0;
    while scale * q >= a.abs() {
        let (sx, sy, sz) = (x.sqrt(), y.sqrt(), z.sqrt());
        let lambda = sx * sy + sy * sz + sz * sx;
        x = 0.25 * (x + lambda);
        y = 0.25 * (y + lambda);
        z = 0.25 * (z + lambda);
        a = 0.25 * (a + lambda);
        scale *= 0.25;
    }
    let dx = (a0 - x0) * scale / a;
    let dy = (a0 - y0) * scale / a;
    let dz = -dx - dy;
    let e2 = dx * dy - dz * dz;
    let e3 = dx * dy * dz;
    (1.0 - e2 / 10.0 + e3 / 14.0 + e2 * e2 / 24.0 - 3.0 * e2 * e3 / 44.0) / a.sqrt()
}

/// Carlson's R_D(x,y,z); `z > 0`.
pub fn carlson_rd(x: f64, y: f64, z: f64) -> f64 {
    let (x0, y0) = (x, y);
    let (mut x, mut y, mut z) = (x, y, z);
    let a0 = (x + y + 3.0 * z) / 5.0;
    let q = (0.25 * CARLSON_TOL).powf(-1.0 / 6.0) * (a0 - x).abs().max((a0 - y).abs()).max((a0 - z).abs());
    let mut a = a0;
    let mut scale = 1.0;
    let mut tail = 0.0;
    while scale * q >= a.abs() {
        let (sx, sy, sz) = (x.sqrt(), y.sqrt(), z.sqrt());
        let lambda = sx * sy + sy * sz + sz * sx;
        tail += scale / (sz * (z + lambda));
        x = 0.25 * (x + lambda);
        y = 0.25 * (y + lambda);
        z = 0.25 * (z + lambda);
        a = 0.25 * (a + lambda);
        scale *= 0.25;
    }
    let dx = (a0 - x0) * scale / a;
    let dy = (a0 - y0) * scale / a;
    let dz = -(dx + dy) / 3.0;
    let xy = dx * dy;
    let z2 = dz * dz;
    let e2 = xy - 6.0 * z2;
    let e3 = (3.0 * xy - 8.0 * z2) * dz;
    let e4 = 3.0 * (xy - z2) * z2;
    let e5 = xy * z2 * dz;
    let series = 1.0 - 3.0 * e2 / 14.0 + e3 / 6.0 + 9.0 * e2 * e2 / 88.0 - 3.0 * e4 / 22.0 - 9.0 * e2 * e3 / 52.0
        + 3.0 * e5 / 26.0;
    scale * series / (a * a.sqrt()) + 3.0 * tail
}

/// Splits φ into `n·π + reduced` with `reduced ∈ [−π/2, π/2]`.
fn reduce_angle(phi: f64) -> (f64, f64) {
    let n = (phi / PI).round();
    (n, phi - n * PI)
}

// AGM iterates converge quadratically; below this gap one more step is exact.
const AGM_TOL: f64 = 1e-15;

/// Complete integral of the first kind K(m).
pub fn complete_k(m: f64) -> Result<f64, EllipticError> {
    check(m)?;
    let (mut a, mut b) = (1.0f64, (1.0 - m).sqrt());
    while (a - b).abs() > AGM_TOL * a {
        let next = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = next;
    }
    Ok(FRAC_PI_2 / a)
}

/// Complete integral of the second kind E(m).
pub fn complete_e(m: f64) -> Result<f64, EllipticError> {
    check(m)?;
    let (mut a, mut b) = (1.0f64, (1.0 - m).sqrt());
    let mut weight = 0.5;
    let mut sum = 0.5 * m;
    while (a - b).abs() > AGM_TOL * a {
        let c = 0.5 * (a - b);
        let next = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = next;
        weight *= 2.0;
        sum += weight * c * c;
    }
    Ok(FRAC_PI_2 / a * (1.0 - sum))
}

/// Incomplete integral of the first kind F(φ|m) for any real φ.
pub fn ellip_f(phi: f64, m: f64) -> Result<f64, EllipticError> {
    check(m)?;
    if !phi.is_finite() {
        return Err(EllipticError::NonFinite(phi));
    }
    let (n, r) = reduce_angle(phi);
    let (s, c) = r.sin_cos();
    let base = s * carlson_rf(c * c, 1.0 - m * s * s, 1.0);
    if n == 0.0 {
        Ok(base)
    } else {
        Ok(base + 2.0 * n * complete_k(m)?)
    }
}

/// Incomplete integral of the second kind E(φ|m) for any real φ.
pub fn ellip_e(phi: f64, m: f64) -> Result<f64, EllipticError> {
    check(m)?;
    if !phi.is_finite() {
        return Err(EllipticError::NonFinite(phi));
    }
    let (n, r) = reduce_angle(phi);
    let (s, c) = r.sin_cos();
    let (x, y) = (c * c, 1.0 - m * s * s);
    let base = s * carlson_rf(x, y, 1.0) - m / 3.0 * s * s * s * carlson_rd(x, y, 1.0);
    if n == 0.0 {
        Ok(base)
    } else {
        Ok(base + 2.0 * n * complete_e(m)?)
    }
}

/// Descending-Landen (AGM) evaluation of the amplitude, accurate on its own
/// except for m very close to 1.
fn am_agm(u: f64, m: f64) -> f64 {
    let mut a = vec![1.0f64];
    let mut c = vec![m.sqrt()];
    let mut b = (1.0 - m).sqrt();
    while c.last().unwrap().abs() > 1e-16 && a.len() < 64 {
        let an = *a.last().unwrap();
        c.push(0.5 * (an - b));
        let next = 0.5 * (an + b);
        b = (an * b).sqrt();
        a.push(next);
    }
    let steps = a.len() - 1;
    let mut phi = 2f64.powi(steps as i32) * a[steps] * u;
    for n in (1..=steps).rev() {
        phi = 0.5 * (phi + (c[n] / a[n] * phi.sin()).asin());
    }
    phi
}

/// Jacobi amplitude am(u|m), the inverse of `φ ↦ F(φ|m)`.
///
/// Uses `am(u + 2nK) = am(u) + nπ` to reduce u to `[−K, K]`, then polishes
/// the AGM estimate with safeguarded Newton on `F(φ|m) − u` over
/// `[−π/2, π/2]`.
pub fn jacobi_am(u: f64, m: f64) -> Result<f64, EllipticError> {
    check(m)?;
    if !u.is_finite() {
        return Err(EllipticError::NonFinite(u));
    }
    if m == 0.0 {
        return Ok(u);
    }
    let k = complete_k(m)?;
    let n = (u / (2.0 * k)).round();
    let r = u - 2.0 * n * k;
    let guess = am_agm(r, m).clamp(-FRAC_PI_2, FRAC_PI_2);
    let residual = |phi: f64| {
        let s = phi.sin();
        let f = s * carlson_rf(1.0 - s * s, 1.0 - m * s * s, 1.0);
        (f - r, 1.0 / (1.0 - m * s * s).sqrt())
    };
    // Newton from the AGM guess first; fall back to the full bracket.
    let (f0, d0) = residual(guess);
    let polished = guess - f0 / d0;
    let phi = if polished.abs() <= FRAC_PI_2 && residual(polished).0.abs() <= 4.0 * f64::EPSILON * k {
        polished
    } else {
        newton_bisect(residual, -FRAC_PI_2, FRAC_PI_2, 1e-15).unwrap_or(guess)
    };
    Ok(phi + n * PI)
}
