//! The averaged diffusion for the conserved quantity on the slow time scale.
//!
//! [`gn0_coeffs`] evaluates the second-order expansion of the count-chain
//! generator in `(h, θ)` coordinates, term by term in the general Hamiltonian
//! convention. [`averaged_coeffs`] averages them against the invariant angle
//! density. [`SdeCoefficients`] holds a drift and squared diffusion ready for
//! [`euler_maruyama`].
//!
//! That expansion omits the ½ of the second-order Taylor term, so it is twice
//! the true generator `½(ā^H f′ + ā^HH f″)`. The SDE with the same generator
//! as the particle system therefore has drift `ā^H/2` and squared diffusion
//! `ā^HH` ([`CoefficientScaling::GeneratorConsistent`]). The customary linear
//! closed form for `ā^HH` is in turn 8 times the average of the expansion.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::actionangle::{ActionAngleError, OrbitMap};
use crate::elliptic::{self, EllipticError};
use crate::macroode::{linear_beta, HamiltonianKind, MacroError};
use crate::model::{Family, ValidatedModel};
use crate::numerics::{integrate, NumericsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    #[error("({x}, {y}) is the center or outside the open square")]
    BoundaryPoint { x: f64, y: f64 },
    #[error("level h={h} outside the open range ({lo}, {hi})")]
    RangeError { h: f64, lo: f64, hi: f64 },
    #[error("closed-form coefficients need linear utilities in the linear convention")]
    NotLinear,
    #[error("β = {0} is not positive; the averaged diffusion would be negative")]
    NonPositiveBeta(f64),
    #[error("squared diffusion {value:e} at h={h} is below the clamping threshold")]
    NegativeDiffusion { h: f64, value: f64 },
    #[error("table needs at least two strictly increasing abscissae")]
    BadTable,
    #[error("invalid integration settings: {0}")]
    BadSettings(&'static str),
    #[error(transparent)]
    Orbit(#[from] ActionAngleError),
    #[error(transparent)]
    Elliptic(#[from] EllipticError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Macro(#[from] MacroError),
}

/// Coefficients of the expanded generator at one point `(x, y)`, in the
/// general Hamiltonian convention. All except `order1_theta` carry a `1/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorCoefficients {
    /// coefficient of `f_h`
    pub a_h: f64,
    /// coefficient of `f_hh`
    pub a_hh: f64,
    /// coefficient of `f_hθ`
    pub a_htheta: f64,
    /// `1/N` part of the `f_θ` coefficient
    pub g: f64,
    /// order-one part of the `f_θ` coefficient, `−F`
    pub order1_theta: f64,
    /// coefficient of `f_θθ`
    pub a_thetatheta: f64,
}

pub fn gn0_coeffs(x: f64, y: f64, model: &ValidatedModel) -> Result<GeneratorCoefficients, SdeError> {
    if !(x.abs() < 0.5 && y.abs() < 0.5) || (x == 0.0 && y == 0.0) {
        return Err(SdeError::BoundaryPoint { x, y });
    }
    let (r1, r2) = (model.r(Family::One), model.r(Family::Two));
    let p1 = model.psi(Family::One, 0.5 + y);
    let p2 = model.psi(Family::Two, 0.5 + x);
    let (qx, qy) = (0.25 - x * x, 0.25 - y * y);
    let rr = x * x + y * y;
    let a_h = p1.plus / r1 * (p2.prime + p2.psi * 2.0 * x / qx) - p2.plus / r2 * (p1.prime + p1.psi * 2.0 * y / qy);
    let a_hh = p2.psi * p2.psi * p1.plus / (r1 * r1 * qx) + p1.psi * p1.psi * p2.plus / (r2 * r2 * qy);
    let a_htheta = -(p2.psi * p1.plus * 2.0 * y / (r1 * rr) + p1.psi * p2.plus * 2.0 * x / (r2 * rr));
    let g = 2.0 * x * y * (qx * p1.plus - qy * p2.plus) / (rr * rr);
    let order1_theta = -(r1 * p1.psi * y * qx - r2 * p2.psi * x * qy) / rr;
    let a_thetatheta = (qx * p1.plus * y * y + qy * p2.plus * x * x) / (rr * rr);
    Ok(GeneratorCoefficients { a_h, a_hh, a_htheta, g, order1_theta, a_thetatheta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingMode {
    /// Printed linear-case formulas `−βh` and `βh[E(1−16h)/K(1−16h) − 16h]`.
    LinearClosedForm,
    /// μ^h-average of [`gn0_coeffs`] by quadrature over the orbit.
    GeneralQuadrature,
}

/// Relative tolerance of the orbit averages.
pub const AVERAGE_REL_TOL: f64 = 1e-11;

/// `(ā^H(h), ā^HH(h))` as printed, in the convention `kind`.
///
/// Quadrature always runs in the general convention (where the expansion is
/// defined); for the linear convention the level is mapped through
/// `h_g = a ln(16 h)` and the result is transformed back with Itô's rule for
/// `h = e^{h_g/a}/16`.
pub fn averaged_coeffs(
    h: f64,
    model: &ValidatedModel,
    kind: HamiltonianKind,
    mode: AveragingMode,
) -> Result<(f64, f64), SdeError> {
    let lv = model.linear_lv();
    match mode {
        AveragingMode::LinearClosedForm => {
            let lv = match (kind, lv) {
                (HamiltonianKind::LinearEquivalent, Some(lv)) => lv,
                _ => return Err(SdeError::NotLinear),
            };
            check_linear_level(h)?;
            let beta = linear_beta(lv, model.r(Family::One));
            Ok((-beta * h, beta * h * elliptic_gap(h)?))
        }
        AveragingMode::GeneralQuadrature => {
            let map = OrbitMap::new(model, HamiltonianKind::General)?;
            let general_level = match kind {
                HamiltonianKind::General => h,
                HamiltonianKind::LinearEquivalent => {
                    check_linear_level(h)?;
                    let lv = lv.ok_or(SdeError::NotLinear)?;
                    lv.a * (16.0 * h).ln()
                }
            };
            let mut failure = None;
            let mut coeff = |x: f64, y: f64| match gn0_coeffs(x, y, model) {
                Ok(c) => c,
                Err(e) => {
                    failure.get_or_insert(e);
                    GeneratorCoefficients { a_h: 0.0, a_hh: 0.0, a_htheta: 0.0, g: 0.0, order1_theta: 0.0, a_thetatheta: 0.0 }
                }
            };
            let drift = map.average(general_level, AVERAGE_REL_TOL, |_, x, y| coeff(x, y).a_h)?;
            let diffusion = map.average(general_level, AVERAGE_REL_TOL, |_, x, y| coeff(x, y).a_hh)?;
            if let Some(e) = failure {
                return Err(e);
            }
            match kind {
                HamiltonianKind::General => Ok((drift, diffusion)),
                HamiltonianKind::LinearEquivalent => {
                    let a = lv.expect("checked above").a;
                    let (d1, d2) = (h / a, h / (a * a));
                    Ok((drift * d1 + diffusion * d2, diffusion * d1 * d1))
                }
            }
        }
    }
}

fn check_linear_level(h: f64) -> Result<(), SdeError> {
    if h > 0.0 && h < 1.0 / 16.0 {
        Ok(())
    } else {
        Err(SdeError::RangeError { h, lo: 0.0, hi: 1.0 / 16.0 })
    }
}

/// `E(1−16h)/K(1−16h) − 16h`.
pub fn elliptic_gap(h: f64) -> Result<f64, SdeError> {
    let m = 1.0 - 16.0 * h;
    Ok(elliptic::complete_e(m)? / elliptic::complete_k(m)? - 16.0 * h)
}

/// How the averages are turned into SDE coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientScaling {
    /// Drift `ā^H`, squared diffusion `ā^HH`, with the printed linear closed
    /// forms.
    PrintedClosedForm,
    /// Drift `ā^H`, squared diffusion `ā^HH`, as μ^h-averages of the printed
    /// expansion (the printed closed-form diffusion divided by 8).
    PrintedExpansion,
    /// Drift and squared diffusion of the generator actually produced by the
    /// particle system on the time scale `N t`.
    GeneratorConsistent,
}

impl fmt::Display for CoefficientScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoefficientScaling::PrintedClosedForm => "printed-closed-form",
            CoefficientScaling::PrintedExpansion => "printed-expansion",
            CoefficientScaling::GeneratorConsistent => "generator-consistent",
        })
    }
}

type CoeffFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Drift and squared diffusion on an open `h`-interval.
#[derive(Clone)]
pub struct SdeCoefficients {
    interval: (f64, f64),
    drift: CoeffFn,
    diffusion_sq: CoeffFn,
    label: String,
}

impl fmt::Debug for SdeCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeCoefficients").field("interval", &self.interval).field("label", &self.label).finish()
    }
}

impl SdeCoefficients {
    pub fn custom(
        interval: (f64, f64),
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion_sq: impl Fn(f64) -> f64 + Send + Sync + 'static,
        label: impl Into<String>,
    ) -> Self {
        SdeCoefficients { interval, drift: Arc::new(drift), diffusion_sq: Arc::new(diffusion_sq), label: label.into() }
    }

    /// Linear-case coefficients on `(0, 1/16)`. Refuses `β ≤ 0`.
    pub fn linear(model: &ValidatedModel, scaling: CoefficientScaling) -> Result<Self, SdeError> {
        let lv = model.linear_lv().ok_or(SdeError::NotLinear)?;
        let beta = linear_beta(lv, model.r(Family::One));
        if !(beta > 0.0) {
            return Err(SdeError::NonPositiveBeta(beta));
        }
        let (drift_scale, diffusion_scale) = match scaling {
            CoefficientScaling::PrintedClosedForm => (1.0, 1.0),
            CoefficientScaling::PrintedExpansion => (1.0, 0.125),
            CoefficientScaling::GeneratorConsistent => (0.5, 0.125),
        };
        Ok(SdeCoefficients::custom(
            (0.0, 1.0 / 16.0),
            move |h| -drift_scale * beta * h,
            move |h| diffusion_scale * beta * h * elliptic_gap(h).unwrap_or(f64::NAN),
            format!("linear beta={beta} {scaling}"),
        ))
    }

    /// Piecewise-linear interpolation of tabulated `(h, ā^H, ā^HH)`; the
    /// interval is the table span.
    pub fn from_table(table: Vec<(f64, f64, f64)>, label: impl Into<String>) -> Result<Self, SdeError> {
        if table.len() < 2 || table.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(SdeError::BadTable);
        }
        let table = Arc::new(table);
        let lookup = |table: Arc<Vec<(f64, f64, f64)>>, pick: fn(&(f64, f64, f64)) -> f64| {
            move |h: f64| {
                let i = table.partition_point(|row| row.0 <= h).clamp(1, table.len() - 1);
                let (a, b) = (&table[i - 1], &table[i]);
                let s = (h - a.0) / (b.0 - a.0);
                pick(a) + s * (pick(b) - pick(a))
            }
        };
        let interval = (table[0].0, table[table.len() - 1].0);
        Ok(SdeCoefficients::custom(
            interval,
            lookup(table.clone(), |r| r.1),
            lookup(table, |r| r.2),
            label,
        ))
    }

    /// Tabulates [`averaged_coeffs`] by quadrature on `grid` and applies
    /// `scaling`. There is no closed form outside the linear case, so
    /// [`CoefficientScaling::PrintedClosedForm`] is refused.
    pub fn general_table(
        model: &ValidatedModel,
        kind: HamiltonianKind,
        grid: &[f64],
        scaling: CoefficientScaling,
    ) -> Result<Self, SdeError> {
        let (ds, vs) = match scaling {
            CoefficientScaling::PrintedClosedForm => return Err(SdeError::NotLinear),
            CoefficientScaling::PrintedExpansion => (1.0, 1.0),
            CoefficientScaling::GeneratorConsistent => (0.5, 1.0),
        };
        let rows = grid
            .iter()
            .map(|&h| averaged_coeffs(h, model, kind, AveragingMode::GeneralQuadrature).map(|(d, v)| (h, ds * d, vs * v)))
            .collect::<Result<Vec<_>, _>>()?;
        SdeCoefficients::from_table(rows, format!("quadrature table {scaling}"))
    }

    /// Same coefficients with the drift sign flipped.
    pub fn with_negated_drift(&self) -> Self {
        let drift = self.drift.clone();
        SdeCoefficients {
            interval: self.interval,
            drift: Arc::new(move |h| -drift(h)),
            diffusion_sq: self.diffusion_sq.clone(),
            label: format!("{} (drift negated)", self.label),
        }
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn drift(&self, h: f64) -> f64 {
        (self.drift)(h)
    }

    pub fn diffusion_sq(&self, h: f64) -> f64 {
        (self.diffusion_sq)(h)
    }

    fn check_inside(&self, z: f64) -> Result<(), SdeError> {
        let (lo, hi) = self.interval;
        if z > lo && z < hi {
            Ok(())
        } else {
            Err(SdeError::RangeError { h: z, lo, hi })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitSide {
    Left,
    Right,
}

impl fmt::Display for ExitSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExitSide::Left => "left",
            ExitSide::Right => "right",
        })
    }
}

/// Settings for [`euler_maruyama`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmSettings {
    /// Stopping interval `(l, r)`.
    pub interval: (f64, f64),
    pub horizon: f64,
    pub dt: f64,
    /// Keep every `record_stride`-th node of the path; 0 keeps only the end.
    pub record_stride: usize,
}

/// Squared-diffusion values in `[−CLAMP_THRESHOLD, 0)` are set to 0 and
/// counted; lower values are reported as an error.
pub const CLAMP_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SdePath {
    /// Recorded `(t, h)` nodes; always contains the start and the end.
    pub points: Vec<(f64, f64)>,
    /// Value at the end, clamped to the boundary on exit.
    pub end: f64,
    pub exit: Option<(f64, ExitSide)>,
    pub clamped: u64,
}

impl SdePath {
    /// Value at time `t`, stopped at exit. Exact only at recorded nodes and
    /// after exit.
    pub fn stopped_value_at(&self, t: f64) -> f64 {
        if let Some((te, _)) = self.exit {
            if t >= te {
                return self.end;
            }
        }
        let i = self.points.partition_point(|p| p.0 <= t);
        self.points[i.saturating_sub(1)].1
    }

    /// CSV `t,h`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,h")?;
        for (t, h) in &self.points {
            writeln!(out, "{t},{h}")?;
        }
        Ok(())
    }
}

/// Euler–Maruyama for `dH = b(H) dt + √(σ²(H)) dB`, stopped at the first exit
/// from `(l, r)` or at the horizon.
pub fn euler_maruyama<R: Rng>(
    h0: f64,
    coeffs: &SdeCoefficients,
    settings: EmSettings,
    rng: &mut R,
) -> Result<SdePath, SdeError> {
    let EmSettings { interval: (lo, hi), horizon, dt, record_stride } = settings;
    if !(dt > 0.0 && horizon >= 0.0 && lo < hi) {
        return Err(SdeError::BadSettings("need dt > 0, horizon ≥ 0 and l < r"));
    }
    if !(h0 > lo && h0 < hi) {
        return Err(SdeError::RangeError { h: h0, lo, hi });
    }
    let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let dt = if steps == 0 { dt } else { horizon / steps as f64 };
    let sqrt_dt = dt.sqrt();
    let mut h = h0;
    let mut points = vec![(0.0, h0)];
    let mut clamped = 0u64;
    let mut exit = None;
    for i in 1..=steps {
        let mut var = coeffs.diffusion_sq(h);
        if var < 0.0 {
            if var < -CLAMP_THRESHOLD || var.is_nan() {
                return Err(SdeError::NegativeDiffusion { h, value: var });
            }
            var = 0.0;
            clamped += 1;
        } else if var.is_nan() {
            return Err(SdeError::NegativeDiffusion { h, value: var });
        }
        let z: f64 = StandardNormal.sample(rng);
        h += coeffs.drift(h) * dt + var.sqrt() * sqrt_dt * z;
        let t = i as f64 * dt;
        if h <= lo || h >= hi {
            let side = if h <= lo { ExitSide::Left } else { ExitSide::Right };
            h = if h <= lo { lo } else { hi };
            exit = Some((t, side));
            points.push((t, h));
            break;
        }
        if i == steps || (record_stride > 0 && i % record_stride == 0) {
            points.push((t, h));
        }
    }
    Ok(SdePath { points, end: h, exit, clamped })
}

/// Relative tolerance of the nested scale/speed quadratures.
pub const SCALE_REL_TOL: f64 = 1e-8;

fn log_density(z: f64, coeffs: &SdeCoefficients, c: f64) -> Result<f64, SdeError> {
    Ok(integrate(|h| -2.0 * coeffs.drift(h) / coeffs.diffusion_sq(h), c, z, 1e-14, SCALE_REL_TOL * 1e-2)?)
}

fn nested<F: FnMut(f64) -> Result<f64, SdeError>>(mut f: F, a: f64, b: f64) -> Result<f64, SdeError> {
    let mut failure = None;
    let value = integrate(
        |u| match f(u) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        a,
        b,
        0.0,
        SCALE_REL_TOL,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(value),
    }
}

/// Scale function `p(z) = ∫_c^z exp{−2∫_c^u b/σ²} du`.
pub fn scale_function_p(z: f64, coeffs: &SdeCoefficients, c: f64) -> Result<f64, SdeError> {
    coeffs.check_inside(z)?;
    coeffs.check_inside(c)?;
    nested(|u| Ok(log_density(u, coeffs, c)?.exp()), c, z)
}

/// `v(z) = ∫_c^z s(y) ∫_c^y 2/(s(w) σ²(w)) dw dy` with `s = p′`.
pub fn speed_v(z: f64, coeffs: &SdeCoefficients, c: f64) -> Result<f64, SdeError> {
    coeffs.check_inside(z)?;
    coeffs.check_inside(c)?;
    nested(
        |y| {
            let inner = nested(|w| Ok(2.0 / (log_density(w, coeffs, c)?.exp() * coeffs.diffusion_sq(w))), c, y)?;
            Ok(log_density(y, coeffs, c)?.exp() * inner)
        },
        c,
        z,
    )
}
