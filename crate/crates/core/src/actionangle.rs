//! Action-angle coordinates `(h, θ)` around the center: the conserved level,
//! the polar angle of `(x, y) = (m₁ − ½, m₂ − ½)`, the angular speed `F`, the
//! period and the invariant angle density `μ^h = 1/(𝒯 F)`.
//!
//! The angle decreases along orbits (`θ̇ = −F` with `F > 0` in Lotka–Volterra
//! mode). Closed forms are used for linear utilities; the general case inverts
//! the Hamiltonian by root finding along rays from the center.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{self, Write};
use std::sync::RwLock;

use thiserror::Error;

use crate::elliptic::{self, EllipticError};
use crate::macroode::{hamiltonian, hamiltonian_gradient, HamiltonianKind, MacroError, MacroState};
use crate::model::{Family, LinearLv, ValidatedModel};
use crate::numerics::{integrate_periodic, newton_bisect, NumericsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionAngleError {
    #[error("({x}, {y}) is the center or outside the open square")]
    OriginOrBoundary { x: f64, y: f64 },
    #[error("level h={h} outside the open range ({lo}, {hi})")]
    RangeError { h: f64, lo: f64, hi: f64 },
    #[error("no root for level h={h} along the ray at θ={theta}")]
    RootNotBracketed { h: f64, theta: f64 },
    #[error("operation needs {0}")]
    ModeError(&'static str),
    #[error(transparent)]
    Macro(#[from] MacroError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Elliptic(#[from] EllipticError),
}

/// Level and angle; `theta ∈ [0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionAngle {
    pub h: f64,
    pub theta: f64,
}

/// Angular speed, period and invariant density at one `(h, θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularField {
    pub f: f64,
    pub period: f64,
    pub mu: f64,
}

pub fn reduce_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// `θ̇ = −F(x, y)` along the mean-field flow:
/// `F = [r₁ψ₁(½+y) y (¼−x²) − r₂ψ₂(½+x) x (¼−y²)] / (x²+y²)`.
pub fn angular_speed_at(model: &ValidatedModel, x: f64, y: f64) -> f64 {
    let (r1, r2) = (model.r(Family::One), model.r(Family::Two));
    let psi1 = model.psi(Family::One, 0.5 + y).psi;
    let psi2 = model.psi(Family::Two, 0.5 + x).psi;
    (r1 * psi1 * y * (0.25 - x * x) - r2 * psi2 * x * (0.25 - y * y)) / (x * x + y * y)
}

/// Period of the linear model at level `h`: `8K(1−16h)/(a r₁ r₂)`.
pub fn linear_period(lv: LinearLv, r1: f64, h: f64) -> Result<f64, ActionAngleError> {
    Ok(8.0 * elliptic::complete_k(1.0 - 16.0 * h)? / (lv.a * r1 * (1.0 - r1)))
}

// Periodic trapezoid target for the period and μ^h averages.
const PERIOD_REL_TOL: f64 = 1e-12;
// Ray root-finding tolerance on ρ.
const RAY_TOL: f64 = 1e-14;

/// Coordinate map for one model and one Hamiltonian convention, with a
/// period cache shared by concurrent readers.
#[derive(Debug)]
pub struct OrbitMap {
    model: ValidatedModel,
    kind: HamiltonianKind,
    fingerprint: u64,
    periods: RwLock<HashMap<(u64, i64), f64>>,
}

impl Clone for OrbitMap {
    fn clone(&self) -> Self {
        OrbitMap {
            model: self.model.clone(),
            kind: self.kind,
            fingerprint: self.fingerprint,
            periods: RwLock::new(self.periods.read().expect("cache lock").clone()),
        }
    }
}

impl OrbitMap {
    /// Requires Lotka–Volterra orientation (closed orbits around the center)
    /// and a model compatible with `kind`.
    pub fn new(model: &ValidatedModel, kind: HamiltonianKind) -> Result<Self, ActionAngleError> {
        kind.check(model)?;
        if !model.is_lotka_volterra() {
            return Err(ActionAngleError::ModeError("φ₁ strictly increasing and φ₂ strictly decreasing"));
        }
        Ok(OrbitMap {
            model: model.clone(),
            kind,
            fingerprint: model.fingerprint(),
            periods: RwLock::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &ValidatedModel {
        &self.model
    }

    pub fn kind(&self) -> HamiltonianKind {
        self.kind
    }

    /// Open range of dynamic levels.
    pub fn h_range(&self) -> (f64, f64) {
        match self.kind {
            HamiltonianKind::LinearEquivalent => (0.0, 1.0 / 16.0),
            HamiltonianKind::General => (f64::NEG_INFINITY, 0.0),
        }
    }

    fn check_level(&self, h: f64) -> Result<(), ActionAngleError> {
        let (lo, hi) = self.h_range();
        if h > lo && h < hi {
            Ok(())
        } else {
            Err(ActionAngleError::RangeError { h, lo, hi })
        }
    }

    pub fn to_action_angle(&self, x: f64, y: f64) -> Result<ActionAngle, ActionAngleError> {
        let inside = x.abs() < 0.5 && y.abs() < 0.5;
        if !inside || (x == 0.0 && y == 0.0) {
            return Err(ActionAngleError::OriginOrBoundary { x, y });
        }
        let h = hamiltonian(MacroState::from_centered(x, y), &self.model, self.kind)?;
        Ok(ActionAngle { h, theta: reduce_angle(y.atan2(x)) })
    }

    /// Point `(x, y)` on level `h` at angle `θ`.
    pub fn from_action_angle(&self, aa: ActionAngle) -> Result<(f64, f64), ActionAngleError> {
        self.check_level(aa.h)?;
        let (s, c) = aa.theta.sin_cos();
        match self.kind {
            HamiltonianKind::LinearEquivalent => {
                // conjugate form of the closed-form inverse, free of 0/0 on the axes
                let m = 1.0 - 16.0 * aa.h;
                let s2 = (2.0 * aa.theta).sin();
                let root = (1.0 - m * s2 * s2).sqrt();
                let scale = m / (2.0 * (1.0 + root));
                Ok(((scale * c * c).sqrt().copysign(c), (scale * s * s).sqrt().copysign(s)))
            }
            HamiltonianKind::General => {
                let rho = self.ray_root(aa.h, aa.theta, c, s)?;
                Ok((rho * c, rho * s))
            }
        }
    }

    /// Radius along the ray at angle θ where the general Hamiltonian equals
    /// `h`. It decreases strictly from 0 at the center to −∞ at the boundary.
    fn ray_root(&self, h: f64, theta: f64, c: f64, s: f64) -> Result<f64, ActionAngleError> {
        let rho_max = 0.5 / c.abs().max(s.abs());
        let at = |rho: f64| -> Result<(f64, f64), MacroError> {
            let state = MacroState::from_centered(rho * c, rho * s);
            let value = hamiltonian(state, &self.model, self.kind)? - h;
            let (g1, g2) = hamiltonian_gradient(state, &self.model, self.kind)?;
            Ok((value, g1 * c + g2 * s))
        };
        let mut hi = None;
        for k in 1..=15 {
            let rho = rho_max * (1.0 - 10f64.powi(-k));
            if at(rho)?.0 < 0.0 {
                hi = Some(rho);
                break;
            }
        }
        let hi = hi.ok_or(ActionAngleError::RootNotBracketed { h, theta })?;
        let mut failure = None;
        let root = newton_bisect(
            |rho| match at(rho) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, 1.0)
                }
            },
            0.0,
            hi,
            RAY_TOL,
        )
        .map_err(|_| ActionAngleError::RootNotBracketed { h, theta })?;
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(root),
        }
    }

    /// `F(h, θ) > 0`; closed form `(a r₁ r₂/2)√(1 − (1−16h) sin²2θ)` for
    /// linear utilities.
    pub fn angular_speed(&self, aa: ActionAngle) -> Result<f64, ActionAngleError> {
        self.check_level(aa.h)?;
        match (self.kind, self.model.linear_lv()) {
            (HamiltonianKind::LinearEquivalent, Some(lv)) => {
                let (r1, r2) = (self.model.r(Family::One), self.model.r(Family::Two));
                let s2 = (2.0 * aa.theta).sin();
                Ok(0.5 * lv.a * r1 * r2 * (1.0 - (1.0 - 16.0 * aa.h) * s2 * s2).sqrt())
            }
            _ => {
                let (x, y) = self.from_action_angle(aa)?;
                Ok(angular_speed_at(&self.model, x, y))
            }
        }
    }

    /// `𝒯(h) = ∫₀^{2π} dθ / F(h, θ)`, memoized.
    pub fn period(&self, h: f64) -> Result<f64, ActionAngleError> {
        self.check_level(h)?;
        let key = (self.fingerprint ^ (self.kind as u64), (h * 1e12).round() as i64);
        if let Some(p) = self.periods.read().expect("cache lock").get(&key) {
            return Ok(*p);
        }
        let mut failure = None;
        let period = integrate_periodic(
            |theta| match self.angular_speed(ActionAngle { h, theta }) {
                Ok(f) => 1.0 / f,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            },
            PERIOD_REL_TOL,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        self.periods.write().expect("cache lock").insert(key, period);
        Ok(period)
    }

    pub fn angular_field(&self, aa: ActionAngle) -> Result<AngularField, ActionAngleError> {
        let f = self.angular_speed(aa)?;
        let period = self.period(aa.h)?;
        Ok(AngularField { f, period, mu: 1.0 / (period * f) })
    }

    /// `∫ g dμ^h`, by the periodic trapezoid rule in θ. `g` receives `(θ, x, y)`.
    pub fn average<G: FnMut(f64, f64, f64) -> f64>(
        &self,
        h: f64,
        rel_tol: f64,
        mut g: G,
    ) -> Result<f64, ActionAngleError> {
        let period = self.period(h)?;
        let mut failure = None;
        let value = integrate_periodic(
            |theta| {
                let aa = ActionAngle { h, theta };
                match self.from_action_angle(aa).and_then(|(x, y)| Ok((x, y, self.angular_speed(aa)?))) {
                    Ok((x, y, f)) => g(theta, x, y) / (period * f),
                    Err(e) => {
                        failure.get_or_insert(e);
                        0.0
                    }
                }
            },
            rel_tol,
        )?;
        match failure {
            Some(e) => Err(e),
            None => Ok(value),
        }
    }

    /// Exact angle at time `t` for linear utilities:
    /// `Θ(t) = −½ am(a r₁ r₂ t + k | 1−16h)` with `k = −F(2Θ₀ | 1−16h)`.
    pub fn theta_flow(&self, aa0: ActionAngle, t: f64) -> Result<ActionAngle, ActionAngleError> {
        let lv = match (self.kind, self.model.linear_lv()) {
            (HamiltonianKind::LinearEquivalent, Some(lv)) => lv,
            _ => return Err(ActionAngleError::ModeError("linear utilities in the linear convention")),
        };
        self.check_level(aa0.h)?;
        let m = 1.0 - 16.0 * aa0.h;
        let rate = lv.a * self.model.r(Family::One) * self.model.r(Family::Two);
        let k = -elliptic::ellip_f(2.0 * aa0.theta, m)?;
        let theta = -0.5 * elliptic::jacobi_am(rate * t + k, m)?;
        Ok(ActionAngle { h: aa0.h, theta: reduce_angle(theta) })
    }

    /// CSV `theta,x,y,F,mu` at `samples` equally spaced angles on level `h`.
    pub fn write_orbit_csv<W: Write>(&self, h: f64, samples: usize, mut out: W) -> Result<(), OrbitCsvError> {
        writeln!(out, "theta,x,y,F,mu")?;
        for i in 0..samples {
            let theta = TAU * i as f64 / samples as f64;
            let aa = ActionAngle { h, theta };
            let (x, y) = self.from_action_angle(aa)?;
            let field = self.angular_field(aa)?;
            writeln!(out, "{},{},{},{},{}", theta, x, y, field.f, field.mu)?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OrbitCsvError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Orbit(#[from] ActionAngleError),
}
