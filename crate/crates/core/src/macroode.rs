//! Mean-field ODE for the two opinion fractions, its fixed points, and the
//! conserved Hamiltonian in two conventions.

use thiserror::Error;

use crate::model::{Family, LinearLv, ValidatedModel};
use crate::numerics::{integrate as quad, NumericsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MacroError {
    #[error("state ({m1}, {m2}) is not in the open unit square")]
    BoundaryState { m1: f64, m2: f64 },
    #[error("hamiltonian convention incompatible with the model: {0}")]
    IncompatibleKind(&'static str),
    #[error("utilities are not strictly monotone")]
    NonMonotone,
    #[error("path left [0,1]^2 by more than 1e-9 at t={t}: ({m1}, {m2})")]
    BoundaryPenetration { t: f64, m1: f64, m2: f64 },
    #[error("conserved quantity drifted by {drift:e} at t={t}; reduce the step")]
    StepTooLarge { t: f64, drift: f64 },
    #[error("invalid step or horizon (dt={dt}, T={horizon})")]
    BadStep { dt: f64, horizon: f64 },
    #[error("time {t} outside the solved interval [0, {end}]")]
    HorizonExceeded { t: f64, end: f64 },
    #[error(transparent)]
    Quadrature(#[from] NumericsError),
}

/// Mean-field fractions `(m₁, m₂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroState {
    pub m1: f64,
    pub m2: f64,
}

impl MacroState {
    pub fn new(m1: f64, m2: f64) -> Self {
        MacroState { m1, m2 }
    }

    /// From centered coordinates `x = m₁ − ½`, `y = m₂ − ½`.
    pub fn from_centered(x: f64, y: f64) -> Self {
        MacroState { m1: 0.5 + x, m2: 0.5 + y }
    }

    pub fn x(&self) -> f64 {
        self.m1 - 0.5
    }

    pub fn y(&self) -> f64 {
        self.m2 - 0.5
    }

    pub fn is_interior(&self) -> bool {
        self.m1 > 0.0 && self.m1 < 1.0 && self.m2 > 0.0 && self.m2 < 1.0
    }

    pub fn get(&self, family: Family) -> f64 {
        match family {
            Family::One => self.m1,
            Family::Two => self.m2,
        }
    }
}

/// `(ṁ₁, ṁ₂) = (r₁ m₁(1−m₁) ψ₁(m₂), r₂ m₂(1−m₂) ψ₂(m₁))`.
pub fn rhs(state: MacroState, model: &ValidatedModel) -> (f64, f64) {
    let MacroState { m1, m2 } = state;
    (
        model.r(Family::One) * m1 * (1.0 - m1) * model.psi(Family::One, m2).psi,
        model.r(Family::Two) * m2 * (1.0 - m2) * model.psi(Family::Two, m1).psi,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HamiltonianKind {
    /// `∫_{½}^{m₁} ψ₂/(r₁ z(1−z)) − ∫_{½}^{m₂} ψ₁/(r₂ w(1−w))`, zero at the
    /// center. Requires strictly monotone utilities.
    General,
    /// `(¼−x²)(¼−y²)`, in `(0, 1/16]`. Requires linear Lotka–Volterra utilities.
    LinearEquivalent,
}

impl HamiltonianKind {
    pub fn check(self, model: &ValidatedModel) -> Result<(), MacroError> {
        match self {
            HamiltonianKind::General if !model.is_monotone() => {
                Err(MacroError::IncompatibleKind("general convention needs strictly monotone utilities"))
            }
            HamiltonianKind::LinearEquivalent if model.linear_lv().is_none() => {
                Err(MacroError::IncompatibleKind("linear convention needs φ₁=az+b₁, φ₂=−az+b₂ with a>0"))
            }
            _ => Ok(()),
        }
    }

    /// Value at the center `(½, ½)`.
    pub fn center_value(self) -> f64 {
        match self {
            HamiltonianKind::General => 0.0,
            HamiltonianKind::LinearEquivalent => 1.0 / 16.0,
        }
    }
}

const HAMILTONIAN_ABS_TOL: f64 = 1e-12;

/// Conserved quantity at an interior state.
pub fn hamiltonian(state: MacroState, model: &ValidatedModel, kind: HamiltonianKind) -> Result<f64, MacroError> {
    kind.check(model)?;
    if !state.is_interior() {
        return Err(MacroError::BoundaryState { m1: state.m1, m2: state.m2 });
    }
    match kind {
        HamiltonianKind::LinearEquivalent => {
            let (x, y) = (state.x(), state.y());
            Ok((0.25 - x * x) * (0.25 - y * y))
        }
        HamiltonianKind::General => {
            let (r1, r2) = (model.r(Family::One), model.r(Family::Two));
            let first = quad(
                |z| model.psi(Family::Two, z).psi / (r1 * z * (1.0 - z)),
                0.5,
                state.m1,
                HAMILTONIAN_ABS_TOL,
                0.0,
            )?;
            let second = quad(
                |w| model.psi(Family::One, w).psi / (r2 * w * (1.0 - w)),
                0.5,
                state.m2,
                HAMILTONIAN_ABS_TOL,
                0.0,
            )?;
            Ok(first - second)
        }
    }
}

/// Gradient `(∂h/∂m₁, ∂h/∂m₂)` of [`hamiltonian`].
pub fn hamiltonian_gradient(
    state: MacroState,
    model: &ValidatedModel,
    kind: HamiltonianKind,
) -> Result<(f64, f64), MacroError> {
    kind.check(model)?;
    if !state.is_interior() {
        return Err(MacroError::BoundaryState { m1: state.m1, m2: state.m2 });
    }
    let (x, y) = (state.x(), state.y());
    Ok(match kind {
        HamiltonianKind::LinearEquivalent => (-2.0 * x * (0.25 - y * y), -2.0 * y * (0.25 - x * x)),
        HamiltonianKind::General => (
            model.psi(Family::Two, state.m1).psi / (model.r(Family::One) * (0.25 - x * x)),
            -model.psi(Family::One, state.m2).psi / (model.r(Family::Two) * (0.25 - y * y)),
        ),
    })
}

/// Dense RK4 solution with cubic Hermite interpolation between nodes.
#[derive(Debug, Clone)]
pub struct OdePath {
    dt: f64,
    states: Vec<MacroState>,
    slopes: Vec<(f64, f64)>,
}

impl OdePath {
    pub fn step(&self) -> f64 {
        self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.dt * (self.states.len() - 1) as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = (f64, MacroState)> + '_ {
        self.states.iter().enumerate().map(move |(i, s)| (i as f64 * self.dt, *s))
    }

    pub fn last(&self) -> MacroState {
        *self.states.last().expect("path has at least one node")
    }

    /// State at time `t ∈ [0, t_end]`.
    pub fn at(&self, t: f64) -> Result<MacroState, MacroError> {
        let end = self.t_end();
        if !(t >= 0.0 && t <= end * (1.0 + 1e-12)) {
            return Err(MacroError::HorizonExceeded { t, end });
        }
        if self.states.len() == 1 {
            return Ok(self.states[0]);
        }
        let i = ((t / self.dt) as usize).min(self.states.len() - 2);
        let s = (t - i as f64 * self.dt) / self.dt;
        let (p0, p1) = (self.states[i], self.states[i + 1]);
        let (d0, d1) = (self.slopes[i], self.slopes[i + 1]);
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        let blend = |a: f64, b: f64, da: f64, db: f64| h00 * a + h10 * self.dt * da + h01 * b + h11 * self.dt * db;
        Ok(MacroState {
            m1: blend(p0.m1, p1.m1, d0.0, d1.0),
            m2: blend(p0.m2, p1.m2, d0.1, d1.1),
        })
    }
}

/// Allowed drift of the conserved quantity before [`integrate`] reports
/// [`MacroError::StepTooLarge`], relative to `max(1, |h₀|)`.
pub const DRIFT_TOLERANCE: f64 = 1e-6;
const BOUNDARY_SLACK: f64 = 1e-9;
// General-convention checks need quadrature, so they run every this many steps.
const GENERAL_CHECK_EVERY: usize = 500;

fn rk4_step(state: MacroState, model: &ValidatedModel, dt: f64, k1: (f64, f64)) -> MacroState {
    let shift = |s: MacroState, d: (f64, f64), c: f64| MacroState { m1: s.m1 + c * d.0, m2: s.m2 + c * d.1 };
    let k2 = rhs(shift(state, k1, 0.5 * dt), model);
    let k3 = rhs(shift(state, k2, 0.5 * dt), model);
    let k4 = rhs(shift(state, k3, dt), model);
    MacroState {
        m1: state.m1 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        m2: state.m2 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    }
}

/// Classical fixed-step RK4 on `[0, horizon]`.
///
/// The step is shrunk to `horizon / ceil(horizon/dt)` so the last node lands
/// on the horizon. For interior starts around a center the conserved quantity
/// is monitored (closed form for linear utilities, quadrature otherwise).
pub fn integrate(state0: MacroState, model: &ValidatedModel, horizon: f64, dt: f64) -> Result<OdePath, MacroError> {
    if !(dt > 0.0 && horizon >= 0.0 && dt.is_finite() && horizon.is_finite()) {
        return Err(MacroError::BadStep { dt, horizon });
    }
    let steps = (horizon / dt - 1e-9).ceil().max(0.0) as usize;
    let dt = if steps == 0 { dt } else { horizon / steps as f64 };
    // Only orbits around a center stay away from the boundary, where the
    // general convention diverges logarithmically.
    let monitor = if !state0.is_interior() || !(model.is_monotone() && center_lambda_squared(model) < 0.0) {
        None
    } else if model.linear_lv().is_some() {
        Some((HamiltonianKind::LinearEquivalent, 1))
    } else {
        Some((HamiltonianKind::General, GENERAL_CHECK_EVERY))
    };
    let h0 = match monitor {
        Some((kind, _)) => Some(hamiltonian(state0, model, kind)?),
        None => None,
    };

    let mut states = Vec::with_capacity(steps + 1);
    let mut slopes = Vec::with_capacity(steps + 1);
    let mut state = state0;
    let mut slope = rhs(state, model);
    states.push(state);
    slopes.push(slope);
    for i in 1..=steps {
        let t = i as f64 * dt;
        let mut next = rk4_step(state, model, dt, slope);
        if [next.m1, next.m2].iter().any(|m| *m < -BOUNDARY_SLACK || *m > 1.0 + BOUNDARY_SLACK) {
            return Err(MacroError::BoundaryPenetration { t, m1: next.m1, m2: next.m2 });
        }
        next.m1 = next.m1.clamp(0.0, 1.0);
        next.m2 = next.m2.clamp(0.0, 1.0);
        if let (Some((kind, every)), Some(h0)) = (monitor, h0) {
            if (i % every == 0 || i == steps) && next.is_interior() {
                let drift = (hamiltonian(next, model, kind)? - h0).abs();
                if drift > DRIFT_TOLERANCE * h0.abs().max(1.0) {
                    return Err(MacroError::StepTooLarge { t, drift });
                }
            }
        }
        state = next;
        slope = rhs(state, model);
        states.push(state);
        slopes.push(slope);
    }
    Ok(OdePath { dt, states, slopes })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
    /// Purely imaginary pair in the linearization.
    Center,
    /// A zero eigenvalue or another case the linearization does not decide.
    Degenerate,
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Saddle => "saddle",
            Stability::Center => "center",
            Stability::Degenerate => "degenerate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPoint {
    pub point: MacroState,
    pub jacobian: [[f64; 2]; 2],
    pub eigenvalues: [Eigenvalue; 2],
    pub stability: Stability,
}

/// Jacobian of [`rhs`].
pub fn jacobian(state: MacroState, model: &ValidatedModel) -> [[f64; 2]; 2] {
    let MacroState { m1, m2 } = state;
    let (r1, r2) = (model.r(Family::One), model.r(Family::Two));
    let p1 = model.psi(Family::One, m2);
    let p2 = model.psi(Family::Two, m1);
    [
        [r1 * (1.0 - 2.0 * m1) * p1.psi, r1 * m1 * (1.0 - m1) * p1.prime],
        [r2 * m2 * (1.0 - m2) * p2.prime, r2 * (1.0 - 2.0 * m2) * p2.psi],
    ]
}

fn eigen2(j: [[f64; 2]; 2]) -> [Eigenvalue; 2] {
    let half_trace = 0.5 * (j[0][0] + j[1][1]);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let disc = half_trace * half_trace - det;
    if disc >= 0.0 {
        let root = disc.sqrt();
        [
            Eigenvalue { re: half_trace - root, im: 0.0 },
            Eigenvalue { re: half_trace + root, im: 0.0 },
        ]
    } else {
        let root = (-disc).sqrt();
        [
            Eigenvalue { re: half_trace, im: -root },
            Eigenvalue { re: half_trace, im: root },
        ]
    }
}

fn classify(eig: [Eigenvalue; 2], j: [[f64; 2]; 2]) -> Stability {
    let scale = j.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    let tiny = 1e-12 * scale;
    let re = [eig[0].re, eig[1].re];
    if eig[0].im != 0.0 {
        if re[0].abs() <= tiny {
            Stability::Center
        } else if re[0] < 0.0 {
            Stability::Stable
        } else {
            Stability::Unstable
        }
    } else if re.iter().any(|r| r.abs() <= tiny) {
        Stability::Degenerate
    } else if re.iter().all(|r| *r < 0.0) {
        Stability::Stable
    } else if re.iter().all(|r| *r > 0.0) {
        Stability::Unstable
    } else {
        Stability::Saddle
    }
}

/// The four consensus corners and the center, with linearization.
pub fn fixed_points(model: &ValidatedModel) -> Result<Vec<FixedPoint>, MacroError> {
    if !model.is_monotone() {
        return Err(MacroError::NonMonotone);
    }
    let points = [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (0.5, 0.5)];
    Ok(points
        .iter()
        .map(|&(m1, m2)| {
            let point = MacroState { m1, m2 };
            let jac = jacobian(point, model);
            let eigenvalues = eigen2(jac);
            FixedPoint { point, jacobian: jac, eigenvalues, stability: classify(eigenvalues, jac) }
        })
        .collect())
}

/// `λ²` at the center: `(r₁r₂)²/4 · φ₁′(r₂/2) φ₂′(r₁/2)`.
pub fn center_lambda_squared(model: &ValidatedModel) -> f64 {
    let (r1, r2) = (model.r(Family::One), model.r(Family::Two));
    (r1 * r2).powi(2) / 4.0 * model.phi(Family::One).derivative(r2 / 2.0) * model.phi(Family::Two).derivative(r1 / 2.0)
}

/// `β = 2[a(r₂−r₁) + 2(b₁+b₂)]` for linear Lotka–Volterra utilities.
pub fn linear_beta(lv: LinearLv, r1: f64) -> f64 {
    2.0 * (lv.a * (1.0 - 2.0 * r1) + 2.0 * (lv.b1 + lv.b2))
}
