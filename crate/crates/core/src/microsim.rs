//! Exact simulation of the N-particle process.
//!
//! The collapsed count chain `(k₁, k₂)` is exact by exchangeability and is the
//! fast path. The per-particle form is kept only for the Poisson coupling with
//! the limiting independent particles.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};
use std::ops::ControlFlow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use thiserror::Error;

use crate::macroode::OdePath;
use crate::model::{Family, ValidatedModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MicroError {
    #[error("state is absorbing (total rate 0)")]
    Absorbed,
    #[error("state space has {states} states, limit is {limit}")]
    TooLarge { states: usize, limit: usize },
    #[error("horizon {horizon} exceeds the ODE solution end {ode_end}")]
    HorizonExceedsOde { horizon: f64, ode_end: f64 },
    #[error("jump rate {rate} exceeds the dominating constant {bound}")]
    RateExceedsBound { rate: f64, bound: f64 },
    #[error("counts ({k1}, {k2}) exceed family sizes ({n1}, {n2})")]
    BadState { k1: usize, k2: usize, n1: usize, n2: usize },
    #[error("horizon must be finite and nonnegative, got {0}")]
    BadHorizon(f64),
}

/// Opinion-1 counts per family and elapsed time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroState {
    pub k1: usize,
    pub k2: usize,
    pub t: f64,
}

/// One of the four absorbing configurations, named by the common opinion of
/// each family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Corner {
    pub family1: u8,
    pub family2: u8,
}

impl fmt::Display for Corner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.family1, self.family2)
    }
}

impl MicroState {
    pub fn new(k1: usize, k2: usize) -> Self {
        MicroState { k1, k2, t: 0.0 }
    }

    /// Counts closest to the fractions `(m₁, m₂)`.
    pub fn from_fractions(model: &ValidatedModel, m1: f64, m2: f64) -> Self {
        let n1 = model.family_size(Family::One) as f64;
        let n2 = model.family_size(Family::Two) as f64;
        MicroState::new((m1.clamp(0.0, 1.0) * n1).round() as usize, (m2.clamp(0.0, 1.0) * n2).round() as usize)
    }

    pub fn check(&self, model: &ValidatedModel) -> Result<(), MicroError> {
        let (n1, n2) = (model.family_size(Family::One), model.family_size(Family::Two));
        if self.k1 > n1 || self.k2 > n2 {
            return Err(MicroError::BadState { k1: self.k1, k2: self.k2, n1, n2 });
        }
        Ok(())
    }

    pub fn count(&self, family: Family) -> usize {
        match family {
            Family::One => self.k1,
            Family::Two => self.k2,
        }
    }

    pub fn m(&self, model: &ValidatedModel, family: Family) -> f64 {
        self.count(family) as f64 / model.family_size(family) as f64
    }

    pub fn corner(&self, model: &ValidatedModel) -> Option<Corner> {
        let side = |family: Family| match self.count(family) {
            0 => Some(0),
            k if k == model.family_size(family) => Some(1),
            _ => None,
        };
        Some(Corner { family1: side(Family::One)?, family2: side(Family::Two)? })
    }
}

/// Aggregate transition rates of the count chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateQuad {
    pub up1: f64,
    pub down1: f64,
    pub up2: f64,
    pub down2: f64,
}

impl RateQuad {
    pub fn total(&self) -> f64 {
        self.up1 + self.down1 + self.up2 + self.down2
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.up1, self.down1, self.up2, self.down2]
    }
}

/// Per-particle rate at finite N: a family-k particle with opinion `bit`
/// switches at `(N_k/N) m_k φ_k((N_k'/N) m_k')` from 0 and at
/// `(N_k/N)(1−m_k) φ_k((N_k'/N)(1−m_k'))` from 1.
pub fn particle_rate(model: &ValidatedModel, family: Family, bit: bool, m_own: f64, m_other: f64) -> f64 {
    let own = model.finite_fraction(family);
    let other = model.finite_fraction(family.other());
    let phi = model.phi(family);
    if bit {
        own * (1.0 - m_own) * phi.value(other * (1.0 - m_other))
    } else {
        own * m_own * phi.value(other * m_other)
    }
}

/// Limiting per-particle rate: as [`particle_rate`] with `N_k/N` replaced by `r_k`.
pub fn limit_rate(model: &ValidatedModel, family: Family, bit: bool, m_own: f64, m_other: f64) -> f64 {
    let own = model.r(family);
    let other = model.r(family.other());
    let phi = model.phi(family);
    if bit {
        own * (1.0 - m_own) * phi.value(other * (1.0 - m_other))
    } else {
        own * m_own * phi.value(other * m_other)
    }
}

pub fn rates(state: &MicroState, model: &ValidatedModel) -> RateQuad {
    let (n1, n2) = (model.family_size(Family::One), model.family_size(Family::Two));
    let m1 = state.k1 as f64 / n1 as f64;
    let m2 = state.k2 as f64 / n2 as f64;
    RateQuad {
        up1: (n1 - state.k1) as f64 * particle_rate(model, Family::One, false, m1, m2),
        down1: state.k1 as f64 * particle_rate(model, Family::One, true, m1, m2),
        up2: (n2 - state.k2) as f64 * particle_rate(model, Family::Two, false, m2, m1),
        down2: state.k2 as f64 * particle_rate(model, Family::Two, true, m2, m1),
    }
}

fn apply_transition(state: &mut MicroState, which: usize) {
    match which {
        0 => state.k1 += 1,
        1 => state.k1 -= 1,
        2 => state.k2 += 1,
        _ => state.k2 -= 1,
    }
}

/// Picks the transition index for a uniform draw on `[0, total)`.
fn choose(quad: &RateQuad, u: f64) -> usize {
    let r = quad.as_array();
    let mut acc = 0.0;
    for (i, rate) in r.iter().enumerate() {
        acc += rate;
        if u < acc && *rate > 0.0 {
            return i;
        }
    }
    // rounding at the top end: last transition with positive rate
    r.iter().rposition(|x| *x > 0.0).expect("total rate is positive")
}

/// One Gillespie step: exponential holding time, then a transition chosen
/// proportionally to its rate.
pub fn ssa_step<R: Rng>(state: &MicroState, model: &ValidatedModel, rng: &mut R) -> Result<(MicroState, f64), MicroError> {
    let quad = rates(state, model);
    let total = quad.total();
    if total <= 0.0 {
        return Err(MicroError::Absorbed);
    }
    let dt: f64 = Exp1.sample(rng);
    let dt = dt / total;
    let which = choose(&quad, rng.random::<f64>() * total);
    let mut next = *state;
    apply_transition(&mut next, which);
    next.t += dt;
    Ok((next, dt))
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunEnd {
    /// State at the end, with `t` set to the stopping time.
    pub state: MicroState,
    pub absorbed: bool,
    /// The observer asked to stop.
    pub stopped: bool,
    pub events: u64,
}

/// Runs the count chain up to `horizon`, calling `observe(previous, next)`
/// after each jump. Stops early at absorption or when `observe` breaks. Jumps
/// past the horizon are not taken.
pub fn run<R: Rng, F: FnMut(&MicroState, &MicroState) -> ControlFlow<()>>(
    state0: MicroState,
    model: &ValidatedModel,
    horizon: f64,
    rng: &mut R,
    mut observe: F,
) -> Result<RunEnd, MicroError> {
    state0.check(model)?;
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(MicroError::BadHorizon(horizon));
    }
    let mut state = state0;
    let mut events = 0u64;
    loop {
        let quad = rates(&state, model);
        let total = quad.total();
        if total <= 0.0 {
            return Ok(RunEnd { state, absorbed: true, stopped: false, events });
        }
        let dt: f64 = Exp1.sample(rng);
        let t_next = state.t + dt / total;
        if t_next > horizon {
            state.t = horizon;
            return Ok(RunEnd { state, absorbed: false, stopped: false, events });
        }
        let which = choose(&quad, rng.random::<f64>() * total);
        let prev = state;
        apply_transition(&mut state, which);
        state.t = t_next;
        events += 1;
        if observe(&prev, &state).is_break() {
            return Ok(RunEnd { state, absorbed: false, stopped: true, events });
        }
    }
}

/// Piecewise-constant path of the count chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Jump states in time order, starting with the initial state.
    pub points: Vec<MicroState>,
    pub absorbed: bool,
    pub corner: Option<Corner>,
    /// Time covered: the horizon, or the absorption time.
    pub t_end: f64,
}

impl Trajectory {
    /// State in force at time `t`.
    pub fn at(&self, t: f64) -> MicroState {
        let idx = self.points.partition_point(|p| p.t <= t);
        self.points[idx.saturating_sub(1)]
    }

    pub fn absorption_time(&self) -> Option<f64> {
        self.absorbed.then(|| self.points.last().map(|p| p.t).unwrap_or(0.0))
    }

    /// CSV with header `t,k1,k2,m1,m2`, one row per jump.
    pub fn write_csv<W: Write>(&self, model: &ValidatedModel, mut out: W) -> io::Result<()> {
        writeln!(out, "t,k1,k2,m1,m2")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                p.t,
                p.k1,
                p.k2,
                p.m(model, Family::One),
                p.m(model, Family::Two)
            )?;
        }
        Ok(())
    }
}

pub fn simulate<R: Rng>(
    state0: MicroState,
    model: &ValidatedModel,
    horizon: f64,
    rng: &mut R,
) -> Result<Trajectory, MicroError> {
    let mut points = vec![state0];
    let end = run(state0, model, horizon, rng, |_, next| {
        points.push(*next);
        ControlFlow::Continue(())
    })?;
    let corner = if end.absorbed { end.state.corner(model) } else { None };
    let t_end = if end.absorbed { end.state.t } else { horizon };
    Ok(Trajectory { points, absorbed: end.absorbed, corner, t_end })
}

/// Largest state space [`generator_matrix`] will build.
pub const GENERATOR_LIMIT: usize = 10_000;

/// Sparse Q-matrix of the count chain. State `(k₁, k₂)` has index
/// `k₁·(N₂+1) + k₂`. Each row stores its off-diagonal entries followed by
/// the diagonal, which is minus their sum accumulated in storage order, so
/// summing a row in storage order gives exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub n1: usize,
    pub n2: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Generator {
    pub fn index(&self, k1: usize, k2: usize) -> usize {
        k1 * (self.n2 + 1) + k2
    }

    pub fn state(&self, index: usize) -> (usize, usize) {
        (index / (self.n2 + 1), index % (self.n2 + 1))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().fold(0.0, |acc, (_, q)| acc + q)
    }

    /// Dense entry `Q[i][j]`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.rows[i].iter().filter(|(c, _)| *c == j).map(|(_, q)| q).sum()
    }

    /// `(Q f)(i) = Σ_j Q[i][j] f(j)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|(j, q)| q * f[*j]).sum())
            .collect()
    }
}

pub fn generator_matrix(model: &ValidatedModel) -> Result<Generator, MicroError> {
    let (n1, n2) = (model.family_size(Family::One), model.family_size(Family::Two));
    let states = (n1 + 1) * (n2 + 1);
    if states > GENERATOR_LIMIT {
        return Err(MicroError::TooLarge { states, limit: GENERATOR_LIMIT });
    }
    let mut rows = Vec::with_capacity(states);
    for k1 in 0..=n1 {
        for k2 in 0..=n2 {
            let quad = rates(&MicroState::new(k1, k2), model);
            let mut row = Vec::with_capacity(5);
            let mut diag = 0.0;
            let targets = [
                (k1 + 1, k2, quad.up1),
                (k1.wrapping_sub(1), k2, quad.down1),
                (k1, k2 + 1, quad.up2),
                (k1, k2.wrapping_sub(1), quad.down2),
            ];
            for (t1, t2, q) in targets {
                if q > 0.0 {
                    row.push((t1 * (n2 + 1) + t2, q));
                    diag += q;
                }
            }
            row.push((k1 * (n2 + 1) + k2, -diag));
            rows.push(row);
        }
    }
    Ok(Generator { n1, n2, rows })
}

/// Individual opinions, one bit vector per family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticleState {
    pub family1: Vec<bool>,
    pub family2: Vec<bool>,
}

impl ParticleState {
    /// First `k₁` (resp. `k₂`) particles hold opinion 1.
    pub fn from_counts(model: &ValidatedModel, k1: usize, k2: usize) -> Self {
        let fill = |n: usize, k: usize| (0..n).map(|i| i < k).collect();
        ParticleState {
            family1: fill(model.family_size(Family::One), k1),
            family2: fill(model.family_size(Family::Two), k2),
        }
    }

    pub fn bits(&self, family: Family) -> &[bool] {
        match family {
            Family::One => &self.family1,
            Family::Two => &self.family2,
        }
    }

    pub fn bits_mut(&mut self, family: Family) -> &mut Vec<bool> {
        match family {
            Family::One => &mut self.family1,
            Family::Two => &mut self.family2,
        }
    }

    pub fn counts(&self) -> MicroState {
        MicroState::new(
            self.family1.iter().filter(|b| **b).count(),
            self.family2.iter().filter(|b| **b).count(),
        )
    }

    pub fn len(&self) -> usize {
        self.family1.len() + self.family2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat particle index → (family, position in family).
    pub fn locate(&self, index: usize) -> (Family, usize) {
        if index < self.family1.len() {
            (Family::One, index)
        } else {
            (Family::Two, index - self.family1.len())
        }
    }
}

/// Which rates drive the microscopic side of the coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MicroRates {
    /// The finite-N rates `λ^N` evaluated at the empirical fractions.
    Finite,
    /// The limiting rates evaluated at the ODE solution; the two systems then
    /// coincide pathwise.
    LimitSurrogate,
}

/// Output of [`coupled_simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRun {
    pub micro: ParticleState,
    pub bar: ParticleState,
    /// `sup_t |σ_i(t) − σ̄_i(t)|` per particle, family 1 first.
    pub discrepancy: Vec<bool>,
    /// Opinion counts of the microscopic system after each accepted flip.
    pub micro_path: Vec<MicroState>,
    /// Time of the last microscopic flip if it ended in an absorbing corner.
    pub micro_absorption: Option<f64>,
    /// Clock rings, accepted or not.
    pub marks: u64,
}

impl CoupledRun {
    pub fn mean_discrepancy(&self) -> f64 {
        if self.discrepancy.is_empty() {
            return 0.0;
        }
        self.discrepancy.iter().filter(|d| **d).count() as f64 / self.discrepancy.len() as f64
    }
}

/// Runs the microscopic particle system and the independent limiting particles
/// on one shared set of Poisson marks.
///
/// Particle `i` carries its own Poisson clock of rate `C` (the dominating
/// constant) drawn from stream `[stream_key, i]` under `root_seed`. At each
/// ring a mark `u ~ U(0, C)` is drawn once; the microscopic particle flips if
/// `u ≤ λ^N` at the current empirical fractions and the limiting particle
/// flips if `u ≤ λ` at the ODE fractions.
pub fn coupled_simulate(
    state0: &ParticleState,
    model: &ValidatedModel,
    macro_solution: &OdePath,
    horizon: f64,
    root_seed: u64,
    stream_key: &[u64],
    micro_rates: MicroRates,
) -> Result<CoupledRun, MicroError> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(MicroError::BadHorizon(horizon));
    }
    if horizon > macro_solution.t_end() * (1.0 + 1e-12) {
        return Err(MicroError::HorizonExceedsOde { horizon, ode_end: macro_solution.t_end() });
    }
    let c = model.dominating_rate();
    let n = state0.len();
    let mut streams: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut labels = stream_key.to_vec();
            labels.push(i as u64);
            rng::stream(root_seed, &labels)
        })
        .collect();
    // min-heap of (next ring time, particle); times are positive so the bit
    // pattern orders like the value
    let mut clock: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::with_capacity(n);
    for (i, s) in streams.iter_mut().enumerate() {
        let dt: f64 = Exp1.sample(s);
        clock.push(Reverse(((dt / c).to_bits(), i)));
    }

    let mut micro = state0.clone();
    let mut bar = state0.clone();
    let mut counts = micro.counts();
    let sizes = [model.family_size(Family::One) as f64, model.family_size(Family::Two) as f64];
    let mut discrepancy = vec![false; n];
    let mut micro_path = vec![counts];
    let mut last_flip = 0.0;
    let mut marks = 0u64;

    while let Some(Reverse((bits, i))) = clock.pop() {
        let t = f64::from_bits(bits);
        if t > horizon {
            break;
        }
        marks += 1;
        let s = &mut streams[i];
        let u = s.random::<f64>() * c;
        let dt: f64 = Exp1.sample(s);
        clock.push(Reverse(((t + dt / c).to_bits(), i)));

        let (family, j) = micro.locate(i);
        let m_ode = macro_solution.at(t).map_err(|_| MicroError::HorizonExceedsOde {
            horizon,
            ode_end: macro_solution.t_end(),
        })?;
        let (ode_own, ode_other) = match family {
            Family::One => (m_ode.m1, m_ode.m2),
            Family::Two => (m_ode.m2, m_ode.m1),
        };
        let bar_bit = bar.bits(family)[j];
        let bar_rate = limit_rate(model, family, bar_bit, ode_own, ode_other);
        let micro_bit = micro.bits(family)[j];
        let micro_rate = match micro_rates {
            MicroRates::Finite => {
                let own = counts.count(family) as f64 / sizes[family.index()];
                let other = counts.count(family.other()) as f64 / sizes[family.other().index()];
                particle_rate(model, family, micro_bit, own, other)
            }
            MicroRates::LimitSurrogate => limit_rate(model, family, micro_bit, ode_own, ode_other),
        };
        for rate in [bar_rate, micro_rate] {
            if rate > c * (1.0 + 1e-12) {
                return Err(MicroError::RateExceedsBound { rate, bound: c });
            }
        }
        if u <= bar_rate {
            bar.bits_mut(family)[j] = !bar_bit;
        }
        if u <= micro_rate {
            micro.bits_mut(family)[j] = !micro_bit;
            match (family, micro_bit) {
                (Family::One, false) => counts.k1 += 1,
                (Family::One, true) => counts.k1 -= 1,
                (Family::Two, false) => counts.k2 += 1,
                (Family::Two, true) => counts.k2 -= 1,
            }
            counts.t = t;
            last_flip = t;
            micro_path.push(counts);
        }
        if micro.bits(family)[j] != bar.bits(family)[j] {
            discrepancy[i] = true;
        }
    }
    let micro_absorption = counts.corner(model).map(|_| last_flip);
    Ok(CoupledRun { micro, bar, discrepancy, micro_path, micro_absorption, marks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macroode::{integrate, MacroState};
    use crate::model::{validate, PopulationSpec, UtilityFn, UtilitySpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn constant(n: usize) -> ValidatedModel {
        let phi = UtilityFn::Linear { slope: 0.0, intercept: 1.0 };
        validate(UtilitySpec { family1: phi, family2: phi }, PopulationSpec::deterministic(n, 0.5)).unwrap()
    }

    fn lv(n: usize) -> ValidatedModel {
        validate(UtilitySpec::linear_lv(1.0, 1.0, 1.0), PopulationSpec::deterministic(n, 0.5)).unwrap()
    }

    #[test]
    fn absorbing_corner_has_zero_rates() {
        let model = lv(100);
        assert_eq!(rates(&MicroState::new(0, 0), &model).total(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ssa_step(&MicroState::new(50, 0), &model, &mut rng).unwrap_err(), MicroError::Absorbed);
    }

    #[test]
    fn constant_utility_symmetric_rates() {
        let q = rates(&MicroState::new(1, 1), &constant(4));
        for r in q.as_array() {
            assert_abs_diff_eq!(r, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn aggregate_rates_match_particle_sum() {
        let model = lv(100);
        let state = MicroState::new(30, 40);
        let q = rates(&state, &model);
        // neighbor sums computed directly from a bit configuration
        let bits = ParticleState::from_counts(&model, 30, 40);
        let n = model.n() as f64;
        let mut sums = [0.0; 4];
        for (family, slot) in [(Family::One, 0), (Family::Two, 2)] {
            let own = bits.bits(family);
            let other = bits.bits(family.other());
            let ones_own = own.iter().filter(|b| **b).count() as f64;
            let ones_other = other.iter().filter(|b| **b).count() as f64;
            let zeros_own = own.len() as f64 - ones_own;
            let zeros_other = other.len() as f64 - ones_other;
            for b in own {
                if *b {
                    sums[slot + 1] += zeros_own / n * model.phi(family).value(zeros_other / n);
                } else {
                    sums[slot] += ones_own / n * model.phi(family).value(ones_other / n);
                }
            }
        }
        for (a, b) in q.as_array().iter().zip(sums) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_rate_picks_only_transition() {
        let quad = RateQuad { up1: 1.0, down1: 0.0, up2: 0.0, down2: 0.0 };
        for u in [0.0, 0.5, 0.999_999] {
            assert_eq!(choose(&quad, u), 0);
        }
        let quad = RateQuad { up1: 0.0, down1: 0.0, up2: 0.0, down2: 2.0 };
        assert_eq!(choose(&quad, 2.0), 3);
    }

    #[test]
    fn transition_frequencies_match_rates() {
        let model = lv(60);
        let state = MicroState::new(10, 20);
        let q = rates(&state, &model);
        let total = q.total();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..trials {
            let (next, _) = ssa_step(&state, &model, &mut rng).unwrap();
            let idx = match (next.k1 as i64 - 10, next.k2 as i64 - 20) {
                (1, 0) => 0,
                (-1, 0) => 1,
                (0, 1) => 2,
                _ => 3,
            };
            hits[idx] += 1;
        }
        for (h, r) in hits.iter().zip(q.as_array()) {
            let p = r / total;
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((*h as f64 / trials as f64 - p).abs() < 3.0 * se);
        }
    }

    #[test]
    fn absorbing_start_gives_single_point() {
        let model = lv(20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = simulate(MicroState::new(10, 10), &model, 1.0, &mut rng).unwrap();
        assert!(traj.absorbed);
        assert_eq!(traj.points.len(), 1);
        assert_eq!(traj.corner, Some(Corner { family1: 1, family2: 1 }));
    }

    #[test]
    fn trajectories_end_in_corners() {
        let model = lv(12);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = simulate(MicroState::new(3, 4), &model, 1e6, &mut rng).unwrap();
            assert!(traj.absorbed);
            assert!(traj.corner.is_some());
            assert!(traj.points.windows(2).all(|w| w[0].t < w[1].t));
        }
    }

    #[test]
    fn generator_trivial_and_exact_row_sums() {
        let tiny = validate(UtilitySpec::linear_lv(1.0, 1.0, 1.0), PopulationSpec::deterministic(2, 0.5)).unwrap();
        let q = generator_matrix(&tiny).unwrap();
        assert_eq!(q.len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(q.entry(i, j), 0.0);
            }
        }
        for model in [lv(7), constant(30), lv(150)] {
            let q = generator_matrix(&model).unwrap();
            assert!((0..q.len()).all(|i| q.row_sum(i) == 0.0));
        }
        assert!(matches!(generator_matrix(&lv(500)), Err(MicroError::TooLarge { .. })));
    }

    #[test]
    fn generator_constant_utility_fixture() {
        // N1=N2=2, φ≡1, hand computed: from (k1,k2) the rate of each family-k
        // move is (count of movers)·(2/4)·(fraction of the target opinion)
        let q = generator_matrix(&constant(4)).unwrap();
        let mut expected = [[0.0f64; 9]; 9];
        for k1 in 0..3usize {
            for k2 in 0..3usize {
                let i = k1 * 3 + k2;
                let mut put = |j: usize, v: f64| {
                    if v > 0.0 {
                        expected[i][j] += v;
                        expected[i][i] -= v;
                    }
                };
                let f = |k: usize| k as f64 / 2.0;
                if k1 < 2 {
                    put(i + 3, (2 - k1) as f64 * 0.5 * f(k1));
                }
                if k1 > 0 {
                    put(i - 3, k1 as f64 * 0.5 * (1.0 - f(k1)));
                }
                if k2 < 2 {
                    put(i + 1, (2 - k2) as f64 * 0.5 * f(k2));
                }
                if k2 > 0 {
                    put(i - 1, k2 as f64 * 0.5 * (1.0 - f(k2)));
                }
            }
        }
        // only (1,·) and (·,1) states move; each move has rate 1·½·½ = ¼
        assert_eq!(expected[4][1], 0.25);
        assert_eq!(expected[4][4], -1.0);
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(q.entry(i, j), *v, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn surrogate_coupling_has_no_discrepancy() {
        let model = lv(200);
        let ode = integrate(MacroState::new(0.7, 0.5), &model, 5.0, 1e-3).unwrap();
        let state0 = ParticleState::from_counts(&model, 70, 50);
        let run = coupled_simulate(&state0, &model, &ode, 5.0, 11, &[0], MicroRates::LimitSurrogate).unwrap();
        assert_eq!(run.mean_discrepancy(), 0.0);
        assert_eq!(run.micro, run.bar);
        assert!(run.marks > 0);
    }

    #[test]
    fn coupling_rejects_short_ode_and_zero_horizon_is_trivial() {
        let model = lv(50);
        let ode = integrate(MacroState::new(0.7, 0.5), &model, 2.0, 1e-3).unwrap();
        let state0 = ParticleState::from_counts(&model, 17, 12);
        assert!(matches!(
            coupled_simulate(&state0, &model, &ode, 3.0, 1, &[], MicroRates::Finite),
            Err(MicroError::HorizonExceedsOde { .. })
        ));
        let run = coupled_simulate(&state0, &model, &ode, 0.0, 1, &[], MicroRates::Finite).unwrap();
        assert_eq!(run.mean_discrepancy(), 0.0);
        assert_eq!(run.marks, 0);
    }

    #[test]
    fn trajectory_csv_header_and_rows() {
        let model = lv(20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = simulate(MicroState::new(5, 6), &model, 0.5, &mut rng).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&model, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,k1,k2,m1,m2\n0,5,6,0.5,0.6\n"));
        assert_eq!(text.lines().count(), traj.points.len() + 1);
    }
}
