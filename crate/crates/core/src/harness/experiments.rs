//! Experiment drivers.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use rayon::prelude::*;

use super::config::{Config, ConfigError};
use super::stats::{two_sample_stats, TwoSampleReport};
use super::HarnessError;
use crate::actionangle::OrbitMap;
use crate::macroode::{self, HamiltonianKind, MacroState, OdePath};
use crate::microsim::{self, coupled_simulate, MicroRates, MicroState, ParticleState};
use crate::model::{Family, ValidatedModel};
use crate::rng;
use crate::sdelimit::{euler_maruyama, CoefficientScaling, EmSettings, ExitSide, SdeCoefficients, SdePath};

// stream labels, one per experiment role
const LLN_STREAM: u64 = 1;
const CHAOS_STREAM: u64 = 2;
const AVERAGING_MICRO_STREAM: u64 = 3;
const AVERAGING_SDE_STREAM: u64 = 4;
const AVERAGING_CONTROL_STREAM: u64 = 5;
const AVERAGING_PRINTED_STREAM: u64 = 6;
const BOUNDARY_STREAM: u64 = 7;
const BOUNDARY_HALF_STREAM: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Lln,
    Chaos,
    Averaging,
    PhasePortrait,
    SdeBoundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Population sizes; the averaging experiment uses the first.
    pub ladder: Vec<usize>,
    pub replicates: usize,
    pub horizon: f64,
    pub seed: u64,
    /// RK4 step for ODE-based experiments, Euler–Maruyama step otherwise.
    pub dt: f64,
    /// Initial fractions; defaults depend on the experiment.
    pub initial: MacroState,
    /// Initial level (linear convention) for the SDE experiments.
    pub h0: f64,
    /// Stopping interval `(eps1, 1/16 − eps2)` in the linear convention.
    pub eps1: f64,
    pub eps2: f64,
    pub checkpoints: Vec<f64>,
    pub alpha: f64,
    pub scaling: CoefficientScaling,
    /// Phase portrait: starts per axis.
    pub grid: usize,
}

impl ExperimentSpec {
    pub fn defaults(kind: ExperimentKind, seed: u64) -> Self {
        let base = ExperimentSpec {
            kind,
            ladder: vec![],
            replicates: 1,
            horizon: 5.0,
            seed,
            dt: 1e-3,
            initial: MacroState::new(0.7, 0.5),
            h0: 0.03,
            eps1: 1e-3,
            eps2: 1e-3,
            checkpoints: vec![],
            alpha: 0.05,
            scaling: CoefficientScaling::GeneratorConsistent,
            grid: 5,
        };
        match kind {
            ExperimentKind::Lln => ExperimentSpec { ladder: vec![200, 800, 3200], replicates: 200, ..base },
            ExperimentKind::Chaos => ExperimentSpec { ladder: vec![100, 400, 1600], replicates: 100, ..base },
            ExperimentKind::Averaging => ExperimentSpec {
                ladder: vec![2000],
                replicates: 500,
                horizon: 1.0,
                dt: 1e-4,
                checkpoints: vec![0.5, 1.0],
                ..base
            },
            ExperimentKind::SdeBoundary => {
                ExperimentSpec { replicates: 2000, horizon: 200.0, eps1: 1e-4, eps2: 0.0, ..base }
            }
            ExperimentKind::PhasePortrait => ExperimentSpec { horizon: 10.0, ..base },
        }
    }

    /// Defaults overridden by the `exp.*` and `init.*` keys of `cfg`.
    pub fn from_config(kind: ExperimentKind, cfg: &Config, seed: u64) -> Result<Self, ConfigError> {
        let d = ExperimentSpec::defaults(kind, seed);
        let scaling = match cfg.raw("exp.scaling") {
            None => d.scaling,
            Some("generator-consistent") => CoefficientScaling::GeneratorConsistent,
            Some("printed-closed-form") => CoefficientScaling::PrintedClosedForm,
            Some("printed-expansion") => CoefficientScaling::PrintedExpansion,
            Some(other) => return Err(ConfigError::BadValue { key: "exp.scaling".into(), value: other.into() }),
        };
        let checkpoints = cfg.get_list("exp.checkpoints")?.unwrap_or(d.checkpoints);
        let horizon = match (cfg.get("exp.horizon")?, kind) {
            (Some(h), _) => h,
            (None, ExperimentKind::Averaging) => checkpoints.iter().copied().fold(0.0, f64::max),
            (None, _) => d.horizon,
        };
        Ok(ExperimentSpec {
            kind,
            ladder: cfg.get_list("exp.ladder")?.unwrap_or(d.ladder),
            replicates: cfg.get_or("exp.replicates", d.replicates)?,
            horizon,
            seed,
            dt: cfg.get_or("exp.dt", d.dt)?,
            initial: cfg.initial()?.unwrap_or(d.initial),
            h0: cfg.get_or("exp.h0", d.h0)?,
            eps1: cfg.get_or("exp.eps1", d.eps1)?,
            eps2: cfg.get_or("exp.eps2", d.eps2)?,
            checkpoints,
            alpha: cfg.get_or("exp.alpha", d.alpha)?,
            scaling,
            grid: cfg.get_or("exp.grid", d.grid)?,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::BadSpec(msg.to_string()));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.ladder.windows(2).any(|w| w[1] <= w[0]) {
            return bad("N-ladder must be strictly increasing");
        }
        let needs_ladder = matches!(self.kind, ExperimentKind::Lln | ExperimentKind::Chaos | ExperimentKind::Averaging);
        if needs_ladder && self.ladder.is_empty() {
            return bad("N-ladder is empty");
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be finite and non-negative");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.checkpoints.iter().any(|t| !(*t >= 0.0 && *t <= self.horizon)) {
            return bad("checkpoints must lie in [0, horizon]");
        }
        let (lo, hi) = self.interval();
        if !(lo >= 0.0 && lo < hi && self.h0 > lo && self.h0 < hi) {
            return bad("need 0 ≤ eps1 < h0 < 1/16 − eps2");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        Ok(())
    }

    /// Stopping interval in the linear convention.
    pub fn interval(&self) -> (f64, f64) {
        (self.eps1, 1.0 / 16.0 - self.eps2)
    }
}

fn replicate_indices(replicates: usize) -> impl IndexedParallelIterator<Item = u64> {
    (0..replicates).into_par_iter().map(|r| r as u64)
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `mean[i] − mean[i+1] > √(se_i² + se_{i+1}²)` for every consecutive pair.
fn significantly_decreasing(rows: &[LadderRow]) -> bool {
    rows.windows(2).all(|w| w[0].mean - w[1].mean > w[0].std_err.hypot(w[1].std_err))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LadderRow {
    pub n: usize,
    pub replicates: usize,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlnReport {
    pub rows: Vec<LadderRow>,
    pub decreasing: bool,
}

impl LlnReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,replicates,mean_sup_deviation,std_err\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.n, r.replicates, r.mean, r.std_err);
        }
        out
    }
}

fn l1(a: MacroState, b: MacroState) -> f64 {
    (a.m1 - b.m1).abs() + (a.m2 - b.m2).abs()
}

fn fractions(state: &MicroState, model: &ValidatedModel) -> MacroState {
    MacroState::new(state.m(model, Family::One), state.m(model, Family::Two))
}

/// Starting counts nearest to `initial` and the ODE solution from their exact
/// fractions.
fn start(model: &ValidatedModel, initial: MacroState, horizon: f64, dt: f64) -> Result<(MicroState, OdePath), HarnessError> {
    let s0 = MicroState::from_fractions(model, initial.m1, initial.m2);
    let path = macroode::integrate(fractions(&s0, model), model, horizon, dt)?;
    Ok((s0, path))
}

/// `sup_{t≤T} ‖m^N(t) − m(t)‖₁`, read at every jump (both sides) and at
/// every ODE node.
fn sup_deviation(traj: &microsim::Trajectory, path: &OdePath, model: &ValidatedModel) -> Result<f64, HarnessError> {
    let mut sup = 0.0f64;
    for pair in traj.points.windows(2) {
        let ode = path.at(pair[1].t)?;
        sup = sup.max(l1(fractions(&pair[0], model), ode)).max(l1(fractions(&pair[1], model), ode));
    }
    for (t, ode) in path.nodes() {
        sup = sup.max(l1(fractions(&traj.at(t), model), ode));
    }
    Ok(sup)
}

/// Mean sup-distance between the count chain and the ODE across the N-ladder.
pub fn lln_experiment(spec: &ExperimentSpec, model: &ValidatedModel) -> Result<LlnReport, HarnessError> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.ladder.len());
    for &n in &spec.ladder {
        let model = model.with_population(n)?;
        let (s0, path) = start(&model, spec.initial, spec.horizon, spec.dt)?;
        let devs = replicate_indices(spec.replicates)
            .map(|r| {
                let mut rng = rng::stream(spec.seed, &[LLN_STREAM, n as u64, r]);
                let traj = microsim::simulate(s0, &model, spec.horizon, &mut rng)?;
                sup_deviation(&traj, &path, &model)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (mean, std_err) = mean_and_stderr(&devs);
        rows.push(LadderRow { n, replicates: spec.replicates, mean, std_err });
    }
    let decreasing = significantly_decreasing(&rows);
    Ok(LlnReport { rows, decreasing })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaosRow {
    pub ladder: LadderRow,
    /// Total-variation distance between the joint law of a tagged pair at the
    /// horizon and the product of its marginals.
    pub independence_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosReport {
    pub rows: Vec<ChaosRow>,
    pub decreasing: bool,
}

impl ChaosReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,replicates,mean_discrepancy,std_err,independence_gap\n");
        for r in &self.rows {
            let l = &r.ladder;
            let _ = writeln!(out, "{},{},{},{},{}", l.n, l.replicates, l.mean, l.std_err, r.independence_gap);
        }
        out
    }
}

/// 2×2 table of the final bits of disjoint family-1 pairs that started with
/// the same opinion.
fn pair_table(start: &ParticleState, end: &ParticleState) -> [u64; 4] {
    let mut table = [0u64; 4];
    let (s, e) = (start.bits(Family::One), end.bits(Family::One));
    for opinion in [true, false] {
        let group: Vec<usize> = (0..s.len()).filter(|&i| s[i] == opinion).collect();
        for pair in group.chunks_exact(2) {
            table[2 * e[pair[0]] as usize + e[pair[1]] as usize] += 1;
        }
    }
    table
}

fn independence_gap(table: [u64; 4]) -> f64 {
    let total = table.iter().sum::<u64>() as f64;
    if total == 0.0 {
        return 0.0;
    }
    let p: Vec<f64> = table.iter().map(|c| *c as f64 / total).collect();
    let first = [p[0] + p[1], p[2] + p[3]];
    let second = [p[0] + p[2], p[1] + p[3]];
    0.5 * (0..4).map(|c| (p[c] - first[c / 2] * second[c % 2]).abs()).sum::<f64>()
}

/// Mean per-particle sup-discrepancy of the coupled pair across the N-ladder.
pub fn chaos_experiment(spec: &ExperimentSpec, model: &ValidatedModel) -> Result<ChaosReport, HarnessError> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.ladder.len());
    for &n in &spec.ladder {
        let model = model.with_population(n)?;
        let (s0, path) = start(&model, spec.initial, spec.horizon, spec.dt)?;
        let bits = ParticleState::from_counts(&model, s0.k1, s0.k2);
        let runs = replicate_indices(spec.replicates)
            .map(|r| {
                let run = coupled_simulate(
                    &bits,
                    &model,
                    &path,
                    spec.horizon,
                    spec.seed,
                    &[CHAOS_STREAM, n as u64, r],
                    MicroRates::Finite,
                )?;
                Ok((run.mean_discrepancy(), pair_table(&bits, &run.micro)))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let devs: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let mut table = [0u64; 4];
        for (_, t) in &runs {
            for c in 0..4 {
                table[c] += t[c];
            }
        }
        let (mean, std_err) = mean_and_stderr(&devs);
        rows.push(ChaosRow {
            ladder: LadderRow { n, replicates: spec.replicates, mean, std_err },
            independence_gap: independence_gap(table),
        });
    }
    let ladder: Vec<LadderRow> = rows.iter().map(|r| r.ladder).collect();
    Ok(ChaosReport { decreasing: significantly_decreasing(&ladder), rows })
}

/// Conserved quantity `(¼−x²)(¼−y²)` at the empirical fractions.
pub fn linear_level(state: &MicroState, model: &ValidatedModel) -> f64 {
    let x = state.m(model, Family::One) - 0.5;
    let y = state.m(model, Family::Two) - 0.5;
    (0.25 - x * x) * (0.25 - y * y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointRow {
    pub t: f64,
    /// Microscopic sample vs the SDE with the configured scaling.
    pub main: TwoSampleReport,
    /// Microscopic sample vs the same SDE with the drift sign flipped.
    pub control: TwoSampleReport,
    /// Microscopic sample vs the SDE with the printed closed-form coefficients.
    pub printed_closed_form: TwoSampleReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragingReport {
    pub n: usize,
    /// Level of the grid state used as the common start.
    pub h0: f64,
    pub interval: (f64, f64),
    pub rows: Vec<CheckpointRow>,
    /// `micro[c][r]`: replicate `r` at checkpoint `c`.
    pub micro: Vec<Vec<f64>>,
    pub sde: Vec<Vec<f64>>,
    pub micro_exits: usize,
    pub sde_exits: usize,
    pub events: u64,
}

impl AveragingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,comparison,ks,w1,critical,reject\n");
        for r in &self.rows {
            for (name, s) in [("sde", &r.main), ("drift_negated", &r.control), ("printed_closed_form", &r.printed_closed_form)] {
                let _ = writeln!(out, "{},{},{},{},{},{}", r.t, name, s.ks, s.wasserstein1, s.critical, s.reject);
            }
        }
        out
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("replicate,t,h_micro,h_sde\n");
        for (c, row) in self.rows.iter().enumerate() {
            for r in 0..self.micro[c].len() {
                let _ = writeln!(out, "{},{},{},{}", r, row.t, self.micro[c][r], self.sde[c][r]);
            }
        }
        out
    }
}

/// Grid state on the diagonal `x = y` whose level is closest to `h0`.
fn averaging_start(model: &ValidatedModel, h0: f64) -> MicroState {
    let x = (0.25 - h0.sqrt()).max(0.0).sqrt();
    let guess = MicroState::from_fractions(model, 0.5 + x, 0.5 + x);
    let mut best = guess;
    for d1 in -2i64..=2 {
        for d2 in -2i64..=2 {
            let k1 = guess.k1 as i64 + d1;
            let k2 = guess.k2 as i64 + d2;
            if k1 < 0 || k2 < 0 {
                continue;
            }
            let cand = MicroState::new(k1 as usize, k2 as usize);
            if cand.check(model).is_err() {
                continue;
            }
            if (linear_level(&cand, model) - h0).abs() < (linear_level(&best, model) - h0).abs() {
                best = cand;
            }
        }
    }
    best
}

/// Stopped level of one microscopic replicate at each checkpoint, on the
/// slow clock (microscopic time `N·t`).
fn micro_checkpoints(
    s0: MicroState,
    model: &ValidatedModel,
    checkpoints: &[f64],
    (lo, hi): (f64, f64),
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Vec<f64>, bool, u64), HarnessError> {
    let n = model.n() as f64;
    let t_max = checkpoints.iter().copied().fold(0.0, f64::max);
    let mut values = Vec::with_capacity(checkpoints.len());
    let mut exit_value = None;
    let end = microsim::run(s0, model, n * t_max, rng, |prev, next| {
        while values.len() < checkpoints.len() && next.t > n * checkpoints[values.len()] {
            values.push(linear_level(prev, model));
        }
        let h = linear_level(next, model);
        if h <= lo || h >= hi {
            exit_value = Some(if h <= lo { lo } else { hi });
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    })?;
    let last = exit_value.unwrap_or_else(|| linear_level(&end.state, model));
    values.resize(checkpoints.len(), last);
    Ok((values, exit_value.is_some(), end.events))
}

fn sde_checkpoints(
    h0: f64,
    coeffs: &SdeCoefficients,
    spec: &ExperimentSpec,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Vec<f64>, bool), HarnessError> {
    let t_max = spec.checkpoints.iter().copied().fold(0.0, f64::max);
    let settings = EmSettings { interval: spec.interval(), horizon: t_max, dt: spec.dt, record_stride: 1 };
    let path = euler_maruyama(h0, coeffs, settings, rng)?;
    // nodes sit at multiples of the step; the half-step offset absorbs rounding
    let values = spec.checkpoints.iter().map(|&t| path.stopped_value_at(t + 0.5 * spec.dt)).collect();
    Ok((values, path.exit.is_some()))
}

fn transpose(rows: Vec<Vec<f64>>, columns: usize) -> Vec<Vec<f64>> {
    (0..columns).map(|c| rows.iter().map(|r| r[c]).collect()).collect()
}

/// Compares the stopped level of the particle system on the slow clock with
/// Euler–Maruyama marginals of the limiting SDE at each checkpoint.
pub fn averaging_experiment(spec: &ExperimentSpec, model: &ValidatedModel) -> Result<AveragingReport, HarnessError> {
    spec.validate()?;
    let n = spec.ladder[0];
    let model = model.with_population(n)?;
    if model.linear_lv().is_none() {
        return Err(HarnessError::BadSpec("the averaging experiment needs a linear Lotka–Volterra model".into()));
    }
    let s0 = averaging_start(&model, spec.h0);
    let h0 = linear_level(&s0, &model);
    let interval = spec.interval();
    if !(h0 > interval.0 && h0 < interval.1) {
        return Err(HarnessError::BadSpec(format!("grid start level {h0} outside the stopping interval")));
    }
    let mut checkpoints = spec.checkpoints.clone();
    checkpoints.sort_by(f64::total_cmp);

    let micro = replicate_indices(spec.replicates)
        .map(|r| {
            let mut rng = rng::stream(spec.seed, &[AVERAGING_MICRO_STREAM, n as u64, r]);
            micro_checkpoints(s0, &model, &checkpoints, interval, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let micro_exits = micro.iter().filter(|m| m.1).count();
    let events = micro.iter().map(|m| m.2).sum();
    let micro = transpose(micro.into_iter().map(|m| m.0).collect(), checkpoints.len());

    let spec_sorted = ExperimentSpec { checkpoints: checkpoints.clone(), ..spec.clone() };
    let ensemble = |coeffs: &SdeCoefficients, stream: u64| {
        replicate_indices(spec.replicates)
            .map(|r| {
                let mut rng = rng::stream(spec.seed, &[stream, n as u64, r]);
                sde_checkpoints(h0, coeffs, &spec_sorted, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()
    };
    let main_coeffs = SdeCoefficients::linear(&model, spec.scaling)?;
    let main = ensemble(&main_coeffs, AVERAGING_SDE_STREAM)?;
    let sde_exits = main.iter().filter(|m| m.1).count();
    let main = transpose(main.into_iter().map(|m| m.0).collect(), checkpoints.len());
    let control = ensemble(&main_coeffs.with_negated_drift(), AVERAGING_CONTROL_STREAM)?;
    let control = transpose(control.into_iter().map(|m| m.0).collect(), checkpoints.len());
    let printed = ensemble(&SdeCoefficients::linear(&model, CoefficientScaling::PrintedClosedForm)?, AVERAGING_PRINTED_STREAM)?;
    let printed = transpose(printed.into_iter().map(|m| m.0).collect(), checkpoints.len());

    let rows = checkpoints
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            Ok(CheckpointRow {
                t,
                main: two_sample_stats(&micro[c], &main[c], spec.alpha)?,
                control: two_sample_stats(&micro[c], &control[c], spec.alpha)?,
                printed_closed_form: two_sample_stats(&micro[c], &printed[c], spec.alpha)?,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(AveragingReport { n, h0, interval, rows, micro, sde: main, micro_exits, sde_exits, events })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeBoundaryReport {
    pub interval: (f64, f64),
    pub replicates: usize,
    pub left: usize,
    pub right: usize,
    pub unexited: usize,
    /// Mean exit time over exited paths.
    pub mean_exit_time: f64,
    /// Same with half the step (independent streams).
    pub mean_exit_time_half_dt: f64,
    pub clamped: u64,
    /// `(exit time, side)` per replicate at the base step.
    pub exits: Vec<Option<(f64, ExitSide)>>,
}

impl SdeBoundaryReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate,exit_time,exit_side\n");
        for (r, e) in self.exits.iter().enumerate() {
            let _ = match e {
                Some((t, side)) => writeln!(out, "{r},{t},{side}"),
                None => writeln!(out, "{r},,none"),
            };
        }
        out
    }
}

/// Exit statistics of the linear-case SDE from `h0`.
pub fn sde_boundary_experiment(spec: &ExperimentSpec, model: &ValidatedModel) -> Result<SdeBoundaryReport, HarnessError> {
    spec.validate()?;
    let coeffs = SdeCoefficients::linear(model, spec.scaling)?;
    let ensemble = |dt: f64, stream: u64| {
        replicate_indices(spec.replicates)
            .map(|r| {
                let mut rng = rng::stream(spec.seed, &[stream, r]);
                let settings = EmSettings { interval: spec.interval(), horizon: spec.horizon, dt, record_stride: 0 };
                Ok(euler_maruyama(spec.h0, &coeffs, settings, &mut rng)?)
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    };
    let mean_exit = |paths: &[SdePath]| {
        let times: Vec<f64> = paths.iter().filter_map(|p| p.exit.map(|e| e.0)).collect();
        times.iter().sum::<f64>() / times.len().max(1) as f64
    };
    let base = ensemble(spec.dt, BOUNDARY_STREAM)?;
    let half = ensemble(spec.dt / 2.0, BOUNDARY_HALF_STREAM)?;
    let exits: Vec<_> = base.iter().map(|p| p.exit).collect();
    let count = |side| exits.iter().filter(|e| matches!(e, Some((_, s)) if *s == side)).count();
    Ok(SdeBoundaryReport {
        interval: spec.interval(),
        replicates: spec.replicates,
        left: count(ExitSide::Left),
        right: count(ExitSide::Right),
        unexited: exits.iter().filter(|e| e.is_none()).count(),
        mean_exit_time: mean_exit(&base),
        mean_exit_time_half_dt: mean_exit(&half),
        clamped: base.iter().chain(&half).map(|p| p.clamped).sum(),
        exits,
    })
}

/// Recorded paths of the first `count` replicates of
/// [`sde_boundary_experiment`] (same streams, so the exits agree), keeping
/// every `stride`-th step.
pub fn sde_paths(
    spec: &ExperimentSpec,
    model: &ValidatedModel,
    count: usize,
    stride: usize,
) -> Result<Vec<SdePath>, HarnessError> {
    spec.validate()?;
    let coeffs = SdeCoefficients::linear(model, spec.scaling)?;
    replicate_indices(count.min(spec.replicates))
        .map(|r| {
            let mut rng = rng::stream(spec.seed, &[BOUNDARY_STREAM, r]);
            let settings =
                EmSettings { interval: spec.interval(), horizon: spec.horizon, dt: spec.dt, record_stride: stride.max(1) };
            Ok(euler_maruyama(spec.h0, &coeffs, settings, &mut rng)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitRow {
    pub start: MacroState,
    /// Level in the general convention (Lotka–Volterra models only).
    pub h: Option<f64>,
    pub period: Option<f64>,
    /// `|m(period) − m(0)|₁` (Lotka–Volterra models only).
    pub return_distance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PhasePortrait {
    pub rows: Vec<OrbitRow>,
    pub paths: Vec<OdePath>,
}

impl PhasePortrait {
    pub fn summary_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("orbit,m1,m2,h,period,return_distance\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{}",
                r.start.m1,
                r.start.m2,
                opt(r.h),
                opt(r.period),
                opt(r.return_distance)
            );
        }
        out
    }

    /// Every `stride`-th node of every orbit.
    pub fn paths_csv(&self, stride: usize) -> String {
        let mut out = String::from("orbit,t,m1,m2\n");
        for (i, p) in self.paths.iter().enumerate() {
            let last = p.nodes().count() - 1;
            for (j, (t, s)) in p.nodes().enumerate() {
                if j % stride.max(1) == 0 || j == last {
                    let _ = writeln!(out, "{i},{t},{},{}", s.m1, s.m2);
                }
            }
        }
        out
    }
}

/// ODE trajectories from a `grid × grid` lattice of starts. For
/// Lotka–Volterra models each start is followed for exactly one period.
pub fn phase_portrait(spec: &ExperimentSpec, model: &ValidatedModel) -> Result<PhasePortrait, HarnessError> {
    if spec.grid == 0 {
        return Err(HarnessError::BadSpec("grid must be positive".into()));
    }
    let map = if model.is_lotka_volterra() { Some(OrbitMap::new(model, HamiltonianKind::General)?) } else { None };
    let g = spec.grid;
    let starts: Vec<MacroState> = (1..=g)
        .flat_map(|i| (1..=g).map(move |j| MacroState::new(i as f64 / (g + 1) as f64, j as f64 / (g + 1) as f64)))
        .filter(|s| s.x() != 0.0 || s.y() != 0.0)
        .collect();
    let results = starts
        .par_iter()
        .map(|&s| match &map {
            Some(map) => {
                let aa = map.to_action_angle(s.x(), s.y())?;
                let period = map.period(aa.h)?;
                let path = macroode::integrate(s, model, period, spec.dt)?;
                let back = l1(path.last(), s);
                Ok((OrbitRow { start: s, h: Some(aa.h), period: Some(period), return_distance: Some(back) }, path))
            }
            None => {
                let path = macroode::integrate(s, model, spec.horizon, spec.dt)?;
                Ok((OrbitRow { start: s, h: None, period: None, return_distance: None }, path))
            }
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let (rows, paths) = results.into_iter().unzip();
    Ok(PhasePortrait { rows, paths })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate, PopulationSpec, UtilityFn, UtilitySpec};

    fn lv(n: usize) -> ValidatedModel {
        validate(UtilitySpec::linear_lv(1.0, 1.0, 1.0), PopulationSpec::deterministic(n, 0.5)).unwrap()
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::defaults(ExperimentKind::Lln, 1);
        assert!(spec.validate().is_ok());
        spec.ladder = vec![800, 200];
        assert!(spec.validate().is_err());
        spec.ladder = vec![200];
        spec.replicates = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_from_config_overrides() {
        let cfg = Config::parse("exp.ladder = 10, 20\nexp.replicates = 3\nexp.checkpoints = 0.25,0.5\ninit.m1 = 0.2\ninit.m2 = 0.9")
            .unwrap();
        let spec = ExperimentSpec::from_config(ExperimentKind::Averaging, &cfg, 5).unwrap();
        assert_eq!(spec.ladder, vec![10, 20]);
        assert_eq!(spec.replicates, 3);
        assert_eq!(spec.horizon, 0.5);
        assert_eq!(spec.initial, MacroState::new(0.2, 0.9));
    }

    #[test]
    fn independence_gap_of_product_table_is_zero() {
        assert_eq!(independence_gap([4, 4, 4, 4]), 0.0);
        assert_eq!(independence_gap([1, 3, 2, 6]), 0.0);
        assert!((independence_gap([1, 0, 0, 1]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_horizon_chaos_has_no_discrepancy() {
        let spec = ExperimentSpec {
            ladder: vec![20, 40],
            replicates: 3,
            horizon: 0.0,
            ..ExperimentSpec::defaults(ExperimentKind::Chaos, 4)
        };
        let report = chaos_experiment(&spec, &lv(20)).unwrap();
        assert!(report.rows.iter().all(|r| r.ladder.mean == 0.0));
    }

    #[test]
    fn zero_checkpoint_is_degenerate() {
        let spec = ExperimentSpec {
            ladder: vec![200],
            replicates: 20,
            horizon: 0.0,
            checkpoints: vec![0.0],
            ..ExperimentSpec::defaults(ExperimentKind::Averaging, 9)
        };
        let report = averaging_experiment(&spec, &lv(200)).unwrap();
        assert!(report.micro[0].iter().chain(&report.sde[0]).all(|h| *h == report.h0));
        assert_eq!(report.rows[0].main.ks, 0.0);
        assert!((report.h0 - 0.03).abs() < 2e-3);
    }

    #[test]
    fn replicates_do_not_depend_on_thread_count() {
        let spec = ExperimentSpec {
            ladder: vec![50, 100],
            replicates: 6,
            horizon: 1.0,
            ..ExperimentSpec::defaults(ExperimentKind::Lln, 77)
        };
        let one = super::super::with_threads(Some(1), || lln_experiment(&spec, &lv(50))).unwrap().unwrap();
        let four = super::super::with_threads(Some(4), || lln_experiment(&spec, &lv(50))).unwrap().unwrap();
        assert_eq!(one.to_csv(), four.to_csv());
    }

    #[test]
    fn phase_portrait_orbits_close() {
        let spec = ExperimentSpec { grid: 3, ..ExperimentSpec::defaults(ExperimentKind::PhasePortrait, 0) };
        let exp_lv = validate(
            UtilitySpec {
                family1: UtilityFn::Exponential { scale: 1.0, rate: 1.0 },
                family2: UtilityFn::Exponential { scale: 2.0, rate: -0.7 },
            },
            PopulationSpec::deterministic(100, 0.4),
        )
        .unwrap();
        for model in [lv(100), exp_lv] {
            let portrait = phase_portrait(&spec, &model).unwrap();
            assert_eq!(portrait.rows.len(), 8);
            for row in &portrait.rows {
                assert!(row.return_distance.unwrap() < 1e-3);
            }
        }
    }
}
