//! `lvlab` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 experiment
//! threshold failure, 3 internal invariant violation.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use lvlab::actionangle::OrbitMap;
use lvlab::harness::{
    averaging_experiment, chaos_experiment, lln_experiment, phase_portrait, sde_boundary_experiment,
    sde_paths, sha256_hex, with_threads, Config, ExperimentKind, ExperimentSpec, HarnessError, Manifest, OutputDir,
    RunStatus,
};
use lvlab::macroode::{self, fixed_points, HamiltonianKind, MacroState};
use lvlab::microsim::{self, MicroState};
use lvlab::{rng, Family, ValidatedModel};

const DEFAULT_CONFIG: &str = "phi1.kind = linear\nphi1.a = 1\nphi1.b = 1\n\
                              phi2.kind = linear\nphi2.a = -1\nphi2.b = 1\npop.N = 1000\npop.r1 = 0.5\n";
const MICRO_SIM_STREAM: u64 = 100;
const RETURN_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "lvlab", version, about = "Two-family Lotka-Volterra opinion dynamics experiments")]
struct Cli {
    /// Model and experiment configuration (`key = value` lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = "lvlab-out")]
    out: PathBuf,
    /// Override the replicate count
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Worker threads (default: LVLAB_THREADS, else all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Convention {
    Linear,
    General,
}

impl From<Convention> for HamiltonianKind {
    fn from(c: Convention) -> Self {
        match c {
            Convention::Linear => HamiltonianKind::LinearEquivalent,
            Convention::General => HamiltonianKind::General,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the mean-field ODE from init.m1, init.m2
    MacroOde {
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
    },
    /// Classify the five fixed points
    FixedPoints,
    /// Sample one orbit in action-angle coordinates
    Orbit {
        /// Level of the conserved quantity
        #[arg(long)]
        h: f64,
        #[arg(long, value_enum, default_value = "linear")]
        convention: Convention,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Exact simulation of the count chain
    MicroSim {
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
    },
    /// Coupled microscopic and limiting particles across the N-ladder
    ChaosTest,
    /// Count chain against the ODE across the N-ladder
    LlnTest,
    /// Slow-clock particle system against the averaged SDE
    AveragingTest,
    /// Euler-Maruyama paths of the averaged SDE with exit statistics
    SdeSim {
        /// Number of replicates whose full path is written
        #[arg(long, default_value_t = 10)]
        paths: usize,
        /// Keep every this many steps of the written paths
        #[arg(long, default_value_t = 100)]
        stride: usize,
    },
    /// ODE orbits from a grid of starts
    PhasePortrait,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MacroOde { .. } => "macro-ode",
            Command::FixedPoints => "fixed-points",
            Command::Orbit { .. } => "orbit",
            Command::MicroSim { .. } => "micro-sim",
            Command::ChaosTest => "chaos-test",
            Command::LlnTest => "lln-test",
            Command::AveragingTest => "averaging-test",
            Command::SdeSim { .. } => "sde-sim",
            Command::PhasePortrait => "phase-portrait",
        }
    }
}

enum Failure {
    Usage(String),
    Threshold(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Threshold(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Threshold(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::BadSpec(_) | HarnessError::Model(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

fn harness<E: Into<HarnessError>>(e: E) -> Failure {
    Failure::from(e.into())
}

struct Run<'a> {
    cli: &'a Cli,
    config: Config,
    model: ValidatedModel,
    out: OutputDir,
    notes: Vec<(String, String)>,
}

impl Run<'_> {
    fn spec(&self, kind: ExperimentKind) -> Result<ExperimentSpec, Failure> {
        let mut spec = ExperimentSpec::from_config(kind, &self.config, self.cli.seed).map_err(harness)?;
        if let Some(r) = self.cli.replicates {
            spec.replicates = r;
        }
        spec.validate().map_err(Failure::from)?;
        Ok(spec)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        self.out.write(name, text.as_bytes()).map_err(Failure::from)
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    fn initial(&self) -> Result<MacroState, Failure> {
        Ok(self.config.initial().map_err(harness)?.unwrap_or(MacroState::new(0.7, 0.5)))
    }

    fn execute(&mut self) -> Result<(), Failure> {
        match &self.cli.command {
            Command::MacroOde { horizon, dt } => {
                let s0 = self.initial()?;
                let path = macroode::integrate(s0, &self.model, *horizon, *dt).map_err(harness)?;
                let mut csv = String::from("t,m1,m2\n");
                for (t, s) in path.nodes() {
                    let _ = writeln!(csv, "{t},{},{}", s.m1, s.m2);
                }
                self.write("macro_ode.csv", &csv)?;
                let end = path.last();
                println!("m({}) = ({:.6}, {:.6})", path.t_end(), end.m1, end.m2);
            }
            Command::FixedPoints => {
                let points = fixed_points(&self.model).map_err(harness)?;
                let mut csv = String::from("m1,m2,re1,im1,re2,im2,stability\n");
                println!("{:>6} {:>6}  {:>24}  {:>24}  stability", "m1", "m2", "eigenvalue 1", "eigenvalue 2");
                for p in &points {
                    let [e1, e2] = p.eigenvalues;
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{},{},{}",
                        p.point.m1, p.point.m2, e1.re, e1.im, e2.re, e2.im, p.stability
                    );
                    println!(
                        "{:>6} {:>6}  {:>11.6}{:+11.6}i  {:>11.6}{:+11.6}i  {}",
                        p.point.m1, p.point.m2, e1.re, e1.im, e2.re, e2.im, p.stability
                    );
                }
                self.write("fixed_points.csv", &csv)?;
            }
            Command::Orbit { h, convention, samples } => {
                let map = OrbitMap::new(&self.model, (*convention).into()).map_err(harness)?;
                let mut buf = Vec::new();
                map.write_orbit_csv(*h, *samples, &mut buf).map_err(|e| Failure::Usage(e.to_string()))?;
                self.out.write("orbit.csv", &buf).map_err(Failure::from)?;
                let period = map.period(*h).map_err(harness)?;
                self.note("period", period);
                println!("level {h}: period {period}");
            }
            Command::MicroSim { horizon } => {
                let s0 = self.initial()?;
                let start = MicroState::from_fractions(&self.model, s0.m1, s0.m2);
                let replicates = self.cli.replicates.unwrap_or(1);
                if replicates == 0 {
                    return Err(Failure::Usage("replicates must be at least 1".into()));
                }
                let (model, seed) = (&self.model, self.cli.seed);
                let runs = with_threads(self.cli.threads, || {
                    use rayon::prelude::*;
                    (0..replicates)
                        .into_par_iter()
                        .map(|r| {
                            let mut g = rng::stream(seed, &[MICRO_SIM_STREAM, r as u64]);
                            microsim::simulate(start, model, *horizon, &mut g)
                        })
                        .collect::<Result<Vec<_>, _>>()
                })
                .map_err(Failure::from)?
                .map_err(harness)?;
                let mut trajectory = Vec::new();
                runs[0].write_csv(&self.model, &mut trajectory).map_err(harness)?;
                self.out.write("trajectory.csv", &trajectory).map_err(Failure::from)?;
                let mut summary = String::from("replicate,seed,t_abs,corner\n");
                for (r, run) in runs.iter().enumerate() {
                    let key = rng::derive_key(seed, &[MICRO_SIM_STREAM]);
                    let t_abs = run.absorption_time().map(|t| t.to_string()).unwrap_or_default();
                    let corner = run.corner.map(|c| c.to_string()).unwrap_or_default();
                    let _ = writeln!(summary, "{r},{key}:{r},{t_abs},{corner}");
                }
                self.write("absorption.csv", &summary)?;
                let absorbed = runs.iter().filter(|r| r.absorbed).count();
                println!("{replicates} replicates, {absorbed} absorbed before t={horizon}");
            }
            Command::LlnTest => {
                let spec = self.spec(ExperimentKind::Lln)?;
                let report = with_threads(self.cli.threads, || lln_experiment(&spec, &self.model))??;
                self.write("lln.csv", &report.to_csv())?;
                for r in &report.rows {
                    println!("N={:>6}  mean sup-deviation {:.6} ± {:.6}", r.n, r.mean, r.std_err);
                }
                if !report.decreasing {
                    return Err(Failure::Threshold("deviations are not significantly decreasing in N".into()));
                }
            }
            Command::ChaosTest => {
                let spec = self.spec(ExperimentKind::Chaos)?;
                let report = with_threads(self.cli.threads, || chaos_experiment(&spec, &self.model))??;
                self.write("chaos.csv", &report.to_csv())?;
                for r in &report.rows {
                    println!(
                        "N={:>6}  mean discrepancy {:.6} ± {:.6}  pair TV gap {:.5}",
                        r.ladder.n, r.ladder.mean, r.ladder.std_err, r.independence_gap
                    );
                }
                if !report.decreasing {
                    return Err(Failure::Threshold("discrepancies are not significantly decreasing in N".into()));
                }
            }
            Command::AveragingTest => {
                let spec = self.spec(ExperimentKind::Averaging)?;
                let (ks_max, control_min) = (0.12, 0.3);
                self.note("threshold.ks_max", ks_max);
                self.note("threshold.control_ks_min", control_min);
                self.note("interval", format!("({}, {})", spec.eps1, 1.0 / 16.0 - spec.eps2));
                self.note("eps2", format!("{} (calibration choice)", spec.eps2));
                self.note("scaling", spec.scaling);
                let report = with_threads(self.cli.threads, || averaging_experiment(&spec, &self.model))??;
                self.write("averaging.csv", &report.to_csv())?;
                self.write("averaging_samples.csv", &report.samples_csv())?;
                println!("N={} h0={:.6}", report.n, report.h0);
                let mut pass = true;
                for r in &report.rows {
                    println!(
                        "t={}: KS {:.4}  W1 {:.3e}  | drift negated KS {:.4} | printed coefficients KS {:.4}",
                        r.t, r.main.ks, r.main.wasserstein1, r.control.ks, r.printed_closed_form.ks
                    );
                    pass &= r.main.ks < ks_max && (r.t == 0.0 || r.control.ks > control_min);
                }
                if !pass {
                    return Err(Failure::Threshold("KS thresholds not met".into()));
                }
            }
            Command::SdeSim { paths, stride } => {
                let spec = self.spec(ExperimentKind::SdeBoundary)?;
                let report = with_threads(self.cli.threads, || sde_boundary_experiment(&spec, &self.model))??;
                let recorded = with_threads(self.cli.threads, || sde_paths(&spec, &self.model, *paths, *stride))??;
                self.write("exits.csv", &report.to_csv())?;
                for (r, path) in recorded.iter().enumerate() {
                    let mut buf = Vec::new();
                    path.write_csv(&mut buf).map_err(harness)?;
                    self.out.write(&format!("path_{r:04}.csv"), &buf).map_err(Failure::from)?;
                }
                println!(
                    "{} paths: {} left, {} right, {} unexited; mean exit time {:.4} (dt/2: {:.4})",
                    report.replicates,
                    report.left,
                    report.right,
                    report.unexited,
                    report.mean_exit_time,
                    report.mean_exit_time_half_dt
                );
            }
            Command::PhasePortrait => {
                let spec = self.spec(ExperimentKind::PhasePortrait)?;
                let portrait = with_threads(self.cli.threads, || phase_portrait(&spec, &self.model))??;
                self.write("orbits.csv", &portrait.summary_csv())?;
                self.write("phase_portrait.csv", &portrait.paths_csv(10))?;
                let worst = portrait.rows.iter().filter_map(|r| r.return_distance).fold(None, |acc: Option<f64>, d| {
                    Some(acc.map_or(d, |a| a.max(d)))
                });
                match worst {
                    Some(w) => {
                        println!("{} closed orbits, worst return distance {w:.3e}", portrait.rows.len());
                        if w > RETURN_TOLERANCE {
                            return Err(Failure::Threshold(format!("orbit failed to close: {w:.3e}")));
                        }
                    }
                    None => println!("{} trajectories (no conserved quantity)", portrait.rows.len()),
                }
            }
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let started = Instant::now();
    let text = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(1);
            }
        },
        None => DEFAULT_CONFIG.to_string(),
    };
    let setup = Config::parse(&text).map_err(harness).and_then(|config| {
        let model = config.model().map_err(Failure::from)?;
        let out = OutputDir::create(&cli.out).map_err(Failure::from)?;
        Ok((config, model, out))
    });
    let (config, model, out) = match setup {
        Ok(v) => v,
        Err(f) => {
            eprintln!("error: {}", f.message());
            return ExitCode::from(f.code());
        }
    };
    let config_hash = sha256_hex(config.canonical().as_bytes());
    let mut run = Run { cli: &cli, config, model, out, notes: Vec::new() };
    let result = run.execute();
    // a threshold failure still produced every output
    let status = match &result {
        Ok(()) | Err(Failure::Threshold(_)) => RunStatus::Complete,
        Err(_) => RunStatus::Incomplete,
    };
    let mut notes = std::mem::take(&mut run.notes);
    notes.push(("n1".into(), run.model.family_size(Family::One).to_string()));
    notes.push(("n2".into(), run.model.family_size(Family::Two).to_string()));
    match &result {
        Ok(()) => notes.push(("outcome".into(), "pass".into())),
        Err(f) => notes.push(("outcome".into(), format!("exit {}: {}", f.code(), f.message()))),
    }
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        config_sha256: config_hash,
        seed: cli.seed,
        wall_time: started.elapsed(),
        status,
        notes,
        files: Vec::new(),
    };
    if let Err(e) = run.out.write_manifest(manifest) {
        eprintln!("error: writing MANIFEST: {e}");
        return ExitCode::from(3);
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
