//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use lvlab::elliptic::{complete_e, complete_k, ellip_e, ellip_f, jacobi_am};
use lvlab::harness::{
    averaging_experiment, chaos_experiment, lln_experiment, sde_boundary_experiment, sha256_hex, with_threads,
    ExperimentKind, ExperimentSpec,
};
use lvlab::macroode::{self, center_lambda_squared, linear_beta, HamiltonianKind, MacroState};
use lvlab::microsim::generator_matrix;
use lvlab::sdelimit::{averaged_coeffs, AveragingMode, CoefficientScaling};
use lvlab::{actionangle, validate, Family, PopulationSpec, UtilityFn, UtilitySpec, ValidatedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_611;

const LUMPING_TOL: f64 = 1e-12;
const CONSERVATION_TOL: f64 = 1e-7;
const PERIOD_REL_TOL: f64 = 1e-4;
const LEGENDRE_TOL: f64 = 1e-11;
const INCOMPLETE_TOL: f64 = 1e-11;
const ROUND_TRIP_TOL: f64 = 1e-10;
const COEFF_REL_TOL: f64 = 1e-6;
const KS_MAX: f64 = 0.12;
const CONTROL_KS_MIN: f64 = 0.3;
const CENTER_EXIT_MAX_FRACTION: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn lv(n: usize) -> ValidatedModel {
    validate(UtilitySpec::linear_lv(1.0, 1.0, 1.0), PopulationSpec::deterministic(n, 0.5)).unwrap()
}

fn level(s: MacroState) -> f64 {
    let (x, y) = (s.m1 - 0.5, s.m2 - 0.5);
    (0.25 - x * x) * (0.25 - y * y)
}

/// Per-particle generator on all `2^(N1+N2)` configurations, applied to
/// `f(count1, count2)` and compared with the count-chain generator.
fn lumping() -> Outcome {
    let families = [
        ("linear", UtilitySpec::linear_lv(1.5, 0.5, 2.0)),
        (
            "exponential",
            UtilitySpec {
                family1: UtilityFn::Exponential { scale: 2.0, rate: 0.5 },
                family2: UtilityFn::Exponential { scale: 1.0, rate: -1.0 },
            },
        ),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (_, utility) in &families {
        for n1 in 1..=3usize {
            for n2 in 1..=3usize {
                let n = n1 + n2;
                let model = validate(*utility, PopulationSpec::deterministic(n, n1 as f64 / n as f64)).unwrap();
                assert_eq!(model.family_size(Family::One), n1);
                let q = generator_matrix(&model).unwrap();
                let (phi1, phi2) = (*model.phi(Family::One), *model.phi(Family::Two));
                let (f1, f2) = (n1 as f64 / n as f64, n2 as f64 / n as f64);
                for _ in 0..20 {
                    let f: Vec<f64> = (0..q.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let qf = q.apply(&f);
                    for config in 0u32..(1 << n) {
                        let bit = |i: usize| config >> i & 1 == 1;
                        let k1 = (0..n1).filter(|&i| bit(i)).count();
                        let k2 = (n1..n).filter(|&i| bit(i)).count();
                        let (m1, m2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
                        let mut lf = 0.0;
                        for i in 0..n {
                            let (own_frac, m_own, m_other, other_frac, phi) = if i < n1 {
                                (f1, m1, m2, f2, phi1)
                            } else {
                                (f2, m2, m1, f1, phi2)
                            };
                            let rate = if bit(i) {
                                own_frac * (1.0 - m_own) * phi.value(other_frac * (1.0 - m_other))
                            } else {
                                own_frac * m_own * phi.value(other_frac * m_other)
                            };
                            let flipped = config ^ (1 << i);
                            let j1 = (0..n1).filter(|&p| flipped >> p & 1 == 1).count();
                            let j2 = (n1..n).filter(|&p| flipped >> p & 1 == 1).count();
                            lf += rate * (f[q.index(j1, j2)] - f[q.index(k1, k2)]);
                        }
                        worst = worst.max((lf - qf[q.index(k1, k2)]).abs());
                        cases += 1;
                    }
                }
            }
        }
    }
    Outcome { pass: worst <= LUMPING_TOL, detail: format!("max |Δ| = {worst:.2e} over {cases} evaluations") }
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = rng.random_range(0.5..2.0);
        let r1 = rng.random_range(0.3..0.7);
        let b1 = rng.random_range(0.1..2.0);
        let b2 = a + rng.random_range(0.1..2.0);
        let model = validate(UtilitySpec::linear_lv(a, b1, b2), PopulationSpec::deterministic(1000, r1)).unwrap();
        let start = MacroState::new(rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        let path = macroode::integrate(start, &model, 100.0, 1e-3).unwrap();
        let h0 = level(start);
        for (_, s) in path.nodes() {
            worst = worst.max((level(s) - h0).abs());
        }
    }
    Outcome { pass: worst <= CONSERVATION_TOL, detail: format!("max |h(t) − h(0)| = {worst:.2e}") }
}

fn period() -> Outcome {
    let model = lv(100);
    let lvp = model.linear_lv().unwrap();
    let mut worst = 0.0f64;
    for h in [0.01, 0.03, 0.05] {
        let predicted = actionangle::linear_period(lvp, 0.5, h).unwrap();
        let x0 = (0.25 - 4.0 * h).sqrt();
        let path = macroode::integrate(MacroState::new(0.5 + x0, 0.5), &model, 1.25 * predicted, 1e-3).unwrap();
        let y = |t: f64| path.at(t).unwrap().m2 - 0.5;
        let x = |t: f64| path.at(t).unwrap().m1 - 0.5;
        let dt = path.step();
        // first crossing of the positive x-axis after half a turn
        let mut t = 0.5 * predicted;
        while !(x(t) > 0.0 && y(t).signum() != y(t + dt).signum()) {
            t += dt;
        }
        let (mut lo, mut hi) = (t, t + dt);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if y(mid).signum() == y(lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        worst = worst.max((0.5 * (lo + hi) - predicted).abs() / predicted);
    }
    let omega = (-center_lambda_squared(&model)).sqrt();
    let small = actionangle::linear_period(lvp, 0.5, 1.0 / 16.0 - 1e-12).unwrap();
    let eig = (small - 2.0 * std::f64::consts::PI / omega).abs() / small;
    Outcome {
        pass: worst <= PERIOD_REL_TOL && eig <= PERIOD_REL_TOL,
        detail: format!("max rel. return-time error = {worst:.2e}; center limit vs 2π/ω = {eig:.2e} (2π/ω = {:.6})", 2.0 * std::f64::consts::PI / omega),
    }
}

/// Adaptive Simpson with Richardson correction.
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50)
}

fn elliptic_kernel() -> Outcome {
    let mut legendre = 0.0f64;
    for i in 1..=9 {
        let m = i as f64 / 10.0;
        let (k, e, kp, ep) = (complete_k(m).unwrap(), complete_e(m).unwrap(), complete_k(1.0 - m).unwrap(), complete_e(1.0 - m).unwrap());
        legendre = legendre.max((e * kp + ep * k - k * kp - std::f64::consts::FRAC_PI_2).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut incomplete = 0.0f64;
    for _ in 0..200 {
        let phi = rng.random_range(-3.0..3.0);
        let m = rng.random_range(0.0..0.95);
        let f_oracle = simpson(&|t: f64| 1.0 / (1.0 - m * t.sin().powi(2)).sqrt(), 0.0, phi, 1e-15);
        let e_oracle = simpson(&|t: f64| (1.0 - m * t.sin().powi(2)).sqrt(), 0.0, phi, 1e-15);
        incomplete = incomplete
            .max((ellip_f(phi, m).unwrap() - f_oracle).abs())
            .max((ellip_e(phi, m).unwrap() - e_oracle).abs());
    }
    let mut round_trip = 0.0f64;
    for _ in 0..1000 {
        let phi = rng.random_range(-10.0..10.0);
        let m = rng.random_range(0.0..0.99);
        round_trip = round_trip.max((jacobi_am(ellip_f(phi, m).unwrap(), m).unwrap() - phi).abs());
    }
    Outcome {
        pass: legendre < LEGENDRE_TOL && incomplete < INCOMPLETE_TOL && round_trip < ROUND_TRIP_TOL,
        detail: format!("Legendre {legendre:.2e}; F/E vs quadrature {incomplete:.2e}; am∘F {round_trip:.2e}"),
    }
}

fn coefficients() -> Outcome {
    let model = lv(100);
    let beta = linear_beta(model.linear_lv().unwrap(), 0.5);
    let (mut drift_err, mut diff_err) = (0.0f64, 0.0f64);
    let mut ratios = Vec::new();
    for i in 1..=12 {
        let h = 0.005 * i as f64;
        let (d, v) =
            averaged_coeffs(h, &model, HamiltonianKind::LinearEquivalent, AveragingMode::GeneralQuadrature).unwrap();
        let m = 1.0 - 16.0 * h;
        let closed_v = beta * h * (complete_e(m).unwrap() / complete_k(m).unwrap() - 16.0 * h);
        drift_err = drift_err.max((d + beta * h).abs() / (beta * h));
        diff_err = diff_err.max((v - closed_v).abs() / closed_v);
        ratios.push(v / closed_v);
    }
    let (rmin, rmax) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(*r), b.max(*r)));
    Outcome {
        pass: drift_err <= COEFF_REL_TOL && diff_err <= COEFF_REL_TOL,
        detail: format!(
            "drift vs −βh: max rel {drift_err:.2e}; diffusion vs βh[E/K−16h]: max rel {diff_err:.2e} \
             (quadrature/closed ratio in [{rmin:.9}, {rmax:.9}])"
        ),
    }
}

fn lln() -> Outcome {
    let spec = ExperimentSpec::defaults(ExperimentKind::Lln, SEED);
    let report = lln_experiment(&spec, &lv(200)).unwrap();
    let rows: Vec<String> =
        report.rows.iter().map(|r| format!("N={}: {:.5}±{:.5}", r.n, r.mean, r.std_err)).collect();
    Outcome { pass: report.decreasing, detail: rows.join(", ") }
}

fn chaos() -> Outcome {
    let spec = ExperimentSpec::defaults(ExperimentKind::Chaos, SEED);
    let report = chaos_experiment(&spec, &lv(100)).unwrap();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("N={}: {:.5}±{:.5} (pair TV gap {:.4})", r.ladder.n, r.ladder.mean, r.ladder.std_err, r.independence_gap))
        .collect();
    Outcome { pass: report.decreasing, detail: rows.join(", ") }
}

fn averaging() -> Outcome {
    let spec = ExperimentSpec::defaults(ExperimentKind::Averaging, SEED);
    let report = averaging_experiment(&spec, &lv(2000)).unwrap();
    let pass = report.rows.iter().all(|r| r.main.ks < KS_MAX && r.control.ks > CONTROL_KS_MIN);
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "t={}: KS {:.4} (W1 {:.2e}), drift-negated KS {:.4}, printed-coefficient KS {:.4}",
                r.t, r.main.ks, r.main.wasserstein1, r.control.ks, r.printed_closed_form.ks
            )
        })
        .collect();
    Outcome {
        pass,
        detail: format!(
            "h0={:.5}; {}; exits micro {}/{} sde {}/{}; {} events",
            report.h0,
            rows.join("; "),
            report.micro_exits,
            spec.replicates,
            report.sde_exits,
            spec.replicates,
            report.events
        ),
    }
}

fn boundary() -> Outcome {
    let spec = ExperimentSpec::defaults(ExperimentKind::SdeBoundary, SEED);
    let report = sde_boundary_experiment(&spec, &lv(100)).unwrap();
    let center_fraction = report.right as f64 / report.replicates as f64;
    // the two readings of the printed coefficients, for comparison only
    let other = |scaling| {
        let r = sde_boundary_experiment(&ExperimentSpec { scaling, ..spec.clone() }, &lv(100)).unwrap();
        format!("{scaling}: {} center-side, {} unexited", r.right, r.unexited)
    };
    Outcome {
        pass: report.unexited == 0 && center_fraction < CENTER_EXIT_MAX_FRACTION,
        detail: format!(
            "{} {} paths (dt {}): {} consensus-side, {} center-side, {} unexited; mean exit time {:.4} (dt/2: {:.4}) \
             | {} | {}",
            spec.scaling,
            report.replicates,
            spec.dt,
            report.left,
            report.right,
            report.unexited,
            report.mean_exit_time,
            report.mean_exit_time_half_dt,
            other(CoefficientScaling::PrintedExpansion),
            other(CoefficientScaling::PrintedClosedForm),
        ),
    }
}

fn determinism() -> Outcome {
    let run = |threads| {
        with_threads(Some(threads), || {
            let model = lv(100);
            let lln = ExperimentSpec { ladder: vec![50, 100], replicates: 16, ..ExperimentSpec::defaults(ExperimentKind::Lln, SEED) };
            let chaos = ExperimentSpec { ladder: vec![50, 100], replicates: 16, ..ExperimentSpec::defaults(ExperimentKind::Chaos, SEED) };
            let avg = ExperimentSpec {
                ladder: vec![200],
                replicates: 32,
                checkpoints: vec![0.1, 0.2],
                horizon: 0.2,
                ..ExperimentSpec::defaults(ExperimentKind::Averaging, SEED)
            };
            let sde = ExperimentSpec { replicates: 64, ..ExperimentSpec::defaults(ExperimentKind::SdeBoundary, SEED) };
            let mut bytes = lln_experiment(&lln, &model).unwrap().to_csv();
            bytes += &chaos_experiment(&chaos, &model).unwrap().to_csv();
            let report = averaging_experiment(&avg, &model).unwrap();
            bytes += &(report.to_csv() + &report.samples_csv());
            bytes += &sde_boundary_experiment(&sde, &model).unwrap().to_csv();
            sha256_hex(bytes.as_bytes())
        })
        .unwrap()
    };
    let (one, eight) = (run(1), run(8));
    Outcome { pass: one == eight, detail: format!("1 thread {}…, 8 threads {}…", &one[..16], &eight[..16]) }
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("generator lumping oracle", Duration::from_secs(1), lumping),
        ("Hamiltonian conservation", Duration::from_secs(10), conservation),
        ("period consistency", Duration::from_secs(5), period),
        ("elliptic kernel", Duration::from_secs(5), elliptic_kernel),
        ("coefficient cross-validation", Duration::from_secs(30), coefficients),
        ("LLN ladder", Duration::from_secs(300), lln),
        ("chaos ladder", Duration::from_secs(300), chaos),
        ("averaging test", Duration::from_secs(1800), averaging),
        ("boundary behavior", Duration::from_secs(120), boundary),
        ("determinism across thread counts", Duration::from_secs(300), determinism),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= *budget;
        if !pass {
            failures += 1;
        }
        println!(
            "{} {:>2} {name}: {} [{:.2} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failures, failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
