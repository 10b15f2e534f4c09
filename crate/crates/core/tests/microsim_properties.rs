use lvlab::harness::two_sample_stats;
use lvlab::macroode::{self, MacroState};
use lvlab::microsim::{coupled_simulate, generator_matrix, simulate, MicroRates, MicroState, ParticleState};
use lvlab::{rng, validate, Family, PopulationSpec, UtilityFn, UtilitySpec, ValidatedModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn models(n1: usize, n2: usize) -> [ValidatedModel; 2] {
    let n = n1 + n2;
    let pop = PopulationSpec::deterministic(n, n1 as f64 / n as f64);
    [
        validate(UtilitySpec::linear_lv(2.0, 0.25, 3.0), pop).unwrap(),
        validate(
            UtilitySpec {
                family1: UtilityFn::Exponential { scale: 1.0, rate: -1.0 },
                family2: UtilityFn::Exponential { scale: 2.0, rate: 0.5 },
            },
            pop,
        )
        .unwrap(),
    ]
}

/// Per-particle generator acting on `f(k₁, k₂)` lifted to bit configurations.
fn particle_generator(model: &ValidatedModel, f: &dyn Fn(usize, usize) -> f64, config: u32) -> f64 {
    let (n1, n2) = (model.family_size(Family::One), model.family_size(Family::Two));
    let n = n1 + n2;
    let counts = |c: u32| ((0..n1).filter(|i| c >> i & 1 == 1).count(), (n1..n).filter(|i| c >> i & 1 == 1).count());
    let (k1, k2) = counts(config);
    let m = [k1 as f64 / n1 as f64, k2 as f64 / n2 as f64];
    let frac = [n1 as f64 / n as f64, n2 as f64 / n as f64];
    let mut total = 0.0;
    for i in 0..n {
        let (own, other) = if i < n1 { (0, 1) } else { (1, 0) };
        let phi = model.phi(if own == 0 { Family::One } else { Family::Two });
        let rate = if config >> i & 1 == 1 {
            frac[own] * (1.0 - m[own]) * phi.value(frac[other] * (1.0 - m[other]))
        } else {
            frac[own] * m[own] * phi.value(frac[other] * m[other])
        };
        let (j1, j2) = counts(config ^ (1 << i));
        total += rate * (f(j1, j2) - f(k1, k2));
    }
    total
}

#[test]
fn count_chain_is_the_lumped_particle_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut evaluations = 0;
    while evaluations < 1000 {
        let (n1, n2) = (rng.random_range(1..=3), rng.random_range(1..=3));
        for model in models(n1, n2) {
            let q = generator_matrix(&model).unwrap();
            let values: Vec<f64> = (0..q.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let f = |k1: usize, k2: usize| values[q.index(k1, k2)];
            let qf = q.apply(&values);
            for config in 0..1u32 << (n1 + n2) {
                let lifted = particle_generator(&model, &f, config);
                let k1 = (0..n1).filter(|i| config >> i & 1 == 1).count();
                let k2 = (n1..n1 + n2).filter(|i| config >> i & 1 == 1).count();
                assert!((lifted - qf[q.index(k1, k2)]).abs() <= 1e-12);
                evaluations += 1;
            }
        }
    }
}

#[test]
fn coupled_micro_marginal_matches_direct_simulation() {
    let model = validate(
        UtilitySpec {
            family1: UtilityFn::Linear { slope: 1.0, intercept: 1.0 },
            family2: UtilityFn::Linear { slope: 1.0, intercept: 1.0 },
        },
        PopulationSpec::deterministic(16, 0.5),
    )
    .unwrap();
    let horizon = 60.0;
    let start = MicroState::new(4, 4);
    let path = macroode::integrate(MacroState::new(0.5, 0.5), &model, horizon, 1e-2).unwrap();
    let bits = ParticleState::from_counts(&model, start.k1, start.k2);
    let n = 2000;
    // runs not absorbed by the horizon are censored at the horizon in both samples
    let coupled: Vec<f64> = (0..n as u64)
        .map(|r| {
            let run = coupled_simulate(&bits, &model, &path, horizon, 31, &[1, r], MicroRates::Finite).unwrap();
            run.micro_absorption.unwrap_or(horizon)
        })
        .collect();
    let direct: Vec<f64> = (0..n as u64)
        .map(|r| {
            let mut g = rng::stream(31, &[2, r]);
            simulate(start, &model, horizon, &mut g).unwrap().absorption_time().unwrap_or(horizon)
        })
        .collect();
    let report = two_sample_stats(&coupled, &direct, 0.05).unwrap();
    assert!(report.ks < 0.05, "KS {}", report.ks);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn absorbed_trajectories_end_in_a_corner(seed in any::<u64>(), k1 in 0usize..=6, k2 in 0usize..=6, lv in any::<bool>()) {
        let model = &models(6, 6)[lv as usize];
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        let traj = simulate(MicroState::new(k1, k2), model, 500.0, &mut g).unwrap();
        if traj.absorbed {
            let last = traj.points.last().unwrap();
            prop_assert!(last.k1 == 0 || last.k1 == 6);
            prop_assert!(last.k2 == 0 || last.k2 == 6);
            prop_assert!(traj.corner.is_some());
        }
        for w in traj.points.windows(2) {
            prop_assert!(w[1].t > w[0].t);
            prop_assert_eq!(w[0].k1.abs_diff(w[1].k1) + w[0].k2.abs_diff(w[1].k2), 1);
        }
    }
}
