use dpgne::consensus::{TrackingState, mean_vector};
use dpgne::error::Error;
use dpgne::game::{CournotRanges, CournotSpec, PlayerBox, make_cournot, project_box};
use dpgne::graph::random_connected_graph;
use dpgne::privacy::{MessageStream, NoiseSource, PrivacyAccountant};
use dpgne::schedules::{SequenceFamily, ScheduleSet, ratio_sum};
use dpgne::solver::{DistributedSolver, RoundOptions, init_algorithm2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn boxed(bounds: &[(f64, f64)]) -> PlayerBox {
    let lower = bounds.iter().map(|b| b.0.min(b.1)).collect();
    let upper = bounds.iter().map(|b| b.0.max(b.1)).collect();
    PlayerBox::new(lower, upper, vec![true; bounds.len()]).unwrap()
}

/// Cost of firm `i` written out directly: quadratic production cost minus
/// revenue at the linear market price.
fn firm_cost(spec: &CournotSpec, i: usize, x: &[Vec<f64>]) -> f64 {
    (0..spec.markets())
        .filter(|&l| spec.participation[i][l])
        .map(|l| {
            let supply: f64 = x.iter().map(|xj| xj[l]).sum();
            let price = spec.price_intercept[l] - spec.price_slope[l] * supply;
            spec.cost_quadratic[i][l] * x[i][l].powi(2) + spec.cost_linear[i][l] * x[i][l] - price * x[i][l]
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_projection_is_idempotent_and_nonexpansive(
        bounds in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..6),
        seed in any::<u64>(),
    ) {
        let bx = boxed(&bounds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> {
            (0..bounds.len()).map(|_| 20.0 * (rand::RngExt::random::<f64>(&mut rng) - 0.5)).collect()
        };
        let (a, b) = (draw(), draw());
        let pa = project_box(&a, &bx).unwrap();
        let pb = project_box(&b, &bx).unwrap();
        prop_assert!(bx.contains(&pa));
        prop_assert_eq!(project_box(&pa, &bx).unwrap(), pa.clone());
        let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(s, t)| (s - t).powi(2)).sum::<f64>().sqrt();
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn mixing_contracts_at_the_spectral_gap(
        m in 2usize..25,
        p in 0.4..1.0f64,
        seed in any::<u64>(),
        frac in 0.001..1.0f64,
    ) {
        let graph = random_connected_graph(m, p, 0.2, seed).unwrap();
        let chi = frac / graph.rho_min().abs();
        prop_assert!(graph.mixing_norm(chi) <= 1.0 - chi * graph.rho2().abs() + 1e-10);
    }

    #[test]
    fn tracking_conserves_the_reference_average(
        m in 2usize..12,
        seed in any::<u64>(),
        noise_scale in 0.0..100.0f64,
    ) {
        let graph = random_connected_graph(m, 0.4, 0.2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut refs = |_: u64| -> Vec<Vec<f64>> {
            (0..m).map(|_| (0..3).map(|_| 10.0 * rand::RngExt::random::<f64>(&mut rng)).collect()).collect()
        };
        let source = NoiseSource::new(seed);
        let mut state = TrackingState::init(refs(0)).unwrap();
        for k in 0..50u64 {
            let noise: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    let mut v = vec![0.0; 3];
                    source.fill_laplace(k, i, MessageStream::State, noise_scale, &mut v);
                    v
                })
                .collect();
            state.step(&refs(k + 1), &graph, 0.7, &noise).unwrap();
            prop_assert!(state.conservation_error() < 1e-10, "{}", state.conservation_error());
        }
    }

    #[test]
    fn distributed_solver_keeps_averages_and_feasibility(
        game_seed in 0u64..1000,
        noise_seed in any::<u64>(),
        noise_scale in 0.0..50.0f64,
    ) {
        let (game, _) = make_cournot(8, 3, game_seed, &CournotRanges::default()).unwrap();
        let graph = random_connected_graph(8, 0.4, 0.1, game_seed).unwrap();
        let states = init_algorithm2(&game, &mut ChaCha8Rng::seed_from_u64(noise_seed));
        let source = NoiseSource::new(noise_seed);
        let schedules = ScheduleSet::preset("paper-sim").unwrap();
        let mut solver = DistributedSolver::new(&game, &graph, states, RoundOptions::default()).unwrap();
        for k in 0..100 {
            solver.step(schedules.at_iteration(k), noise_scale, &source).unwrap();
            let err = solver.averaging_errors();
            prop_assert!(err.sigma < 1e-8 && err.z < 1e-8 && err.y < 1e-8, "{err:?}");
            for (s, bx) in solver.states().iter().zip(&game.boxes) {
                prop_assert!(bx.contains(&s.x));
                prop_assert!(s.lambda.iter().all(|&l| l >= 0.0));
            }
        }
    }

    #[test]
    fn cournot_gradient_matches_finite_differences(game_seed in 0u64..10_000, profile_seed in any::<u64>()) {
        let (game, spec) = make_cournot(6, 4, game_seed, &CournotRanges::default()).unwrap();
        let x = game.sample_profile(&mut ChaCha8Rng::seed_from_u64(profile_seed));
        let grad = game.full_gradient(&x).unwrap();
        let h = 1e-5;
        for i in 0..game.players() {
            for l in 0..game.dimension() {
                let mut up = x.clone();
                let mut down = x.clone();
                up[i][l] += h;
                down[i][l] -= h;
                let fd = (firm_cost(&spec, i, &up) - firm_cost(&spec, i, &down)) / (2.0 * h);
                prop_assert!((fd - grad[i][l]).abs() <= 1e-5 * grad[i][l].abs().max(1.0), "{fd} vs {}", grad[i][l]);
            }
        }
    }

    #[test]
    fn ratio_enclosure_brackets_partial_sums(
        a in 0.01..2.0f64,
        c in 1.1..2.5f64,
        nu_a in 0.5..3.0f64,
        nu_c in 0.0..0.5f64,
    ) {
        let gamma = SequenceFamily::power(a, -c).unwrap();
        let nu = SequenceFamily::power(nu_a, nu_c).unwrap();
        // Slow tails (exponent near -1) cannot be certified to 1e-6 within the head cap.
        let (sum, tolerance) = match ratio_sum(&gamma, &nu, 1e-6) {
            Ok(sum) => (sum, 1e-6),
            Err(Error::TailToleranceUnreachable { tolerance, width }) => {
                prop_assert!(width > tolerance);
                (ratio_sum(&gamma, &nu, width * 1.01).unwrap(), width * 1.01)
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let partial: f64 = (0..10_000u64).map(|k| gamma.at_iteration(k) / nu.at_iteration(k)).sum();
        prop_assert!(sum.lower <= sum.upper);
        prop_assert!(sum.width() <= tolerance);
        prop_assert!(partial <= sum.upper + 1e-12);
    }

    #[test]
    fn accountant_is_nondecreasing(c in 0.1..10.0f64, g in 0.1..1.0f64, nu_c in 0.0..1.0f64) {
        let mut acct = PrivacyAccountant::new(
            c,
            SequenceFamily::power(g, -0.9).unwrap(),
            SequenceFamily::power(1.0, nu_c).unwrap(),
        ).unwrap();
        let mut last = 0.0;
        for k in 0..500 {
            let spent = acct.accumulate(k).unwrap();
            prop_assert!(spent >= last);
            last = spent;
        }
    }
}

#[test]
fn generated_averages_start_consistent() {
    let (game, _) = make_cournot(5, 2, 7, &CournotRanges::default()).unwrap();
    let states = init_algorithm2(&game, &mut ChaCha8Rng::seed_from_u64(1));
    let xs: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
    let sigmas: Vec<Vec<f64>> = states.iter().map(|s| s.sigma.clone()).collect();
    assert_eq!(mean_vector(&xs), mean_vector(&sigmas));
}
