use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qfif_core::adjoint::{self, ParamSchedule};
use qfif_core::correlators;
use qfif_core::dynamics::{self, StepPropagators};
use qfif_core::linalg::{self, c, CMat, CVec, C64};
use qfif_core::measurement::{self, LambdaInput, Measurement, PhotonNumberSupport, SinglePortAmplitudes};
use qfif_core::model::{random_model, Mode};
use qfif_core::mps::{build_mps, EnvironmentCache};
use qfif_core::optimizer::{run_trial, LevelStructure, OptimizerConfig};
use qfif_core::oracle::BinnedStateVector;
use qfif_core::qfi;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mode(joint: bool) -> Mode {
    if joint {
        Mode::SingleSourceBothPorts
    } else {
        Mode::IdenticalIndependentSources
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn step_channels_are_cptp(seed in any::<u64>(), dim in 2usize..=4, joint in any::<bool>()) {
        let model = random_model(&mut rng(seed), dim, 3, 2, 1.5, mode(joint), 0.8).unwrap();
        let props = StepPropagators::from_model(&model).unwrap();
        for k in 1..=props.num_steps() {
            prop_assert!(linalg::trace_preservation_residual(props.step(k), dim) <= 1e-9);
            prop_assert!(linalg::choi_min_eigenvalue(props.step(k), dim) >= -1e-8);
        }
    }

    #[test]
    fn expm_factorizes_on_commuting_diagonals(seed in any::<u64>(), dim in 1usize..=6) {
        let mut r = rng(seed);
        let mut diag = || CMat::from_diagonal(&CVec::from_fn(dim, |_, _| c(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0))));
        let (a, b) = (diag(), diag());
        let lhs = linalg::expm(&(&a + &b)).unwrap();
        let rhs = linalg::expm(&a).unwrap() * linalg::expm(&b).unwrap();
        prop_assert!(linalg::max_abs(&(lhs - rhs)) <= 1e-10 * (1.0 + linalg::max_abs(&linalg::expm(&(&a + &b)).unwrap())));
    }

    #[test]
    fn propagation_keeps_states_physical_and_dual(seed in any::<u64>(), dim in 2usize..=4, joint in any::<bool>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r, dim, 2, 3, 2.0, mode(joint), 0.7).unwrap();
        let props = StepPropagators::from_model(&model).unwrap();
        let m = props.num_steps();
        let rho = linalg::random_density(&mut r, dim);
        let k = r.random_range(0..m);
        let out = dynamics::propagate(&rho, k, m, &props).unwrap();
        prop_assert!((linalg::trace(&out).re - 1.0).abs() <= 1e-9);
        prop_assert!(linalg::min_eigenvalue_hermitian(&linalg::hermitize(&out)) >= -1e-8);
        let o = linalg::random_matrix(&mut r, dim, dim);
        let back = dynamics::adjoint_propagate(&o, m, k, &props).unwrap();
        let lhs = linalg::trace_prod(&back, &rho);
        let rhs = linalg::trace_prod(&o, &out);
        prop_assert!((lhs - rhs).norm() <= 1e-9);
    }

    #[test]
    fn qfi_is_nonnegative(seed in any::<u64>(), dim in 2usize..=4, joint in any::<bool>()) {
        let model = random_model(&mut rng(seed), dim, 2, 5, 2.0, mode(joint), 0.8).unwrap();
        let props = StepPropagators::from_model(&model).unwrap();
        if let Ok(report) = qfi::qfi(&model, &props, model.num_steps()) {
            prop_assert!(report.qfi >= -1e-6, "{}", report.qfi);
        }
    }

    #[test]
    fn transfer_maps_split_anywhere(seed in any::<u64>(), cut in prop::array::uniform3(0usize..=12)) {
        let model = random_model(&mut rng(seed), 3, 3, 4, 1.2, Mode::SingleSourceBothPorts, 0.5).unwrap();
        let cache = EnvironmentCache::new(&build_mps(&model, model.eps()).unwrap()).unwrap();
        let mut v = cut;
        v.sort();
        prop_assert!(cache.split_residual(v[0], v[1], v[2]) <= 1e-10);
    }

    #[test]
    fn norm_gradient_matches_normalization(seed in any::<u64>(), dim in 2usize..=3) {
        let mut r = rng(seed);
        let model = random_model(&mut r, dim, 1, 6, 1.5, Mode::IdenticalIndependentSources, 0.8).unwrap();
        let gens = linalg::traceless_hermitian_basis(dim);
        let theta = nalgebra::DMatrix::from_fn(6, gens.len(), |_, _| r.random_range(-1.0..1.0));
        let ps = ParamSchedule::new(gens, theta, model.eps()).unwrap();
        let adj = adjoint::grad_norm_sq(&model, &ps).unwrap();
        let fd = adjoint::finite_difference(&ps, 1e-5, |q| {
            let m = q.apply_to(&model)?;
            correlators::normalization(&m, &StepPropagators::kraus(&m)?)
        }).unwrap();
        prop_assert!((adj.gradient - fd.gradient).amax() <= 1e-8);
    }

    #[test]
    fn lie_closure_is_conjugation_invariant(seed in any::<u64>(), dim in 2usize..=4, count in 1usize..=3) {
        let mut r = rng(seed);
        let gens: Vec<CMat> = (0..count).map(|_| {
            // Sparse generators keep some sets below the full algebra.
            let mut h = CMat::zeros(dim, dim);
            let (i, j) = (r.random_range(0..dim), r.random_range(0..dim));
            h[(i, j)] += c(1.0, 0.0);
            h[(j, i)] += c(1.0, 0.0);
            h
        }).collect();
        let u = linalg::expm(&(linalg::random_hermitian(&mut r, dim) * c(0.0, 1.0))).unwrap();
        let rotated: Vec<CMat> = gens.iter().map(|g| &u * g * u.adjoint()).collect();
        let a = measurement::lie_closure(&gens).unwrap();
        let b = measurement::lie_closure(&rotated).unwrap();
        prop_assert_eq!(a.closure_dim, b.closure_dim);
        prop_assert!(a.closure_dim < dim * dim);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn optimizer_is_deterministic(seed in any::<u64>()) {
        let (model, gens) = LevelStructure::Dark(1).template(1.5, 8).unwrap();
        let cfg = OptimizerConfig { iters: 3, ..Default::default() };
        let a = run_trial(&model, &gens, &cfg, seed);
        let b = run_trial(&model, &gens, &cfg, seed);
        prop_assert_eq!(&a.theta_final, &b.theta_final);
        prop_assert_eq!(a.final_q2.to_bits(), b.final_q2.to_bits());
        prop_assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
    }
}

/// Two hard-core ports per bin, local index `2·α_A + α_B`.
fn hard_core_state(bins: usize, amplitudes: CVec) -> BinnedStateVector {
    let mut low = CMat::zeros(2, 2);
    low[(0, 1)] = c(1.0, 0.0);
    let id = CMat::identity(2, 2);
    BinnedStateVector {
        bins,
        local_dim: 4,
        eps: 1.0,
        amplitudes,
        norm_sq: 1.0,
        port_a: Some(linalg::kron(&low, &id)),
        port_b: Some(linalg::kron(&id, &low)),
    }
}

fn sector(mut idx: usize, bins: usize) -> (usize, usize) {
    let (mut na, mut nb) = (0, 0);
    for _ in 0..bins {
        let d = idx % 4;
        na += d / 2;
        nb += d % 2;
        idx /= 4;
    }
    (na, nb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn number_support_kills_projected_generator(seed in any::<u64>(), picks in prop::collection::vec((0usize..=3, 0usize..=3), 1..6)) {
        const BINS: usize = 3;
        let mut members: Vec<(usize, usize)> = Vec::new();
        for p in picks {
            let clash = members.iter().any(|&(a, b)| a.abs_diff(p.0) == 1 && b.abs_diff(p.1) == 1);
            if !clash && !members.contains(&p) {
                members.push(p);
            }
        }
        let support = PhotonNumberSupport::finite(&members);
        prop_assert!(measurement::check_number_optimality(&support).valid);
        let mut r = rng(seed);
        let n = 4usize.pow(BINS as u32);
        let mut amps = CVec::from_fn(n, |i, _| {
            let (a, b) = sector(i, BINS);
            if support.contains(a, b) { c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)) } else { C64::new(0.0, 0.0) }
        });
        let norm = amps.norm();
        prop_assume!(norm > 1e-6);
        amps.unscale_mut(norm);
        let state = hard_core_state(BINS, amps);
        let h = state.generator_applied().unwrap();
        let leak: f64 = h.iter().enumerate()
            .filter(|(i, _)| { let (a, b) = sector(*i, BINS); support.contains(a, b) })
            .map(|(_, z)| z.norm_sqr())
            .sum();
        prop_assert!(leak.sqrt() <= 1e-10);
        let cfi = measurement::cfi_projective(&state, &Measurement::PhotonNumber).unwrap();
        prop_assert!(!cfi.infinite);
        prop_assert!((cfi.cfi - cfi.qfi).abs() <= 1e-8 * cfi.qfi.max(1.0), "{} vs {}", cfi.cfi, cfi.qfi);
    }

    #[test]
    fn matching_phase_products_have_vanishing_lambda(seed in any::<u64>(), points in 3usize..=8) {
        let mut r = rng(seed);
        let (grid, dt) = measurement::midpoint_grid(points, 3.0);
        let chi: Vec<f64> = (0..points).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut port = |r: &mut ChaCha8Rng| {
            let one = CVec::from_fn(points, |i, _| C64::from_polar(r.random_range(0.1..1.0), chi[i]));
            let mut two = CMat::zeros(points, points);
            for i in 0..points {
                for j in i..points {
                    let z = C64::from_polar(r.random_range(0.1..1.0), chi[i] + chi[j]);
                    two[(i, j)] = z;
                    two[(j, i)] = z;
                }
            }
            SinglePortAmplitudes { vacuum: c(r.random_range(0.1..1.0), 0.0), one, two }
        };
        let a = port(&mut r);
        let b = port(&mut r);
        let report = measurement::lambda_analysis(LambdaInput::Product { grid, dt, a: &a, b: &b }, true).unwrap();
        prop_assert!(report.max_abs_diagonal <= 1e-9, "{}", report.max_abs_diagonal);
    }
}
