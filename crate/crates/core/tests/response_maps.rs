use nalgebra::{DMatrix, DVector};
use perf_lmdp_core::instances::{
    random_certified_instance, random_params, random_policy, random_tabular_spec, CertifiedConfig, CertifiedInstance,
};
use perf_lmdp_core::mdp::{self, LinearMdpSpec, MdpParams, OccupancyMeasure};
use perf_lmdp_core::response::{measure_sensitivity, project_params, random_affine_matrices};
use perf_lmdp_core::rng::{ModuleId, StreamRng};
use perf_lmdp_core::stackelberg::{lemma1_l2_bounds, random_game, stackelberg_response_map};
use perf_lmdp_core::{Error, ResponseKind, ResponseMap};
use proptest::prelude::*;

fn rng(seed: u64) -> StreamRng {
    StreamRng::new(seed, ModuleId::Instances, 0)
}

fn certified(seed: u64, kind: ResponseKind, tabular: bool) -> CertifiedInstance {
    let cfg = CertifiedConfig {
        kind,
        tabular,
        ..CertifiedConfig::tabular(3, 2, 0.8, 0.02, 4e-4)
    };
    random_certified_instance(&cfg, &mut rng(seed)).unwrap()
}

/// Occupancies of random policies under the base kernel.
fn probe_pairs(inst: &CertifiedInstance, n: usize, r: &mut StreamRng) -> Vec<(OccupancyMeasure, OccupancyMeasure)> {
    let (s, a) = (inst.spec.num_states(), inst.spec.num_actions());
    let base = inst.response.base_params();
    (0..n)
        .map(|_| {
            let d1 = mdp::occupancy_from_policy(&random_policy(s, a, r), base, &inst.spec).unwrap();
            let d2 = mdp::occupancy_from_policy(&random_policy(s, a, r), base, &inst.spec).unwrap();
            (d1, d2)
        })
        .collect()
}

#[test]
fn zero_sensitivity_returns_base() {
    let mut r = rng(1);
    let spec = random_tabular_spec(2, 2, 0.9, &mut r).unwrap();
    let base = random_params(&spec, 1.0, 0.1, &mut r).unwrap();
    let (at, am) = random_affine_matrices(&spec, &mut r);
    let map = ResponseMap::affine(base.clone(), at, am, 0.0, 0.0, &spec).unwrap();
    for _ in 0..10 {
        let d = mdp::occupancy_from_policy(&random_policy(2, 2, &mut r), &base, &spec).unwrap();
        assert_eq!(map.apply(&d, &spec).unwrap(), base);
    }
}

#[test]
fn constant_map_ignores_input() {
    let mut r = rng(2);
    let spec = random_tabular_spec(2, 3, 0.5, &mut r).unwrap();
    let base = random_params(&spec, 1.0, 0.0, &mut r).unwrap();
    let map = ResponseMap::constant(base.clone());
    let d1 = OccupancyMeasure::from_slice(&[1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
    let d2 = OccupancyMeasure::from_slice(&[0.0, 0.0, 1.0, 0.2, 0.3, 0.5]).unwrap();
    assert_eq!(map.apply(&d1, &spec).unwrap(), map.apply(&d2, &spec).unwrap());
    let pairs = vec![(d1, d2)];
    assert_eq!(measure_sensitivity(&map, &spec, &pairs).unwrap(), (0.0, 0.0));
}

#[test]
fn policy_factored_depends_on_policy_only() {
    let inst = certified(3, ResponseKind::PolicyFactored, true);
    let mut r = rng(30);
    let d = mdp::occupancy_from_policy(&random_policy(3, 2, &mut r), inst.response.base_params(), &inst.spec).unwrap();
    let p1 = inst.response.apply(&d, &inst.spec).unwrap();
    let p2 = inst.response.apply(&d.scaled(2.0), &inst.spec).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn affine_sensitivity_within_declared() {
    for tabular in [true, false] {
        let inst = certified(4, ResponseKind::AffineInOccupancy, tabular);
        let pairs = probe_pairs(&inst, 100, &mut rng(40));
        let (et, em) = measure_sensitivity(&inst.response, &inst.spec, &pairs).unwrap();
        assert!(et <= inst.response.eps_theta() + 1e-9, "{} > {}", et, inst.response.eps_theta());
        assert!(em <= inst.response.eps_mu() + 1e-9);
        assert!(et > 0.0);
    }
}

#[test]
fn measure_sensitivity_needs_distinct_pair() {
    let inst = certified(5, ResponseKind::AffineInOccupancy, true);
    let d = OccupancyMeasure::from_slice(&[1.0; 6]).unwrap();
    assert!(matches!(
        measure_sensitivity(&inst.response, &inst.spec, &[(d.clone(), d)]),
        Err(Error::EmptyInput(_))
    ));
    assert!(matches!(measure_sensitivity(&inst.response, &inst.spec, &[]), Err(Error::EmptyInput(_))));
}

#[test]
fn stackelberg_sensitivity_within_l2_bound() {
    let mut r = rng(6);
    let game = random_game(2, 2, 2, 0.8, 0.5, &mut r);
    let spec = LinearMdpSpec::tabular(2, 2, 0.8, game.rho.clone()).unwrap();
    let map = stackelberg_response_map(&game, &spec).unwrap();
    assert!(!map.is_heuristic());
    let base = map.base_params().clone();
    for _ in 0..50 {
        let p1 = random_policy(2, 2, &mut r);
        let p2 = random_policy(2, 2, &mut r);
        let d1 = mdp::occupancy_from_policy(&p1, &base, &spec).unwrap();
        let d2 = mdp::occupancy_from_policy(&p2, &base, &spec).unwrap();
        let a = map.apply(&d1, &spec).unwrap();
        let b = map.apply(&d2, &spec).unwrap();
        let (bt, bm) = lemma1_l2_bounds(&game, p1.max_l1_distance(&p2));
        assert!((a.theta() - b.theta()).norm() <= bt + 1e-12);
        assert!((a.mu() - b.mu()).norm() <= bm + 1e-12);
    }
}

#[test]
fn project_valid_params_unchanged() {
    let mut r = rng(7);
    let spec = random_tabular_spec(3, 2, 0.9, &mut r).unwrap();
    let p = random_params(&spec, 2.0, 0.0, &mut r).unwrap();
    assert_eq!(project_params(p.theta(), p.mu(), &spec).unwrap(), p);
}

#[test]
fn project_rescales_theta() {
    let spec = LinearMdpSpec::tabular(2, 2, 0.9, vec![0.5, 0.5]).unwrap();
    let theta = DVector::from_vec(vec![4.0, 0.0, 0.0, 0.0]);
    let mu = DMatrix::from_element(2, 4, 0.5);
    let p = project_params(&theta, &mu, &spec).unwrap();
    assert!((p.theta().norm() - 2.0).abs() <= 1e-15);
}

#[test]
fn project_column_onto_simplex() {
    let spec = LinearMdpSpec::tabular(2, 1, 0.9, vec![0.5, 0.5]).unwrap();
    let mu = DMatrix::from_row_slice(2, 2, &[1.1, 0.5, -0.1, 0.5]);
    let p = project_params(&DVector::zeros(2), &mu, &spec).unwrap();
    assert!((p.mu()[(0, 0)] - 1.0).abs() <= 1e-12);
    assert!(p.mu()[(1, 0)].abs() <= 1e-12);
    assert_eq!(p.mu()[(0, 1)], 0.5);
}

#[test]
fn unrepresentable_projection_is_error() {
    // Features that cannot express the vertex kernel after projection.
    let phi = DMatrix::from_row_slice(2, 1, &[1.0, 0.5]);
    let spec = LinearMdpSpec::new(2, 1, 0.5, vec![0.5, 0.5], phi).unwrap();
    let mu = DMatrix::from_element(2, 1, 0.5);
    assert!(matches!(
        project_params(&DVector::zeros(1), &mu, &spec),
        Err(Error::ProjectionInfeasible(_))
    ));
}

/// Raw parameters far outside the feasible set, then projected twice.
fn raw_params(seed: u64) -> (LinearMdpSpec, DVector<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let spec = random_tabular_spec(2, 2, 0.9, &mut r).unwrap();
    let theta = DVector::from_fn(4, |_, _| 6.0 * r.uniform() - 3.0);
    let mu = DMatrix::from_fn(2, 4, |_, _| 3.0 * r.uniform() - 1.0);
    (spec, theta, mu)
}

fn sound(inst: &CertifiedInstance, seed: u64) -> Result<(), TestCaseError> {
    let pairs = probe_pairs(inst, 1000, &mut rng(seed));
    let (et, em) = measure_sensitivity(&inst.response, &inst.spec, &pairs).unwrap();
    prop_assert!(et <= inst.response.eps_theta() + 1e-9);
    prop_assert!(em <= inst.response.eps_mu() + 1e-9);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn declared_sensitivity_is_sound(seed in any::<u64>(), tabular in any::<bool>()) {
        sound(&certified(seed, ResponseKind::AffineInOccupancy, tabular), seed ^ 1)?;
        sound(&certified(seed, ResponseKind::PolicyFactored, tabular), seed ^ 2)?;
        sound(&certified(seed, ResponseKind::Constant, tabular), seed ^ 3)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn project_is_idempotent(seed in any::<u64>()) {
        let (spec, theta, mu) = raw_params(seed);
        let once = project_params(&theta, &mu, &spec).unwrap();
        let twice = project_params(once.theta(), once.mu(), &spec).unwrap();
        prop_assert!((once.theta() - twice.theta()).amax() <= 1e-12);
        prop_assert!((once.mu() - twice.mu()).amax() <= 1e-12);
    }

    #[test]
    fn apply_is_deterministic(seed in any::<u64>()) {
        let inst = certified(seed, ResponseKind::AffineInOccupancy, false);
        let d = OccupancyMeasure::from_slice(&[5.0 / 6.0; 6]).unwrap();
        let a: MdpParams = inst.response.apply(&d, &inst.spec).unwrap();
        let b = inst.response.apply(&d, &inst.spec).unwrap();
        prop_assert!(a.theta().iter().zip(b.theta().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert!(a.mu().iter().zip(b.mu().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
