use std::sync::Arc;

use mcfbsde::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_state() -> ChainModel {
    ChainModel::constant(builtins::default_generator()).unwrap()
}

fn scalar_monotone() -> BuiltinProblem {
    builtin("scalar-monotone", 2, &BuiltinParams::default()).unwrap()
}

fn random_generator(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::from_fn(d, d, |_, _| rng.random_range(0.1..=0.6));
    for j in 0..d {
        a[(j, j)] = 0.0;
        let out: f64 = a.column(j).sum();
        a[(j, j)] = -out;
    }
    a
}

#[test]
fn scalar_monotone_passes_in_the_proof_sense() {
    let b = scalar_monotone();
    let r = check_monotonicity(
        &b.coeffs,
        &b.g,
        &two_state(),
        Mode::Thm2,
        Flavor::ProofSufficient,
        10_000,
        3,
        &SampleBox::default(),
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    assert_eq!(r.violations, 0);
    for c in [r.c2, r.c2_prime, r.c3, r.common] {
        assert!(c >= 0.99, "{r:?}");
    }
}

#[test]
fn scalar_monotone_fails_literally_with_a_flat_z_witness() {
    let b = scalar_monotone();
    let model = two_state();
    let r = check_monotonicity(&b.coeffs, &b.g, &model, Mode::Thm2, Flavor::Literal, 2_000, 3, &SampleBox::default())
        .unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    let w = r.witness.clone().unwrap();
    assert_eq!(w.inequality, Inequality::H);
    assert_eq!(w.z1, w.z2);
    assert!(w.x1.iter().zip(&w.x2).any(|(a, b)| a != b));
    assert!(w.margin.abs() <= 1e-12 && w.weight_x > 0.0);
    let again = reevaluate_witness(&b.coeffs, &b.g, &model, Mode::Thm2, Flavor::Literal, &w).unwrap();
    assert!((again.margin - w.margin).abs() <= 1e-12);
    assert!((again.weight_x - w.weight_x).abs() <= 1e-12);
    assert!((again.weight_yz - w.weight_yz).abs() <= 1e-12);
}

#[test]
fn zero_dynamics_are_degenerate() {
    let coeffs = CoefficientSet::zero(1, 1, 2).with_phi(|_, x| x.clone());
    let g = GStructure::identity(1);
    let model = two_state();
    let bx = SampleBox::default();
    let lit = check_monotonicity(&coeffs, &g, &model, Mode::Thm2, Flavor::Literal, 500, 1, &bx).unwrap();
    assert_eq!(lit.verdict, Verdict::Fail);
    assert_eq!(lit.violations, 0);
    let ps = check_monotonicity(&coeffs, &g, &model, Mode::Thm2, Flavor::ProofSufficient, 500, 1, &bx).unwrap();
    assert_eq!(ps.verdict, Verdict::Degenerate);
    assert_eq!(ps.common, 0.0);
    assert!((ps.c3 - 1.0).abs() < 1e-12);
}

#[test]
fn wrong_sign_is_a_violation_with_reproducible_witness() {
    // Thm3 hypotheses on a Thm2 problem.
    let b = scalar_monotone();
    let model = two_state();
    let r = check_monotonicity(&b.coeffs, &b.g, &model, Mode::Thm3, Flavor::ProofSufficient, 400, 9, &SampleBox::default())
        .unwrap();
    assert_eq!(r.verdict, Verdict::Fail);
    assert!(r.violations > 0);
    let w = r.witness.unwrap();
    assert!(w.margin < 0.0);
    let again = reevaluate_witness(&b.coeffs, &b.g, &model, Mode::Thm3, Flavor::ProofSufficient, &w).unwrap();
    assert!((again.margin - w.margin).abs() <= 1e-12);
}

#[test]
fn mirror_builtin_satisfies_the_reversed_hypotheses() {
    let b = builtin("thm3-mirror", 2, &BuiltinParams::default()).unwrap();
    let r = check_monotonicity(&b.coeffs, &b.g, &two_state(), Mode::Thm3, Flavor::ProofSufficient, 2_000, 5, &SampleBox::default())
        .unwrap();
    assert_eq!(r.verdict, Verdict::Pass);
    assert!(r.common >= 0.99 && r.c3 >= 0.99);
}

#[test]
fn constants_only_tighten_with_more_samples() {
    let b = builtin("linear-affine", 2, &BuiltinParams::default()).unwrap();
    let model = two_state();
    let bx = SampleBox::default();
    let mut prev: Option<MonotonicityReport> = None;
    for samples in [100, 1_000, 5_000] {
        let r = check_monotonicity(&b.coeffs, &b.g, &model, Mode::Thm2, Flavor::ProofSufficient, samples, 11, &bx).unwrap();
        if let Some(p) = prev {
            assert!(r.common <= p.common && r.c2 <= p.c2 && r.c2_prime <= p.c2_prime && r.c3 <= p.c3);
        }
        prev = Some(r);
    }
}

#[test]
fn empty_box_is_rejected() {
    let b = scalar_monotone();
    let bad = SampleBox {
        radius: 0.0,
        ..SampleBox::default()
    };
    let err = check_monotonicity(&b.coeffs, &b.g, &two_state(), Mode::Thm2, Flavor::Literal, 10, 0, &bad);
    assert!(matches!(err, Err(VerifyError::EmptyBox(_))));
}

#[test]
fn lipschitz_of_a_linear_drift_is_its_operator_norm() {
    let bm = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
    let norm = bm.singular_values().max();
    let bc = bm.clone();
    let coeffs = CoefficientSet::zero(2, 2, 2).with_b(move |_, _, x, _, _| &bc * x);
    let r = check_lipschitz(&coeffs, &GStructure::identity(2), &two_state(), 10_000, 2, &SampleBox::default()).unwrap();
    assert!(r.b <= norm * (1.0 + 1e-12) && r.b >= 0.95 * norm, "{} vs {norm}", r.b);
    assert_eq!(r.sigma, 0.0);
}

#[test]
fn lipschitz_of_constants_and_tanh() {
    let coeffs = CoefficientSet::zero(1, 1, 2)
        .with_b(|_, _, _, _, _| DVector::from_element(1, 3.0))
        .with_phi(|_, x| x.map(f64::tanh));
    let r = check_lipschitz(&coeffs, &GStructure::identity(1), &two_state(), 5_000, 4, &SampleBox::default()).unwrap();
    assert_eq!(r.b, 0.0);
    assert!(r.phi <= 1.0 + 1e-6 && r.phi > 0.5);
}

fn solved(problem: &FBSDEProblem) -> SolutionField {
    solve_continuation(problem, &ContinuationConfig::default(), None).unwrap().0
}

#[test]
fn duality_of_identical_data_is_zero() {
    let tree = Arc::new(DiscreteChainTree::build(&two_state(), 1.0, 5, 0).unwrap());
    let p = scalar_monotone().pose(tree, &Forcing::zero()).unwrap();
    let f = solved(&p);
    let r = check_duality((&p, &f), (&p, &f), 1.0).unwrap();
    for v in [r.lhs, r.drift_term, r.jump_optional, r.jump_predictable, r.second_order, r.optional_gap] {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn duality_is_exact_for_initial_value_changes() {
    let tree = Arc::new(DiscreteChainTree::build(&two_state(), 1.0, 6, 0).unwrap());
    let p1 = scalar_monotone().pose(tree, &Forcing::zero()).unwrap();
    let p0 = p1.with_x0(DVector::zeros(1));
    let (f1, f0) = (solved(&p1), solved(&p0));
    let r = check_duality((&p1, &f1), (&p0, &f0), 1.0).unwrap();
    assert!(r.lhs.abs() > 1e-3);
    assert!(r.optional_gap <= 1e-10, "{r:?}");
}

#[test]
fn duality_is_exact_for_terminal_perturbations() {
    let tree = Arc::new(DiscreteChainTree::build(&two_state(), 1.0, 6, 0).unwrap());
    let b = builtin("linear-affine", 2, &BuiltinParams::default()).unwrap();
    let p1 = b.pose(tree.clone(), &Forcing::zero()).unwrap();
    let xi = Forcing::zero().with_xi(|s| DVector::from_vec(vec![0.3 * s as f64 - 0.1, 0.2]));
    let p2 = b.pose(tree, &xi).unwrap();
    let (f1, f2) = (solved(&p1), solved(&p2));
    let r = check_duality((&p1, &f1), (&p2, &f2), 1.0).unwrap();
    assert!(r.optional_gap <= 1e-10 && r.predictable_gap <= 1e-10, "{r:?}");
    assert!(r.second_order != 0.0);
    assert!(r.continuous_gap > r.predictable_gap);
}

#[test]
fn duality_rejects_different_trees() {
    let t1 = Arc::new(DiscreteChainTree::build(&two_state(), 1.0, 3, 0).unwrap());
    let t2 = Arc::new(DiscreteChainTree::build(&two_state(), 1.0, 4, 0).unwrap());
    let p1 = scalar_monotone().pose(t1, &Forcing::zero()).unwrap();
    let p2 = scalar_monotone().pose(t2, &Forcing::zero()).unwrap();
    let (f1, f2) = (solved(&p1), solved(&p2));
    assert!(matches!(check_duality((&p1, &f1), (&p2, &f2), 1.0), Err(VerifyError::Mismatch(_))));
}

#[test]
fn qv_of_a_frozen_chain_vanishes() {
    let r = check_qv_consistency(&ChainModel::frozen(3).unwrap(), 1.0, 20, 1, 1_000, 0).unwrap();
    assert_eq!(r.relative_error, 0.0);
    assert!(r.exact.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn qv_monte_carlo_matches_the_exact_mean() {
    let sym = ChainModel::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0])).unwrap();
    let r = check_qv_consistency(&sym, 1.0, 100, 0, 200_000, 17).unwrap();
    assert!(r.relative_error <= 0.02, "{r:?}");
    let three = ChainModel::constant(random_generator(3, 5)).unwrap();
    let r = check_qv_consistency(&three, 1.0, 100, 0, 200_000, 18).unwrap();
    assert!(r.relative_error <= 0.02, "{r:?}");
}

#[test]
fn qv_rejects_zero_paths() {
    assert!(check_qv_consistency(&two_state(), 1.0, 10, 0, 0, 0).is_err());
}

#[test]
fn form_equivalence_holds_sweep_by_sweep() {
    let model = ChainModel::constant(random_generator(3, 1)).unwrap();
    let tree = Arc::new(DiscreteChainTree::build(&model, 1.0, 4, 2).unwrap());
    let cfg = ContinuationConfig::default();
    for name in ["zero", "scalar-monotone", "linear-affine"] {
        let p = builtin(name, 3, &BuiltinParams::default())
            .unwrap()
            .pose(tree.clone(), &Forcing::zero())
            .unwrap();
        let (n, m, _) = p.dims();
        let start = SolutionField::random(&tree, n, m, 1.0, 42);
        let r = check_form_equivalence(&p, &start, 1.0, &cfg).unwrap();
        assert!(r.max_discrepancy <= 1e-12, "{name}: {r:?}");
    }
}
