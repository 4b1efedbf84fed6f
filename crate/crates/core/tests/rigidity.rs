use std::sync::Arc;

use klplate::expr::Expr;
use klplate::forms::{assemble, h1_gram, symmetric_gradient};
use klplate::linalg::{quad_form, subspace_sine};
use klplate::mesh::{EdgeSelector, Mesh, PlanarDomain};
use klplate::rigidity::*;
use klplate::space::{AdmissibleSpace, BoundaryConditionSet, FieldSpace, Regime, V3Normalization};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(n: usize, bcs: BoundaryConditionSet) -> AdmissibleSpace {
    let m = Arc::new(Mesh::build(&PlanarDomain::unit_square(), n, n).unwrap());
    AdmissibleSpace::new(FieldSpace::new(m), &bcs).unwrap()
}

fn e(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

#[test]
fn free_linear_kernel_is_rigid_motions() {
    let adm = square(6, BoundaryConditionSet::free());
    let k = linear_strain_kernel(&adm).unwrap();
    assert_eq!(k.dim, 3);
    let motions = [("1", "0"), ("0", "1"), ("y2", "-y1")];
    let cols: Vec<DVector<f64>> =
        motions.iter().map(|(a, b)| k.layout.project(&adm.space.interpolate(&e(a), &e(b), &e("0")))).collect();
    let b = DMatrix::from_columns(&cols);
    assert!(subspace_sine(&k.gram, &k.coords, &b) < 1e-6);
    assert!(korn_constant(&adm).is_err());
}

#[test]
fn clamps_remove_kernels() {
    let clamp = BoundaryConditionSet::new(vec![Regime::TangentialClamp], V3Normalization::None);
    assert_eq!(linear_strain_kernel(&square(6, clamp)).unwrap().dim, 0);

    assert_eq!(affine_kernel(&square(6, BoundaryConditionSet::free())).unwrap().dim, 3);
    let h10 = BoundaryConditionSet::new(vec![Regime::TransverseH10], V3Normalization::None);
    assert_eq!(affine_kernel(&square(6, h10)).unwrap().dim, 0);
    let pinned = BoundaryConditionSet::new(vec![], V3Normalization::PinAffine);
    assert_eq!(affine_kernel(&square(6, pinned)).unwrap().dim, 0);
}

#[test]
fn korn_inequality_holds_for_random_fields() {
    let adm = square(6, BoundaryConditionSet::tangential_clamp_pin_affine());
    let c1 = korn_constant(&adm).unwrap();
    let c2 = hessian_constant(&adm).unwrap();
    assert!(c1.is_finite() && c1 > 0.0 && c2.is_finite() && c2 > 0.0);
    let lay = adm.layout(&[0, 1]);
    let a = assemble(&adm, &lay, &symmetric_gradient());
    let m = assemble(&adm, &lay, &h1_gram(&[0, 1]));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let z = DVector::from_fn(lay.len(), |_, _| rng.gen_range(-1.0..1.0));
        assert!(quad_form(&m, &z) <= c1 * quad_form(&a, &z) * (1.0 + 1e-9));
    }
}

#[test]
fn constants_stabilize_under_refinement() {
    let bcs = BoundaryConditionSet::tangential_clamp_pin_affine;
    let (c8, c16) = (korn_constant(&square(8, bcs())).unwrap(), korn_constant(&square(16, bcs())).unwrap());
    assert!((c8 - c16).abs() / c16 < 0.1);
    let (h8, h16) = (hessian_constant(&square(8, bcs())).unwrap(), hessian_constant(&square(16, bcs())).unwrap());
    assert!((h8 - h16).abs() / h16 < 0.1);
}

#[test]
fn verdicts_follow_sufficient_conditions() {
    let opts = FlexSearchOptions::default();
    let r = rigidity_verdict(&square(4, BoundaryConditionSet::tangential_clamp_pin_affine()), &opts).unwrap();
    assert_eq!(r.verdict, Verdict::RigidBy { criterion: RigidityCriterion::FullTangentialClamp });
    assert!(r.c1.is_some() && r.c2.is_some());

    let bottom_top = BoundaryConditionSet::new(
        vec![Regime::PartialTangential { edges: vec![EdgeSelector::Bottom, EdgeSelector::Top] }],
        V3Normalization::PinAffine,
    );
    let r = rigidity_verdict(&square(4, bottom_top), &opts).unwrap();
    assert_eq!(r.verdict, Verdict::RigidBy { criterion: RigidityCriterion::RectangleLikeGraphs });

    let transverse = BoundaryConditionSet::new(
        vec![Regime::TransverseH10, Regime::PartialTangential { edges: vec![EdgeSelector::Left] }],
        V3Normalization::None,
    );
    let r = rigidity_verdict(&square(4, transverse), &opts).unwrap();
    assert_eq!(r.verdict, Verdict::RigidBy { criterion: RigidityCriterion::ConvexTransverseClamp });
}

#[test]
fn plate_clamped_on_one_edge_has_a_flex() {
    let adm = square(4, BoundaryConditionSet::clamped_on(vec![EdgeSelector::Left]));
    let r = rigidity_verdict(&adm, &FlexSearchOptions::default()).unwrap();
    match r.verdict {
        Verdict::Nonrigid { residual } => assert!(residual < TAU_FLEX),
        v => panic!("expected a flex, got {v:?}"),
    }
    let w = r.nonlinear_flex.unwrap();
    assert!(strain_residual_sq(&adm, &w.field).sqrt() < TAU_FLEX);
}

#[test]
fn flex_search_rejects_bad_options() {
    let adm = square(2, BoundaryConditionSet::free());
    let bad = FlexSearchOptions { tolerance: 0.0, ..Default::default() };
    assert!(nonlinear_flex_search(&adm, &bad).is_err());
}
