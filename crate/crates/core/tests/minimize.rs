use std::sync::Arc;

use klplate::analysis::{blowup_family, counterexample_field};
use klplate::energy::{LoadSpec, MaterialParams, ScalarField};
use klplate::expr::Expr;
use klplate::mesh::{EdgeSelector, Mesh, PlanarDomain};
use klplate::minimize::*;
use klplate::space::{AdmissibleSpace, BoundaryConditionSet, FieldSpace};

fn cor2_space(n: usize) -> AdmissibleSpace {
    let m = Arc::new(Mesh::build(&PlanarDomain::unit_square(), n, n).unwrap());
    AdmissibleSpace::new(FieldSpace::new(m), &BoundaryConditionSet::tangential_clamp_pin_affine()).unwrap()
}

fn pressure(p3: f64) -> LoadSpec {
    LoadSpec::reduced(
        [ScalarField::Zero, ScalarField::Zero, ScalarField::Constant(p3)],
        [ScalarField::Zero, ScalarField::Zero],
    )
}

#[test]
fn zero_load_stops_at_start() {
    let adm = cor2_space(4);
    let params = MaterialParams::new(1.0, 1.0, 1.0).unwrap();
    let r = minimize_energy(&adm, &LoadSpec::zero(), &params, None, &MinimizeOptions::default()).unwrap();
    assert_eq!(r.trace.status, MinimizeStatus::Converged);
    assert_eq!(r.trace.last().unwrap().iteration, 0);
    assert_eq!(r.energy.total, 0.0);
    let d = minimizing_sequence_diagnostics(&r.trace).unwrap();
    assert_eq!(d.behavior, SequenceBehavior::Bounded);
}

#[test]
fn zero_load_minimum_is_nonnegative_from_random_starts() {
    let adm = cor2_space(4);
    let params = MaterialParams::new(1.0, 1.0, 1.0).unwrap();
    let opts = MinimizeOptions { restarts: 3, seed: 11, restart_amplitude: 0.5, ..Default::default() };
    let r = minimize_energy(&adm, &LoadSpec::zero(), &params, None, &opts).unwrap();
    for (e, _) in &r.runs {
        assert!(e.total >= -1e-12);
    }
}

#[test]
fn pressure_on_rigid_plate_converges_below_zero() {
    let adm = cor2_space(6);
    let params = MaterialParams::new(1.0, 1.0, 1.0).unwrap();
    let opts = MinimizeOptions { restarts: 3, seed: 5, ..Default::default() };
    let r = minimize_energy(&adm, &pressure(0.01), &params, None, &opts).unwrap();
    assert!(r.trace.constants.is_some());
    let finals: Vec<f64> = r.runs.iter().map(|(e, _)| e.total).collect();
    for (e, t) in &r.runs {
        assert_eq!(t.status, MinimizeStatus::Converged);
        assert!(t.last().unwrap().gradient_norm <= opts.gradient_tolerance);
        assert!(e.total <= 0.0);
        assert!(t.records.windows(2).all(|w| w[1].energy <= w[0].energy));
        assert_eq!(minimizing_sequence_diagnostics(t).unwrap().behavior, SequenceBehavior::Bounded);
    }
    let spread = finals.iter().cloned().fold(f64::MIN, f64::max) - finals.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread < 1e-8);
    assert!(!r.suspected_unbounded());
}

#[test]
fn identical_options_give_identical_traces() {
    let adm = cor2_space(4);
    let params = MaterialParams::new(1.0, 1.0, 1.0).unwrap();
    let opts = MinimizeOptions { restarts: 2, seed: 9, ..Default::default() };
    let a = minimize_energy(&adm, &pressure(0.02), &params, None, &opts).unwrap();
    let b = minimize_energy(&adm, &pressure(0.02), &params, None, &opts).unwrap();
    for ((_, ta), (_, tb)) in a.runs.iter().zip(&b.runs) {
        assert_eq!(ta.records, tb.records);
    }
    let mut ca = vec![];
    a.trace.write_csv(&mut ca).unwrap();
    let mut cb = vec![];
    b.trace.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert!(String::from_utf8(ca).unwrap().lines().count() > 1);
}

#[test]
fn flexible_plate_under_blowup_load_diverges() {
    let m = Arc::new(Mesh::build(&PlanarDomain::unit_square(), 6, 6).unwrap());
    let fs = FieldSpace::new(m);
    let adm = AdmissibleSpace::new(fs.clone(), &BoundaryConditionSet::clamped_on(vec![EdgeSelector::Left])).unwrap();
    let params = MaterialParams::new(1.0, 1.0, 0.1).unwrap();
    let w = counterexample_field(&fs, &Expr::parse("y1^2").unwrap()).unwrap();
    let family = blowup_family(&adm, &w, &params, &[1.0, 2.0, 4.0, 8.0]).unwrap();
    let opts = MinimizeOptions { restarts: 1, seed: 3, estimate_constants: false, ..Default::default() };
    let r = minimize_energy(&adm, &family.load, &params, None, &opts).unwrap();
    assert!(r.suspected_unbounded());
    let t = r.runs.iter().map(|(_, t)| t).find(|t| t.suspected_unbounded).unwrap();
    assert_eq!(t.status, MinimizeStatus::SuspectedUnbounded);
    let first = t.records[0].energy;
    let last = t.last().unwrap();
    assert!(last.norms.transverse_h2 > t.ceiling);
    assert!(last.energy < -10.0 * first.abs());
    let d = minimizing_sequence_diagnostics(t).unwrap();
    assert_eq!(d.behavior, SequenceBehavior::CoupledDivergence);
}

#[test]
fn options_are_validated() {
    let adm = cor2_space(2);
    let params = MaterialParams::new(1.0, 1.0, 1.0).unwrap();
    let bad = MinimizeOptions { gradient_tolerance: 0.0, ..Default::default() };
    assert!(minimize_energy(&adm, &LoadSpec::zero(), &params, None, &bad).is_err());
}
