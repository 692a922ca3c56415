use std::sync::Arc;

use diagdim_core::cover::{brick_cover, verify_cover};
use diagdim_core::extract::extract_from_witness;
use diagdim_core::space::{generate_space, FiniteMetricSpace, GridSpec, Metric};
use diagdim_core::witness::{build_upper_witness, check_witness, direct_sum, DiagDimWitness};

fn witness(spec: &GridSpec, r: f64, side: f64, m: usize) -> DiagDimWitness {
    let space: Arc<FiniteMetricSpace> = Arc::new(generate_space(spec).unwrap());
    let cover = brick_cover(&space, r, side).unwrap();
    build_upper_witness(space, &cover, r, m).unwrap().with_eps(1.0).unwrap()
}

#[test]
fn planar_grid_round_trip() {
    let w = witness(&GridSpec::grid(&[16, 16], Metric::Linf), 1.0, 8.0, 1);
    assert_eq!(w.d, 2);
    let rep = check_witness(&w, 1e-9).unwrap();
    for c in rep.iter().filter(|c| c.condition != 2) {
        assert!(c.verdict, "{} fails with {}", c.name, c.worst);
    }
    let (_, pts, ex) = extract_from_witness(&w, 1.0).unwrap();
    assert!(pts.round_trip_ok());
    assert!(ex.passes());
    assert!(ex.cover.colors() <= 3);
    assert!(verify_cover(&ex.cover, &w.space, 1.0).passes());
}

#[test]
fn json_keeps_the_verdicts() {
    let w = witness(&GridSpec::interval(40), 2.0, 8.0, 2);
    let back = DiagDimWitness::from_json(&w.to_json().unwrap(), w.space.clone()).unwrap();
    let a = check_witness(&w, 1e-9).unwrap();
    let b = check_witness(&back, 1e-9).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.verdict, y.verdict);
        assert!((x.worst - y.worst).abs() <= 1e-12);
    }
}

#[test]
fn direct_sum_extracts_on_both_halves() {
    let w1 = witness(&GridSpec::interval(30), 1.0, 4.0, 1);
    let w2 = witness(&GridSpec::interval(20), 1.0, 3.0, 1);
    let sum = direct_sum(&w1, &w2).unwrap();
    assert_eq!(sum.space.len(), 50);
    let (_, _, ex) = extract_from_witness(&sum, 1.0).unwrap();
    assert!(ex.passes());
    let ids: Vec<&str> = ex
        .cover
        .families
        .iter()
        .flatten()
        .flatten()
        .map(|&x| sum.space.id(x).0.as_str())
        .collect();
    assert!(ids.iter().any(|s| s.starts_with("L:")));
    assert!(ids.iter().any(|s| s.starts_with("R:")));
}
