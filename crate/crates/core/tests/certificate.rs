use approx::assert_relative_eq;
use proptest::prelude::*;

use risk_ctmdp::fixtures::{gaussian_solve_fixture, two_state_certificate, two_state_model};
use risk_ctmdp::lyapunov::{certify_gaussian, check_certificate, CertificateError};

#[test]
fn gaussian_rate_scale_limit() {
    // alpha / (3780 * 4) for sigma = 1
    let limit = 1.0 / 15120.0;
    assert_relative_eq!(limit, 6.613756613756614e-5, max_relative = 1e-15);
    assert!(certify_gaussian(1.0, 0.999 * limit, 0.5, 1.0).is_ok());
    let err = certify_gaussian(1.0, 1.001 * limit, 0.5, 1.0).unwrap_err();
    assert!(matches!(err, CertificateError::GaussianPrecondition(_)));
}

#[test]
fn gaussian_constants_at_reference_point() {
    let c = certify_gaussian(1.0, 6e-5, 0.5, 1.0).unwrap();
    assert_relative_eq!(c.rho2, 0.9072, max_relative = 1e-14);
    assert_relative_eq!(c.rho0, 6e-5, max_relative = 1e-15);
    assert_eq!(c.m1, 2.0);
    assert_eq!(c.b1, 1.0);
}

#[test]
fn too_small_rate_bound_is_reported_per_node() {
    let m = two_state_model();
    let mut c = two_state_certificate();
    c.m0 = 1.5;
    let r = check_certificate(&m, &c, 1e-8).unwrap();
    let v: Vec<_> = r.of_kind("rate_bound").collect();
    assert_eq!(v.len(), 1);
    assert_eq!((v[0].state, v[0].action), (0, Some(1)));
    assert_relative_eq!(v[0].margin(), -0.5);
}

#[test]
fn cost_bound_violation_is_reported() {
    let m = two_state_model();
    let mut c = two_state_certificate();
    c.l0 = 0.5;
    let r = check_certificate(&m, &c, 1e-8).unwrap();
    let states: Vec<_> = r.of_kind("cost_bound").map(|v| (v.state, v.action)).collect();
    assert_eq!(states, vec![(0, Some(0)), (0, Some(1))]);
}

#[test]
fn gaussian_fixture_certifies_for_several_discount_rates() {
    for alpha in [1.0, 2.0, 4.0] {
        let (m, c) = gaussian_solve_fixture(alpha).unwrap();
        assert!(check_certificate(&m, &c, 1e-5).unwrap().is_empty());
    }
}

proptest! {
    #[test]
    fn value_bound_is_monotone(
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
        v1 in 1.0f64..100.0,
        v2 in 1.0f64..100.0,
    ) {
        let c = certify_gaussian(1.0, 6e-5, 0.5, 1.0).unwrap();
        let (ta, tb) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (va, vb) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
        prop_assert!(c.value_upper_bound(1.0, ta, va) <= c.value_upper_bound(1.0, tb, va));
        prop_assert!(c.value_upper_bound(1.0, ta, va) <= c.value_upper_bound(1.0, ta, vb));
        prop_assert!(c.value_upper_bound(1.0, ta, va) >= 1.0);
    }
}
