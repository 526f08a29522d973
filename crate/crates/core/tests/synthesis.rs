mod common;

use acvar_core::linalg::quad_form;
use acvar_core::policy::{certify_control, h_hat};
use acvar_core::*;
use common::*;

#[test]
fn synthesized_controls_are_certified() {
    let mut rng = rng(21);
    for i in 0..2000 {
        let case = synthesis_case(&mut rng);
        let (u, cert) = synthesize_acvar_control(&case.x, case.s, case.t, &case.schedule, &case.problem)
            .unwrap_or_else(|e| panic!("case {i}: {e}"));
        assert!(cert.passed && cert.min_eig >= -cert.tolerance, "case {i}: {cert:?}");
        assert_eq!(u, &case.schedule.k[case.t] * &case.x);
    }
}

#[test]
fn control_does_not_depend_on_the_budget() {
    let mut rng = rng(22);
    for _ in 0..200 {
        let case = synthesis_case(&mut rng);
        let (u, _) = synthesize_acvar_control(&case.x, case.s, case.t, &case.schedule, &case.problem).unwrap();
        for s in [-100.0, 0.0, 1e-3, 1e6] {
            let (v, cert) = synthesize_acvar_control(&case.x, s, case.t, &case.schedule, &case.problem).unwrap();
            assert_eq!(u, v);
            assert!(cert.passed);
        }
    }
}

#[test]
fn certificate_slack_follows_the_budget_branch() {
    let mut rng = rng(23);
    for _ in 0..200 {
        let case = synthesis_case(&mut rng);
        let p_next = &case.schedule.p[case.t + 1];
        let h = h_hat(&case.x, case.s, &(p_next + &case.schedule.l), p_next, &case.problem).unwrap();
        let (_, cert) = synthesize_acvar_control(&case.x, case.s, case.t, &case.schedule, &case.problem).unwrap();
        assert!(cert.m22 >= h.max(0.0));
        assert!(cert.m22 - h.max(0.0) <= 1.0001 * policy::M22_SLACK * h.abs().max(1.0));
    }
}

#[test]
fn a_perturbed_control_loses_the_certificate() {
    let mut rng = rng(24);
    let mut rejected = 0;
    for _ in 0..200 {
        let case = synthesis_case(&mut rng);
        let u = &case.schedule.k[case.t] * &case.x;
        let push = uniform_vec(&mut rng, case.problem.m(), 1.0).normalize() * (10.0 * (1.0 + u.norm() + case.x.norm()));
        let cert = certify_control(&case.x, case.s, case.t, &(u + push), &case.schedule, &case.problem).unwrap();
        rejected += usize::from(!cert.passed);
    }
    assert!(rejected >= 190, "only {rejected} of 200 perturbed controls rejected");
}

#[test]
fn closed_form_identities_hold() {
    let mut rng = rng(25);
    let mut worst = IdentityErrors::default();
    for _ in 0..2000 {
        let case = synthesis_case(&mut rng);
        let gc = critical_gamma(&case.problem, 1e-10).unwrap();
        let leqr = leqr_recursion(&case.problem, 0.5 * gc).unwrap();
        worst = worst.max(identity_errors(&case, Some(&leqr)));
    }
    assert!(worst.worst() <= 1e-9, "{worst:?}");
}

#[test]
fn nullspace_projections_match_their_reduced_conditions() {
    let mut rng = rng(26);
    for i in 0..2000 {
        let case = synthesis_case(&mut rng);
        nullspace_equivalences(&case, &mut rng).unwrap_or_else(|e| panic!("case {i}: {e}"));
    }
}

#[test]
fn upper_bound_decreases_in_alpha() {
    let mut rng = rng(27);
    for _ in 0..200 {
        let case = synthesis_case(&mut rng);
        let mut previous = f64::INFINITY;
        for alpha in [0.01, 0.05, 0.1, 0.3, 0.5, 1.0] {
            let j = upper_bound_j(&case.x, alpha, &case.schedule).unwrap();
            assert!(j < previous);
            previous = j;
        }
        let value = quad_form(&case.schedule.p[0], &case.x);
        assert_eq!(upper_bound_j(&case.x, 1.0, &case.schedule).unwrap(), value + case.schedule.a[0]);
    }
}
