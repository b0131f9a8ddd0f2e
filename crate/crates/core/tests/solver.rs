use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use risk_ctmdp::fixtures::{
    bounded_certificate, random_small_model, two_state_certificate, two_state_model,
};
use risk_ctmdp::hjb::{
    enclosure_violations, extract_policy, solve_hjb, solve_truncated, solve_truncated_from,
    HjbOptions, PicardOptions, PolicyField, Schedules, SolveError, ThetaGrid, ValueField,
};
use risk_ctmdp::model::{truncate, ActionSet, ControlledChain, CostRate, CtmdpModel, StateSpace};
use risk_ctmdp::verify::oracle_fixed_policy;

fn opts() -> HjbOptions {
    HjbOptions {
        tol: 1e-4,
        ..Default::default()
    }
}

fn schedules() -> Schedules {
    Schedules {
        delta_list: (0..=6).map(|k| 0.064 * 0.5f64.powi(k)).collect(),
        n_list: vec![2.0, 4.0],
    }
}

#[test]
fn independent_initializations_reach_the_same_fixed_point() {
    let m = two_state_model();
    let mt = truncate(&m, &two_state_certificate(), 4.0).unwrap();
    let grid = ThetaGrid::uniform(101).unwrap().truncated(0.02, 1.25).unwrap();
    let opts = PicardOptions::default();
    let (a, _) = solve_truncated(&mt, &grid, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let top = (4.0f64).exp();
    for _ in 0..3 {
        let init = ValueField::from_fn(&grid, 2, |_, _| rng.gen_range(1.0..top));
        let (b, _) = solve_truncated_from(&mt, init, &opts).unwrap();
        assert!(a.sup_diff(&b) <= 1e-9 * a.max_abs(), "{}", a.sup_diff(&b));
    }
}

#[test]
fn random_models_stay_enclosed_and_monotone() {
    let grid = ThetaGrid::uniform(101).unwrap();
    for seed in 0..4 {
        let m = random_small_model(seed, 5, 3, 3.0, 2.0, 1.5).unwrap();
        let cert = bounded_certificate(&m);
        let (phi, rep) = solve_hjb(&m, &cert, &schedules(), &grid, &opts()).unwrap();
        assert!(rep.monitors_pass(1e-8), "{:?}", rep.monitors);
        assert_eq!(phi.theta_monotone_violation(), 0.0);
        let v0 = cert.v0_values(m.space()).unwrap();
        assert_eq!(enclosure_violations(&phi, &cert, m.alpha(), &v0, 0.0), 0);
    }
}

#[test]
fn higher_cost_gives_higher_value() {
    let grid = ThetaGrid::uniform(101).unwrap();
    let m = random_small_model(9, 4, 2, 2.0, 1.0, 1.0).unwrap();
    let raised = CostRate::from_fn(m.actions(), |x, a| m.cost(x, a) + 0.25).unwrap();
    let m2 = m.with_cost(raised).unwrap();
    let cert = bounded_certificate(&m2);
    let (lo, _) = solve_hjb(&m, &cert, &schedules(), &grid, &opts()).unwrap();
    let (hi, _) = solve_hjb(&m2, &cert, &schedules(), &grid, &opts()).unwrap();
    for (a, b) in lo.values().iter().zip(hi.values()) {
        assert!(a <= b);
    }
}

#[test]
fn single_action_solve_matches_linear_integrator() {
    let actions = ActionSet::uniform(3, 1).unwrap();
    let rows = vec![
        vec![-1.0, 0.6, 0.4],
        vec![0.5, -0.5, 0.0],
        vec![0.2, 0.8, -1.0],
    ];
    let cost = CostRate::new(&actions, vec![0.3, 0.9, 0.1]).unwrap();
    let m = CtmdpModel::from_rate_rows(StateSpace::finite(3), actions, rows, cost, 1.0).unwrap();
    let cert = bounded_certificate(&m);
    let mt = truncate(&m, &cert, 3.0).unwrap();
    let grid = ThetaGrid::uniform(201).unwrap().truncated(0.01, 1.25).unwrap();
    let (phi, _) = solve_truncated(&mt, &grid, &PicardOptions::default()).unwrap();
    let policy = PolicyField::new(grid.nodes().to_vec(), 3, vec![0; 3 * grid.len()]).unwrap();
    let u = oracle_fixed_policy(&mt, &policy, &grid, 1e-8).unwrap();
    assert!(u.sup_diff(&phi) < 1e-4, "{}", u.sup_diff(&phi));
}

#[test]
fn minimizer_is_admissible_and_breaks_ties_low() {
    let actions = ActionSet::uniform(2, 3).unwrap();
    let row0 = vec![-1.0, 1.0];
    let row1 = vec![1.0, -1.0];
    let rows = vec![row0.clone(), row0.clone(), row0, row1.clone(), row1.clone(), row1];
    let cost = CostRate::new(&actions, vec![0.5; 6]).unwrap();
    let m = CtmdpModel::from_rate_rows(StateSpace::finite(2), actions, rows, cost, 1.0).unwrap();
    let cert = bounded_certificate(&m);
    let grid = ThetaGrid::uniform(51).unwrap();
    let (phi, _) = solve_hjb(&m, &cert, &schedules(), &grid, &HjbOptions::default()).unwrap();
    let p = extract_policy(&phi, &m);
    assert!(p.is_admissible(&m));
    for i in 0..grid.len() {
        assert_eq!((p.action(i, 0), p.action(i, 1)), (0, 0));
    }
}

#[test]
fn rejects_bad_schedules_and_kernels() {
    let m = two_state_model();
    let cert = two_state_certificate();
    let grid = ThetaGrid::uniform(51).unwrap();
    let bad = Schedules {
        delta_list: vec![0.1, 0.1],
        n_list: vec![2.0],
    };
    assert!(matches!(
        solve_hjb(&m, &cert, &bad, &grid, &HjbOptions::default()),
        Err(SolveError::InvalidSchedule(_))
    ));

    let actions = ActionSet::uniform(2, 1).unwrap();
    let leaky = CtmdpModel::from_rate_rows(
        StateSpace::finite(2),
        actions.clone(),
        vec![vec![-1.0, 0.5], vec![0.5, -0.5]],
        CostRate::new(&actions, vec![0.1, 0.1]).unwrap(),
        1.0,
    )
    .unwrap();
    assert!(matches!(
        solve_hjb(&leaky, &bounded_certificate(&leaky), &schedules(), &grid, &HjbOptions::default()),
        Err(SolveError::InvalidKernel(_))
    ));
}
