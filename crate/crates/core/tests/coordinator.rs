use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use lanedrop::coordinator::{j_bounds, truncation_horizon, v_bounds, Coordinator};
use lanedrop::mpc::{Snapshot, Subproblem};
use lanedrop::plant::SimulationState;
use lanedrop::scenario::parse_scenario;
use lanedrop::{run, ControllerKind, Scenario};
use lanedrop_oracle::{exhaustive_joint, travel_time, Boundary, Car, Road};
use proptest::prelude::*;

/// Closed toy road of `rho.len()` cells with fixed CAVs and planner overrides.
fn toy(rho: &[f64], cavs: &[f64], planner: &str, steps: usize) -> Scenario {
    let text = format!(
        r#"{{"zone": {{"coordination_length_m": {}}}, "initial_density_vpm": {:?},
            "demand": {{"inflow_vph": 2000, "outflow_vph": 2000}},
            "cavs": {{"penetration": 0.0, "initial_positions_m": {:?}}},
            "planner": {planner}, "steps": {steps}}}"#,
        rho.len() as f64 * 300.0,
        rho,
        cavs
    );
    parse_scenario(&text).unwrap().build().unwrap()
}

fn road() -> Road {
    Road {
        v: 33.33,
        r: 0.12,
        lanes: 3,
        dx: 300.0,
        dt: 1.0,
    }
}

fn boundary(s: &Scenario, n: usize) -> Boundary {
    Boundary {
        inflow: (0..n).map(|k| s.inflow.at(k)).collect(),
        outflow: (0..n).map(|k| s.outflow.at(k)).collect(),
        capacity_drop: s.capacity_drop,
        queue: s.initial_queue,
    }
}

#[test]
fn truncation_horizon_examples() {
    assert_eq!(truncation_horizon(1.0, 1.0, 3.0, 2, 7), 2);
    assert_eq!(truncation_horizon(3.0, 1.0, 3.0, 2, 7), 7);
    assert_eq!(truncation_horizon(2.0, 1.0, 3.0, 2, 7), 5);
    assert_eq!(truncation_horizon(-5.0, 1.0, 3.0, 2, 7), 2);
    assert_eq!(truncation_horizon(9.0, 1.0, 3.0, 2, 7), 7);
    assert_eq!(truncation_horizon(2.0, 2.0, 2.0, 2, 7), 7);
    assert_eq!(truncation_horizon(2.0, 1.0, 3.0, 2, 1), 1);
}

#[test]
fn bound_examples() {
    let s = toy(&[0.0; 7], &[], "{}", 10);
    let c = Coordinator::new(&s).unwrap();
    let w = c.weights();
    assert_eq!(j_bounds(0.0, 0.0, w, c.config(), &s.fd, &s.grid, 7), (0.0, 0.0));
    assert_eq!(j_bounds(1.0, 12.0, w, c.config(), &s.fd, &s.grid, 7), (0.0, 12.0));
    let (lb, ub) = v_bounds(&[0.0; 7], w, c.config(), &s.fd, 7);
    assert_eq!(lb, 0.0);
    assert!(ub > 0.0);
    let (lb, ub2) = v_bounds(&[0.12; 7], w, c.config(), &s.fd, 7);
    assert_abs_diff_eq!(lb, 0.5 * 7.0 * 0.0144, epsilon = 1e-15);
    assert_eq!(ub, ub2);
    // The largest admissible V maps to a nonnegative finite J bound.
    let (lb, _) = j_bounds(ub, 1e9, w, c.config(), &s.fd, &s.grid, 7);
    assert!(lb.is_finite() && lb >= 0.0);
}

#[test]
fn no_cavs_is_a_no_op() {
    let s = toy(&[0.03; 7], &[], "{}", 10);
    let mut c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let (controls, report) = c.coordinate_step(&state, &s).unwrap();
    assert!(controls.is_empty());
    assert_eq!(report.eval_count, 0);
    assert!(report.converged);
}

#[test]
fn empty_road_has_zero_travel_time() {
    let text = r#"{"initial_density_vpm": [0.0], "demand": {"inflow_vph": 0},
        "cavs": {"penetration": 0, "initial_positions_m": []},
        "planner": {"controller": "none"}, "steps": 50}"#;
    let s = parse_scenario(text).unwrap().build().unwrap();
    let out = run(&s).unwrap();
    assert_eq!(out.metrics.total_vehicle_time, 0.0);
    assert_eq!(out.metrics.eval_count, 0);
}

#[test]
fn single_cav_full_rollout_is_one_control_solve() {
    let rho = [0.04, 0.055, 0.058];
    let planner = r#"{"controller": "rollout", "horizon_steps": 3, "speeds": 2, "p_max": 1}"#;
    let s = toy(&rho, &[350.0], planner, 10);
    let mut c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let (controls, report) = c.coordinate_step(&state, &s).unwrap();

    let snap = Snapshot::new(&state, &s, 3);
    let committed = BTreeMap::new();
    let sub = Subproblem {
        snapshot: &snap,
        me: 0,
        committed: &committed,
        weights: c.weights(),
        actions: c.actions(),
        limits: c.config().limits(),
    };
    let stab = sub.solve_stability(3, &[0.0; 3]).unwrap();
    let direct = sub.solve_control(f64::INFINITY, 3, &[0.0; 3], &stab, None).unwrap();
    assert_eq!(report.plans[&0], direct.mu);
    assert_eq!(controls[&0], direct.mu.0[0]);
    assert_eq!(report.iterations, 1);
    assert_eq!(*report.joint_j.last().unwrap(), direct.j_value);
}

#[test]
fn ties_order_by_id() {
    let s = toy(&[0.0; 3], &[100.0, 400.0], r#"{"horizon_steps": 2, "speeds": 2}"#, 10);
    let c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let snap = Snapshot::new(&state, &s, 2);
    let (order, _, _, records) = c.decision_order(&snap).unwrap();
    assert_eq!(order, vec![0, 1]);
    // Two CAVs: 2 + 1 ordering solves.
    assert_eq!(records.len(), 3);
}

#[test]
fn ordering_picks_the_lowest_cost_agent() {
    let rho = [0.05, 0.056, 0.058];
    let s = toy(&rho, &[100.0, 620.0], r#"{"horizon_steps": 3, "speeds": 2}"#, 10);
    let c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let snap = Snapshot::new(&state, &s, 3);
    let (order, plans, _, records) = c.decision_order(&snap).unwrap();
    let first: Vec<_> = records.iter().take(2).collect();
    let best = first.iter().map(|r| r.j).fold(f64::INFINITY, f64::min);
    let chosen = first.iter().find(|r| r.accepted).unwrap();
    assert_eq!(chosen.j, best);
    assert_eq!(order[0], chosen.cav);
    // The initial joint plan's cost, checked against the oracle rollout.
    let cars = [Car { id: 0, y: 100.0, u: 0.0 }, Car { id: 1, y: 620.0, u: 0.0 }];
    let j = travel_time(&rho, &cars, &[plans[&0].0.clone(), plans[&1].0.clone()], &boundary(&s, 3), &road(), 3);
    assert_abs_diff_eq!(records.last().unwrap().j, j, epsilon = 1e-9);
}

#[test]
fn centralized_matches_exhaustive_oracle() {
    let rho = [0.045, 0.055, 0.059];
    let planner = r#"{"controller": "centralized", "horizon_steps": 2, "speeds": 2}"#;
    let s = toy(&rho, &[250.0, 560.0], planner, 10);
    let mut c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let (_, report) = c.coordinate_step(&state, &s).unwrap();
    let cars = [Car { id: 0, y: 250.0, u: 0.0 }, Car { id: 1, y: 560.0, u: 0.0 }];
    let opt = exhaustive_joint(&rho, &cars, &boundary(&s, 2), &road(), 2, c.actions().values()).unwrap();
    assert_eq!(report.eval_count, opt.candidates as u64);
    assert_abs_diff_eq!(report.joint_j[0], opt.value, epsilon = 1e-9);
    assert_eq!(report.plans[&0].0, opt.plans[0]);
    assert_eq!(report.plans[&1].0, opt.plans[1]);
}

#[test]
fn centralized_refuses_large_instances() {
    let s = toy(&[0.03; 7], &[100.0, 400.0, 700.0], r#"{"controller": "centralized"}"#, 10);
    let mut c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let err = c.coordinate_step(&state, &s).unwrap_err();
    assert!(matches!(err, lanedrop::Error::Budget { .. }));
}

#[test]
fn horizon_shrinks_at_the_end() {
    let rho = [0.04, 0.05, 0.055, 0.058];
    let s = toy(&rho, &[100.0, 500.0], r#"{"horizon_steps": 4, "speeds": 2}"#, 6);
    let out = run(&s).unwrap();
    for rep in &out.reports {
        let cap = 4.min(6 - rep.k);
        assert_eq!(rep.horizon, cap);
        for r in &rep.records {
            assert!(r.m_j <= cap && r.m_v <= cap);
        }
    }
}

#[test]
fn full_horizon_accounting() {
    let rho = [0.04, 0.05, 0.058];
    let planner = r#"{"controller": "rollout", "horizon_steps": 3, "speeds": 2}"#;
    let s = toy(&rho, &[100.0, 500.0], planner, 4);
    let out = run(&s).unwrap();
    for rep in &out.reports {
        let n = rep.horizon as u32;
        let iter_evals: u64 = rep.records.iter().filter(|r| r.iteration > 0).map(|r| r.evaluations).sum();
        let solves = rep.records.iter().filter(|r| r.iteration > 0).count() as u64;
        assert_eq!(iter_evals, solves * 2 * 3u64.pow(n));
        assert_eq!(rep.eval_count, rep.records.iter().map(|r| r.evaluations).sum::<u64>());
    }
}

#[test]
fn exhaustive_optimum_sits_inside_the_travel_bounds() {
    let rho = [0.045, 0.055, 0.059];
    let planner = r#"{"horizon_steps": 2, "speeds": 2}"#;
    let s = toy(&rho, &[250.0], planner, 10);
    let c = Coordinator::new(&s).unwrap();
    let state = SimulationState::initial(&s).unwrap();
    let snap = Snapshot::new(&state, &s, 2);
    let committed = BTreeMap::new();
    let sub = Subproblem {
        snapshot: &snap,
        me: 0,
        committed: &committed,
        weights: c.weights(),
        actions: c.actions(),
        limits: c.config().limits(),
    };
    let stab = sub.solve_stability(2, &[0.0; 2]).unwrap();
    let (lb, ub) = j_bounds(stab.v_value, stab.j_value, c.weights(), c.config(), &s.fd, &s.grid, 2);
    let cars = [Car { id: 0, y: 250.0, u: 0.0 }];
    let opt = exhaustive_joint(&rho, &cars, &boundary(&s, 2), &road(), 2, c.actions().values()).unwrap();
    assert!(lb <= opt.value && opt.value <= ub, "{lb} {} {ub}", opt.value);
}

fn final_joint(s: &Scenario, controller: &str) -> (f64, Vec<f64>) {
    let mut scenario = s.clone();
    scenario.planner.controller = ControllerKind::from_name(controller).unwrap();
    let mut c = Coordinator::new(&scenario).unwrap();
    let state = SimulationState::initial(&scenario).unwrap();
    let (_, report) = c.coordinate_step(&state, &scenario).unwrap();
    (*report.joint_j.last().unwrap(), report.joint_j)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequential_beats_parallel(
        rho in prop::collection::vec(0.03..0.07f64, 3),
        y0 in 0.0..450.0f64,
        y1 in 450.0..899.0f64,
    ) {
        let planner = r#"{"horizon_steps": 2, "speeds": 3, "truncation": false, "p_max": 1}"#;
        let s = toy(&rho, &[y0, y1], planner, 10);
        let (seq, trail) = final_joint(&s, "rollout");
        let (par, _) = final_joint(&s, "dmpc");
        prop_assert!(seq <= par, "{} > {}", seq, par);
        prop_assert!(trail.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn iterations_never_raise_the_joint_cost(
        rho in prop::collection::vec(0.03..0.07f64, 4),
        y0 in 0.0..600.0f64,
        y1 in 600.0..1199.0f64,
        truncation in any::<bool>(),
    ) {
        let planner = format!(r#"{{"horizon_steps": 3, "speeds": 2, "truncation": {truncation}, "epsilon_veh_s": 1e-12}}"#);
        let s = toy(&rho, &[y0, y1], &planner, 10);
        let name = if truncation { "rollout-truncated" } else { "rollout" };
        let (_, trail) = final_joint(&s, name);
        prop_assert!(trail.windows(2).all(|w| w[1] <= w[0]), "{:?}", trail);
    }
}
