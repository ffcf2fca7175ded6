use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use lanedrop::bottleneck::density_step;
use lanedrop::plant::{advance, arrival_schedule, spawn_and_retire, ArrivalRule, Profile, SimulationState};
use lanedrop::scenario::parse_scenario;
use lanedrop::{BoundaryFlows, CavId, DensityField, Error, FluxMode, Mover, Scenario};
use proptest::prelude::*;

fn scenario(json: &str) -> Scenario {
    parse_scenario(json).unwrap().build().unwrap()
}

fn run_open_loop(s: &Scenario, u: f64) -> Vec<SimulationState> {
    let mut state = SimulationState::initial(s).unwrap();
    let mut out = vec![state.clone()];
    for _ in 0..s.steps {
        spawn_and_retire(&mut state, s).unwrap();
        let controls: BTreeMap<CavId, f64> = state.active_cavs().map(|c| (c.id, u)).collect();
        state = advance(&state, &controls, s).unwrap().0;
        out.push(state.clone());
    }
    out
}

#[test]
fn empty_road_stays_empty() {
    let s = scenario(
        r#"{"initial_density_vpm": [0.0], "demand": {"inflow_vph": 0},
            "cavs": {"penetration": 0, "initial_positions_m": []}, "steps": 3}"#,
    );
    let st = SimulationState::initial(&s).unwrap();
    let (next, out) = advance(&st, &BTreeMap::new(), &s).unwrap();
    assert!(next.rho.as_slice().iter().all(|r| *r == 0.0));
    assert_eq!(next.metrics.total_vehicle_time, 0.0);
    assert_eq!(next.k, 1);
    assert_eq!(out.outflow, 0.0);
}

#[test]
fn free_cav_drives_at_its_command() {
    let s = scenario(
        r#"{"initial_density_vpm": [0.0], "demand": {"inflow_vph": 0},
            "cavs": {"penetration": 0, "initial_positions_m": [100]}, "steps": 3}"#,
    );
    let st = SimulationState::initial(&s).unwrap();
    let controls = BTreeMap::from([(0, 33.33)]);
    let (next, _) = advance(&st, &controls, &s).unwrap();
    assert_abs_diff_eq!(next.cavs[0].y, 133.33, epsilon = 1e-12);
    assert_eq!(next.cavs[0].effective_speed, 33.33);
}

#[test]
fn slow_cav_in_uniform_flow() {
    let s = scenario(
        r#"{"initial_density_vpm": [0.03], "demand": {"inflow_vph": 2700, "outflow_vph": 2700},
            "cavs": {"penetration": 0, "initial_positions_m": [400]}, "steps": 3}"#,
    );
    let st = SimulationState::initial(&s).unwrap();
    let controls = BTreeMap::from([(0, 10.0)]);
    let (next, _) = advance(&st, &controls, &s).unwrap();
    assert_abs_diff_eq!(next.cavs[0].y, 410.0, epsilon = 1e-12);
    let bnd = BoundaryFlows {
        inflow_demand: 0.75,
        outflow_supply: 0.75,
    };
    let mover = Mover {
        id: 0,
        y: 400.0,
        command: 10.0,
    };
    let (rho, _) = density_step(&st.rho, &[mover], bnd, &s.fd, &s.grid, FluxMode::Consistent).unwrap();
    assert_eq!(next.rho, rho);
}

#[test]
fn out_of_range_commands_are_rejected() {
    let s = scenario(r#"{"cavs": {"penetration": 0, "initial_positions_m": [100]}, "steps": 3}"#);
    let st = SimulationState::initial(&s).unwrap();
    let err = advance(&st, &BTreeMap::from([(0, 2.0)]), &s).unwrap_err();
    assert!(matches!(err, Error::ControlOutOfRange { id: 0, .. }));
    assert!(advance(&st, &BTreeMap::from([(0, 40.0)]), &s).is_err());
    assert!(advance(&st, &BTreeMap::from([(0, 0.0)]), &s).is_ok());
}

#[test]
fn cavs_leaving_the_zone_retire() {
    let s = scenario(
        r#"{"initial_density_vpm": [0.0], "demand": {"inflow_vph": 0},
            "cavs": {"penetration": 0, "initial_positions_m": [2090]}, "steps": 3}"#,
    );
    let states = run_open_loop(&s, 20.0);
    assert!(!states[1].cavs[0].active);
    assert!(states[2].cavs.is_empty());
}

#[test]
fn empty_schedule_changes_nothing() {
    let s = scenario(r#"{"cavs": {"penetration": 0, "initial_positions_m": []}, "steps": 3}"#);
    let mut st = SimulationState::initial(&s).unwrap();
    let before = st.clone();
    spawn_and_retire(&mut st, &s).unwrap();
    assert_eq!(st, before);
}

#[test]
fn scheduled_arrival_appears_on_its_step() {
    let s = scenario(
        r#"{"cavs": {"schedule": [{"step": 5, "position_m": 0}], "initial_positions_m": []}, "steps": 10}"#,
    );
    let states = run_open_loop(&s, 0.0);
    for (k, st) in states.iter().enumerate().take(6) {
        assert!(st.cavs.is_empty(), "step {k}");
    }
    assert_eq!(states[6].cavs.len(), 1);
    assert_eq!(states[6].cavs[0].id, 0);
}

#[test]
fn bad_arrival_position_is_a_config_error() {
    let text = r#"{"cavs": {"schedule": [{"step": 1, "position_m": 5000}], "initial_positions_m": []}, "steps": 3}"#;
    let err = parse_scenario(text).unwrap().build().unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
}

#[test]
fn default_arrival_count() {
    let s = scenario("{}");
    let expected = 0.15 * 2000.0 / 3600.0 * 1000.0;
    assert!((s.arrivals.len() as f64 - expected).abs() <= 1.0, "{}", s.arrivals.len());
    let seeded = arrival_schedule(&Profile::constant(2000.0 / 3600.0), 0.15, 1000, 1.0, ArrivalRule::Bernoulli { seed: 7 }).unwrap();
    let again = arrival_schedule(&Profile::constant(2000.0 / 3600.0), 0.15, 1000, 1.0, ArrivalRule::Bernoulli { seed: 7 }).unwrap();
    assert_eq!(seeded, again);
}

#[test]
fn zero_density_gives_absent_metrics() {
    let s = scenario(
        r#"{"initial_density_vpm": [0.0], "demand": {"inflow_vph": 0},
            "cavs": {"penetration": 0, "initial_positions_m": []}, "steps": 20}"#,
    );
    let last = run_open_loop(&s, 0.0).pop().unwrap();
    assert_eq!(last.metrics.averages(), (None, None));
}

#[test]
fn steady_free_flow_speed() {
    let s = scenario(
        r#"{"initial_density_vpm": [0.03], "demand": {"inflow_vph": 2700, "outflow_vph": 2700, "capacity_drop": 0},
            "cavs": {"penetration": 0, "initial_positions_m": []}, "steps": 200}"#,
    );
    let last = run_open_loop(&s, 0.0).pop().unwrap();
    let (tt, speed) = last.metrics.averages();
    assert_abs_diff_eq!(speed.unwrap(), 25.0, epsilon = 0.1);
    assert_abs_diff_eq!(tt.unwrap(), 2100.0 / 25.0, epsilon = 1.0);
}

#[test]
fn uncommanded_run_equals_cav_free_run() {
    let with = scenario(r#"{"steps": 200}"#);
    let without = scenario(r#"{"steps": 200, "cavs": {"penetration": 0, "initial_positions_m": []}}"#);
    assert!(!with.arrivals.is_empty());
    let a = run_open_loop(&with, 0.0);
    let b = run_open_loop(&without, 0.0);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.rho, y.rho);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn positions_advance_within_limits(u_idx in 0usize..7, inflow in 500.0..3000.0f64) {
        let s = scenario(&format!(r#"{{"steps": 120, "demand": {{"inflow_vph": {inflow}}}}}"#));
        let u = if u_idx == 0 { 0.0 } else { 5.0 + (u_idx - 1) as f64 * (33.33 - 5.0) / 5.0 };
        let states = run_open_loop(&s, u);
        for w in states.windows(2) {
            for c in w[1].cavs.iter() {
                if let Some(p) = w[0].cavs.iter().find(|p| p.id == c.id) {
                    let dy = c.y - p.y;
                    prop_assert!(dy >= 0.0);
                    prop_assert!(dy <= u.max(33.33) * s.grid.dt() + 1e-12);
                }
            }
        }
        // Metrics re-summation and monotonicity.
        let resum: f64 = states[..states.len() - 1]
            .iter()
            .map(|st| st.rho.as_slice().iter().sum::<f64>() * s.grid.dt() * s.grid.dx())
            .sum();
        let last = &states.last().unwrap().metrics;
        prop_assert!((last.total_vehicle_time - resum).abs() <= 1e-9 * resum.max(1.0));
        for w in states.windows(2) {
            prop_assert!(w[1].metrics.total_vehicle_time >= w[0].metrics.total_vehicle_time);
            prop_assert!(w[1].metrics.vehicle_distance >= w[0].metrics.vehicle_distance);
            prop_assert!(w[1].metrics.throughput >= w[0].metrics.throughput);
        }
    }
}

#[test]
fn density_stays_valid() {
    let s = scenario(r#"{"steps": 300, "demand": {"inflow_vph": 4000}}"#);
    for st in run_open_loop(&s, 5.0) {
        assert!(DensityField::new(st.rho.as_slice().to_vec(), &s.fd).is_ok());
    }
}
