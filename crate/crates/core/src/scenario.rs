//! JSON scenario configuration. Every field is optional; absent fields take
//! the defaults of the lane-drop experiment. Units live in field names and
//! flows are given in veh/h.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bottleneck::FluxMode;
use crate::coordinator::{ControllerKind, DecisionOrdering, PlannerConfig};
use crate::error::{Error, Result};
use crate::model::{DensityField, FundamentalDiagram, Grid};
use crate::plant::{arrival_schedule, Arrival, ArrivalRule, Profile, Scenario};

const VPH: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dx_m: f64,
    /// Derived from the coordination length when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_cells: Option<usize>,
    pub dt_s: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dx_m: 300.0,
            num_cells: None,
            dt_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdConfig {
    pub free_speed_mps: f64,
    pub jam_density_vpm: f64,
    pub lanes_upstream: u32,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            free_speed_mps: 33.33,
            jam_density_vpm: 0.12,
            lanes_upstream: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoneConfig {
    /// Simulated, controlled stretch upstream of the lane drop.
    pub coordination_length_m: f64,
    /// Stretch downstream of the merge. Not simulated: it only sets the total
    /// road length reported alongside the results.
    pub free_drive_length_m: f64,
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self {
            coordination_length_m: 2100.0,
            free_drive_length_m: 900.0,
        }
    }
}

/// One segment of a piecewise-constant flow profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub from_step: usize,
    pub vph: f64,
}

/// A flow given either as one number or as segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FlowProfile {
    Constant(f64),
    Segments(Vec<Segment>),
}

impl FlowProfile {
    fn to_profile(&self, path: &str) -> Result<Profile> {
        let segs = match self {
            FlowProfile::Constant(v) => vec![(0, *v / VPH)],
            FlowProfile::Segments(s) => s.iter().map(|s| (s.from_step, s.vph / VPH)).collect(),
        };
        if let Some((0, _)) = segs.first() {
        } else {
            return Err(Error::config(path, "profile must start at step 0 (gap before the first segment)"));
        }
        Profile::new(segs).map_err(|e| Error::config(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    pub inflow_vph: FlowProfile,
    /// Downstream discharge supply; the merged lanes' capacity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outflow_vph: Option<FlowProfile>,
    /// Fraction of the discharge lost while the last cell is congested.
    pub capacity_drop: f64,
    pub initial_queue_veh: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            inflow_vph: FlowProfile::Constant(2000.0),
            outflow_vph: None,
            capacity_drop: 0.25,
            initial_queue_veh: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledCav {
    pub step: usize,
    pub position_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CavConfig {
    pub penetration: f64,
    /// Bernoulli draws from this seed; deterministic thinning when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Explicit arrivals replacing the penetration-based schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<ScheduledCav>>,
    /// CAVs already in the zone at step 0.
    pub initial_positions_m: Vec<f64>,
}

impl Default for CavConfig {
    fn default() -> Self {
        Self {
            penetration: 0.15,
            seed: None,
            schedule: None,
            initial_positions_m: vec![1300.0, 1500.0, 1700.0, 1900.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxModeConfig {
    Consistent,
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerConfig {
    None,
    Centralized,
    Dmpc,
    Rollout,
    RolloutTruncated,
}

impl From<ControllerConfig> for ControllerKind {
    fn from(c: ControllerConfig) -> Self {
        match c {
            ControllerConfig::None => ControllerKind::None,
            ControllerConfig::Centralized => ControllerKind::Centralized,
            ControllerConfig::Dmpc => ControllerKind::DmpcParallel,
            ControllerConfig::Rollout => ControllerKind::RolloutFull,
            ControllerConfig::RolloutTruncated => ControllerKind::RolloutTruncated,
        }
    }
}

impl From<ControllerKind> for ControllerConfig {
    fn from(c: ControllerKind) -> Self {
        match c {
            ControllerKind::None => ControllerConfig::None,
            ControllerKind::Centralized => ControllerConfig::Centralized,
            ControllerKind::DmpcParallel => ControllerConfig::Dmpc,
            ControllerKind::RolloutFull => ControllerConfig::Rollout,
            ControllerKind::RolloutTruncated => ControllerConfig::RolloutTruncated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingConfig {
    Fixed,
    Optimized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub horizon_steps: usize,
    pub m_min_steps: usize,
    pub speeds: usize,
    pub u_min_mps: f64,
    pub u_max_mps: f64,
    pub lambda: f64,
    pub epsilon_veh_s: f64,
    pub p_max: usize,
    pub ordering: OrderingConfig,
    pub truncation: bool,
    pub controller: ControllerConfig,
    pub q: f64,
    pub r: f64,
    pub delta_q: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_radius: Option<f64>,
    pub enumeration_budget: u64,
    pub beam_width: usize,
    pub centralized_budget: f64,
}

impl Default for PlannerSection {
    fn default() -> Self {
        PlannerConfig::default().into()
    }
}

impl From<PlannerConfig> for PlannerSection {
    fn from(p: PlannerConfig) -> Self {
        Self {
            horizon_steps: p.horizon,
            m_min_steps: p.m_min,
            speeds: p.speeds,
            u_min_mps: p.u_min,
            u_max_mps: p.u_max,
            lambda: p.lambda,
            epsilon_veh_s: p.epsilon,
            p_max: p.p_max,
            ordering: match p.ordering {
                DecisionOrdering::Fixed => OrderingConfig::Fixed,
                DecisionOrdering::Optimized => OrderingConfig::Optimized,
            },
            truncation: p.truncation,
            controller: p.controller.into(),
            q: p.q,
            r: p.r,
            delta_q: p.delta_q,
            terminal_radius: p.terminal_radius,
            enumeration_budget: p.enumeration_budget,
            beam_width: p.beam_width,
            centralized_budget: p.centralized_budget,
        }
    }
}

impl From<&PlannerSection> for PlannerConfig {
    fn from(p: &PlannerSection) -> Self {
        Self {
            horizon: p.horizon_steps,
            m_min: p.m_min_steps,
            speeds: p.speeds,
            u_min: p.u_min_mps,
            u_max: p.u_max_mps,
            lambda: p.lambda,
            epsilon: p.epsilon_veh_s,
            p_max: p.p_max,
            ordering: match p.ordering {
                OrderingConfig::Fixed => DecisionOrdering::Fixed,
                OrderingConfig::Optimized => DecisionOrdering::Optimized,
            },
            truncation: p.truncation,
            controller: p.controller.into(),
            q: p.q,
            r: p.r,
            delta_q: p.delta_q,
            terminal_radius: p.terminal_radius,
            enumeration_budget: p.enumeration_budget,
            beam_width: p.beam_width,
            centralized_budget: p.centralized_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub fd: FdConfig,
    pub zone: ZoneConfig,
    pub demand: DemandConfig,
    pub cavs: CavConfig,
    /// Initial density per cell, veh/m; uniform when one value is given.
    pub initial_density_vpm: Vec<f64>,
    pub steps: usize,
    pub flux_mode: FluxModeConfig,
    pub planner: PlannerSection,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            fd: FdConfig::default(),
            zone: ZoneConfig::default(),
            demand: DemandConfig::default(),
            cavs: CavConfig::default(),
            initial_density_vpm: vec![0.02, 0.02, 0.02, 0.02, 0.02, 0.04, 0.058],
            steps: 1000,
            flux_mode: FluxModeConfig::Consistent,
            planner: PlannerSection::default(),
        }
    }
}

/// Reads and parses a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
    let config = parse_scenario(&text)?;
    config.build()?;
    Ok(config)
}

/// Parses JSON text; errors carry the path of the offending field.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig> {
    let text = if text.trim().is_empty() { "{}" } else { text };
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "<root>".to_owned() } else { path };
        Error::config(path, e.into_inner().to_string())
    })
}

impl ScenarioConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario config serializes")
    }

    pub fn num_cells(&self) -> Result<usize> {
        let from_zone = self.zone.coordination_length_m / self.grid.dx_m;
        let derived = from_zone.round();
        let consistent = derived >= 1.0 && (from_zone - derived).abs() < 1e-9;
        match self.grid.num_cells {
            Some(n) if consistent && n as f64 != derived => Err(Error::config(
                "grid.num_cells",
                format!(
                    "{n} cells of {} m do not cover the {} m coordination zone",
                    self.grid.dx_m, self.zone.coordination_length_m
                ),
            )),
            Some(0) => Err(Error::config("grid.num_cells", "must be at least 1")),
            Some(n) => Ok(n),
            None if consistent => Ok(derived as usize),
            None => Err(Error::config(
                "zone.coordination_length_m",
                format!(
                    "{} m is not a whole number of {} m cells",
                    self.zone.coordination_length_m, self.grid.dx_m
                ),
            )),
        }
    }

    /// Total road length: coordination zone plus free drive, m.
    pub fn total_length_m(&self) -> f64 {
        self.zone.coordination_length_m + self.zone.free_drive_length_m
    }

    /// Validates the configuration and assembles the runnable scenario.
    pub fn build(&self) -> Result<Scenario> {
        let fd = FundamentalDiagram::new(
            self.fd.free_speed_mps,
            self.fd.jam_density_vpm,
            self.fd.lanes_upstream,
        )
        .map_err(|e| Error::config("fd", e.to_string()))?;
        let n = self.num_cells()?;
        let grid = Grid::new(n, self.grid.dx_m, self.grid.dt_s, &fd).map_err(|e| match e {
            Error::Cfl { .. } => Error::config("grid.dt_s", e.to_string()),
            other => Error::config("grid", other.to_string()),
        })?;
        if !(self.zone.free_drive_length_m >= 0.0) {
            return Err(Error::config("zone.free_drive_length_m", "must be nonnegative"));
        }
        let inflow = self.demand.inflow_vph.to_profile("demand.inflow_vph")?;
        let outflow = match &self.demand.outflow_vph {
            Some(p) => p.to_profile("demand.outflow_vph")?,
            None => {
                let lanes = f64::from(fd.lanes_upstream());
                Profile::constant(fd.capacity() * (lanes - 1.0) / lanes)
            }
        };
        if !(0.0..1.0).contains(&self.demand.capacity_drop) {
            return Err(Error::config(
                "demand.capacity_drop",
                format!("must lie in [0, 1), got {}", self.demand.capacity_drop),
            ));
        }
        if !(self.demand.initial_queue_veh >= 0.0 && self.demand.initial_queue_veh.is_finite()) {
            return Err(Error::config("demand.initial_queue_veh", "must be finite and nonnegative"));
        }
        let initial = match self.initial_density_vpm.len() {
            1 => vec![self.initial_density_vpm[0]; n],
            m if m == n => self.initial_density_vpm.clone(),
            m => {
                return Err(Error::config(
                    "initial_density_vpm",
                    format!("expected 1 or {n} values, got {m}"),
                ))
            }
        };
        let initial_density =
            DensityField::new(initial, &fd).map_err(|e| Error::config("initial_density_vpm", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.cavs.penetration) {
            return Err(Error::config(
                "cavs.penetration",
                format!("must lie in [0, 1], got {}", self.cavs.penetration),
            ));
        }
        let arrivals = match &self.cavs.schedule {
            Some(s) => {
                let mut a: Vec<Arrival> = s
                    .iter()
                    .map(|c| Arrival {
                        k: c.step,
                        y: c.position_m,
                    })
                    .collect();
                if let Some(i) = a.iter().position(|c| !(c.y >= 0.0 && c.y < grid.length())) {
                    return Err(Error::config(
                        format!("cavs.schedule[{i}].position_m"),
                        format!("outside [0, {})", grid.length()),
                    ));
                }
                a.sort_by_key(|c| c.k);
                a
            }
            None => {
                let rule = match self.cavs.seed {
                    Some(seed) => ArrivalRule::Bernoulli { seed },
                    None => ArrivalRule::Thinning,
                };
                arrival_schedule(&inflow, self.cavs.penetration, self.steps, grid.dt(), rule)?
            }
        };
        if let Some(i) = self
            .cavs
            .initial_positions_m
            .iter()
            .position(|y| !(*y >= 0.0 && *y < grid.length()))
        {
            return Err(Error::config(
                format!("cavs.initial_positions_m[{i}]"),
                format!("outside [0, {})", grid.length()),
            ));
        }
        let planner = PlannerConfig::from(&self.planner);
        planner.validate()?;
        Ok(Scenario {
            fd,
            grid,
            mode: match self.flux_mode {
                FluxModeConfig::Consistent => FluxMode::Consistent,
                FluxModeConfig::PaperLiteral => FluxMode::PaperLiteral,
            },
            steps: self.steps,
            inflow,
            outflow,
            capacity_drop: self.demand.capacity_drop,
            initial_density,
            initial_queue: self.demand.initial_queue_veh,
            initial_cavs: self.cavs.initial_positions_m.clone(),
            arrivals,
            planner,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_scenario("").unwrap();
        assert_eq!(c, ScenarioConfig::default());
        assert_eq!(parse_scenario("{}").unwrap(), c);
        let s = c.build().unwrap();
        assert_eq!(s.grid.dx(), 300.0);
        assert_eq!(s.grid.dt(), 1.0);
        assert_eq!(s.grid.num_cells(), 7);
        assert_eq!(s.fd.free_speed(), 33.33);
        assert_eq!(s.fd.jam_density(), 0.12);
        assert_eq!(s.planner.horizon, 7);
        assert_eq!(s.planner.lambda, 0.6);
        assert_eq!((s.planner.u_min, s.planner.u_max), (5.0, 33.33));
        assert_eq!((s.planner.q, s.planner.r), (0.5, 1.0));
        assert_eq!(c.total_length_m(), 3000.0);
        assert!((s.inflow.at(0) - 2000.0 / 3600.0).abs() < 1e-15);
    }

    #[test]
    fn cfl_violation_is_rejected_with_path() {
        let err = parse_scenario(r#"{"grid": {"dt_s": 10}}"#).unwrap().build().unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "grid.dt_s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = parse_scenario(r#"{"planner": {"lambda": "big"}}"#).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "planner.lambda"),
            other => panic!("{other:?}"),
        }
        let err = parse_scenario(r#"{"grid": {"dy_m": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn profile_gap_is_rejected() {
        let c = parse_scenario(r#"{"demand": {"inflow_vph": [{"from_step": 5, "vph": 1000}]}}"#).unwrap();
        match c.build().unwrap_err() {
            Error::Config { path, .. } => assert_eq!(path, "demand.inflow_vph"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn seeded_schedule_is_reproducible() {
        let text = r#"{"cavs": {"penetration": 0.15, "seed": 42}}"#;
        let a = parse_scenario(text).unwrap().build().unwrap();
        let b = parse_scenario(text).unwrap().build().unwrap();
        assert_eq!(a.arrivals, b.arrivals);
        assert!(!a.arrivals.is_empty());
    }

    #[test]
    fn echo_round_trips() {
        let text = r#"{"demand": {"inflow_vph": [{"from_step": 0, "vph": 1800}, {"from_step": 100, "vph": 2200}]},
                       "planner": {"controller": "dmpc", "terminal_radius": 0.3}, "flux_mode": "paper_literal"}"#;
        let once = parse_scenario(text).unwrap();
        let twice = parse_scenario(&once.to_json()).unwrap();
        assert_eq!(once, twice);
        let def = ScenarioConfig::default();
        assert_eq!(parse_scenario(&def.to_json()).unwrap(), def);
    }

    #[test]
    fn zone_and_cells_must_agree() {
        let c = parse_scenario(r#"{"grid": {"num_cells": 5}}"#).unwrap();
        assert!(c.build().is_err());
        let c = parse_scenario(r#"{"grid": {"num_cells": 5}, "zone": {"coordination_length_m": 1500}, "initial_density_vpm": [0.02], "cavs": {"initial_positions_m": []}}"#).unwrap();
        assert_eq!(c.build().unwrap().grid.num_cells(), 5);
    }
}
