//! Cell-transmission simulation of a lane-drop bottleneck with CAVs acting as
//! moving bottlenecks, and a multiagent truncated rollout controller that
//! coordinates their speeds.

pub mod bottleneck;
pub mod cli;
pub mod coordinator;
pub mod error;
pub mod model;
pub mod mpc;
pub mod output;
pub mod plant;
pub mod scenario;

pub use bottleneck::{BoundaryFlows, CavId, FluxMode, Mover, SystemStep};
pub use error::{Error, Result};
pub use model::{DensityField, FundamentalDiagram, Grid};
pub use coordinator::{run, ControllerKind, PlannerConfig, RunOutput};
pub use plant::Scenario;
pub use scenario::{load_scenario, ScenarioConfig};
