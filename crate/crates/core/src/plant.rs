//! Closed-loop ground truth: densities, CAV motion, entry and exit, boundary
//! profiles and run metrics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bottleneck::{density_step, BoundaryFlows, CavId, FluxMode, Kernel, Mover, SystemStep};
use crate::coordinator::PlannerConfig;
use crate::error::{Error, Result};
use crate::model::{DensityField, FundamentalDiagram, Grid};

/// Piecewise-constant profile over time steps, in veh/s.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    /// `(first step, value)` pairs with strictly increasing steps, the first at 0.
    segments: Vec<(usize, f64)>,
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Self {
            segments: vec![(0, value)],
        }
    }

    pub fn new(segments: Vec<(usize, f64)>) -> Result<Self> {
        match segments.first() {
            Some((0, _)) => {}
            _ => {
                return Err(Error::InvalidParameter(
                    "profile must start at step 0".into(),
                ))
            }
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidParameter(
                "profile steps must be strictly increasing".into(),
            ));
        }
        if let Some((_, v)) = segments.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "profile values must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[(usize, f64)] {
        &self.segments
    }

    /// Value in force at step `k`; the last segment extends forever.
    pub fn at(&self, k: usize) -> f64 {
        let i = self.segments.partition_point(|(s, _)| *s <= k);
        self.segments[i - 1].1
    }
}

/// A CAV entering the zone at step `k` at position `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub k: usize,
    pub y: f64,
}

/// How CAVs are drawn from the stream of inflowing vehicles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArrivalRule {
    /// Vehicle `n` is a CAV when `floor(n p) > floor((n-1) p)`.
    Thinning,
    /// Each vehicle is a CAV with probability `p`.
    Bernoulli { seed: u64 },
}

/// CAV arrivals at the upstream end of the zone for a penetration rate `p`.
/// Virtual vehicle `n` arrives in the step where the cumulative inflow first
/// reaches `n`.
pub fn arrival_schedule(
    inflow: &Profile,
    penetration: f64,
    steps: usize,
    dt: f64,
    rule: ArrivalRule,
) -> Result<Vec<Arrival>> {
    if !(0.0..=1.0).contains(&penetration) {
        return Err(Error::InvalidParameter(format!(
            "penetration must lie in [0, 1], got {penetration}"
        )));
    }
    let mut rng = match rule {
        ArrivalRule::Bernoulli { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        ArrivalRule::Thinning => None,
    };
    let mut out = Vec::new();
    let mut cumulative = 0.0;
    let mut n: u64 = 0;
    for k in 0..steps {
        cumulative += inflow.at(k) * dt;
        while (n + 1) as f64 <= cumulative + 1e-9 {
            n += 1;
            let is_cav = match rng.as_mut() {
                None => (n as f64 * penetration).floor() > ((n - 1) as f64 * penetration).floor(),
                Some(r) => r.gen::<f64>() < penetration,
            };
            if is_cav {
                out.push(Arrival { k, y: 0.0 });
            }
        }
    }
    Ok(out)
}

/// Everything the plant needs to run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub fd: FundamentalDiagram,
    pub grid: Grid,
    pub mode: FluxMode,
    /// Number of simulated steps `T`.
    pub steps: usize,
    pub inflow: Profile,
    /// Downstream discharge supply, veh/s.
    pub outflow: Profile,
    /// Fraction of the discharge lost while the last cell is congested.
    pub capacity_drop: f64,
    pub initial_density: DensityField,
    /// Vehicles already waiting upstream of the zone at step 0.
    pub initial_queue: f64,
    /// CAVs in the zone at step 0 (positions, m).
    pub initial_cavs: Vec<f64>,
    pub arrivals: Vec<Arrival>,
    pub planner: PlannerConfig,
}

impl Scenario {
    pub(crate) fn kernel(&self) -> Kernel {
        Kernel::new(&self.fd, &self.grid, self.mode)
    }

    /// Boundary flows at step `k` given the upstream queue and the density of
    /// the last cell.
    pub fn boundary(&self, k: usize, queue: f64, rho_last: f64) -> BoundaryFlows {
        let mut supply = self.outflow.at(k);
        if rho_last > self.fd.critical_density() {
            supply *= 1.0 - self.capacity_drop;
        }
        BoundaryFlows {
            inflow_demand: self.inflow.at(k) + queue / self.grid.dt(),
            outflow_supply: supply,
        }
    }

    /// Upstream queue after a step that admitted `admitted` veh/s.
    pub(crate) fn next_queue(&self, k: usize, queue: f64, admitted: f64) -> f64 {
        (queue + (self.inflow.at(k) - admitted) * self.grid.dt()).max(0.0)
    }

    /// Checks a command against `U ∪ {0}`.
    pub fn check_command(&self, id: CavId, u: f64) -> Result<()> {
        let p = &self.planner;
        let tol = 1e-9;
        if u == 0.0 || (u >= p.u_min - tol && u <= p.u_max + tol) {
            Ok(())
        } else {
            Err(Error::ControlOutOfRange {
                id,
                value: u,
                min: p.u_min,
                max: p.u_max,
            })
        }
    }
}

/// Speed actually driven by a CAV at `y` with `command`: the command capped by
/// the traffic speed ahead, or the traffic speed when there is no command.
/// "Ahead" is the CAV's own cell, or the next one in the last metre of a cell.
#[inline]
pub(crate) fn cav_speed(rho: &[f64], y: f64, command: f64, fd: &FundamentalDiagram, grid: &Grid) -> f64 {
    let n = rho.len();
    let j = ((y / grid.dx()).floor() as usize).min(n - 1);
    let ahead = if y >= (j + 1) as f64 * grid.dx() - 1.0 && j + 1 < n {
        rho[j + 1]
    } else {
        rho[j]
    };
    let traffic = fd.speed_raw(ahead);
    if command > 0.0 {
        command.min(traffic)
    } else {
        traffic
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavState {
    pub id: CavId,
    pub y: f64,
    pub commanded_u: f64,
    pub effective_speed: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    /// Total time spent in the zone, veh*s.
    pub total_vehicle_time: f64,
    /// Total distance driven in the zone, veh*m.
    pub vehicle_distance: f64,
    /// Vehicles discharged at the downstream end.
    pub throughput: f64,
    /// Candidate control sequences evaluated by the controller.
    pub eval_count: u64,
    /// Every truncation horizon recorded by the controller.
    pub per_step_m: Vec<usize>,
}

impl Metrics {
    /// `(avg_travel_time s, avg_speed m/s)`; absent when undefined.
    pub fn averages(&self) -> (Option<f64>, Option<f64>) {
        average_travel_metrics(self)
    }
}

pub fn average_travel_metrics(metrics: &Metrics) -> (Option<f64>, Option<f64>) {
    let tt = (metrics.throughput > 0.0).then(|| metrics.total_vehicle_time / metrics.throughput);
    let speed =
        (metrics.total_vehicle_time > 0.0).then(|| metrics.vehicle_distance / metrics.total_vehicle_time);
    (tt, speed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    pub k: usize,
    pub rho: DensityField,
    pub cavs: Vec<CavState>,
    /// Vehicles waiting upstream of the zone.
    pub queue: f64,
    pub metrics: Metrics,
    next_id: CavId,
    next_arrival: usize,
}

impl SimulationState {
    pub fn initial(scenario: &Scenario) -> Result<Self> {
        let fd = &scenario.fd;
        let mut cavs = Vec::new();
        for (i, &y) in scenario.initial_cavs.iter().enumerate() {
            if !(y >= 0.0 && y < scenario.grid.length()) {
                return Err(Error::config(
                    format!("initial_cavs_m[{i}]"),
                    format!("position {y} m outside [0, {})", scenario.grid.length()),
                ));
            }
            let speed = cav_speed(scenario.initial_density.as_slice(), y, 0.0, fd, &scenario.grid);
            cavs.push(CavState {
                id: i as CavId,
                y,
                commanded_u: 0.0,
                effective_speed: speed,
                active: true,
            });
        }
        Ok(Self {
            k: 0,
            rho: scenario.initial_density.clone(),
            next_id: cavs.len() as CavId,
            cavs,
            queue: scenario.initial_queue,
            metrics: Metrics::default(),
            next_arrival: 0,
        })
    }

    pub fn active_cavs(&self) -> impl Iterator<Item = &CavState> {
        self.cavs.iter().filter(|c| c.active)
    }
}

/// Appends the CAVs scheduled for the current step and drops retired ones.
pub fn spawn_and_retire(state: &mut SimulationState, scenario: &Scenario) -> Result<()> {
    state.cavs.retain(|c| c.active);
    while let Some(a) = scenario.arrivals.get(state.next_arrival) {
        if a.k > state.k {
            break;
        }
        state.next_arrival += 1;
        if a.k < state.k {
            continue;
        }
        if !(a.y >= 0.0 && a.y < scenario.grid.length()) {
            return Err(Error::config(
                "arrivals",
                format!("entry position {} m outside [0, {})", a.y, scenario.grid.length()),
            ));
        }
        let speed = cav_speed(state.rho.as_slice(), a.y, 0.0, &scenario.fd, &scenario.grid);
        state.cavs.push(CavState {
            id: state.next_id,
            y: a.y,
            commanded_u: 0.0,
            effective_speed: speed,
            active: true,
        });
        state.next_id += 1;
    }
    Ok(())
}

/// Result of one plant step alongside the new state.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub system: SystemStep,
    /// Flow admitted into the first cell, veh/s.
    pub inflow: f64,
    /// Flow discharged from the last cell, veh/s.
    pub outflow: f64,
}

/// Advances the plant one step with the given commands (missing CAVs get 0).
pub fn advance(
    state: &SimulationState,
    controls: &BTreeMap<CavId, f64>,
    scenario: &Scenario,
) -> Result<(SimulationState, StepOutcome)> {
    let fd = &scenario.fd;
    let grid = &scenario.grid;
    for (&id, &u) in controls {
        scenario.check_command(id, u)?;
    }
    let rho = state.rho.as_slice();
    let movers: Vec<Mover> = state
        .active_cavs()
        .map(|c| Mover {
            id: c.id,
            y: c.y,
            command: controls.get(&c.id).copied().unwrap_or(0.0),
        })
        .collect();
    let n = rho.len();
    let bnd = scenario.boundary(state.k, state.queue, rho[n - 1]);
    let (next_rho, system) = density_step(&state.rho, &movers, bnd, fd, grid, scenario.mode)?;
    let inflow = system.interface_flux[0];
    let outflow = system.interface_flux[n];

    let mut cavs = state.cavs.clone();
    for c in cavs.iter_mut().filter(|c| c.active) {
        let u = controls.get(&c.id).copied().unwrap_or(0.0);
        let speed = cav_speed(rho, c.y, u, fd, grid);
        c.commanded_u = u;
        c.effective_speed = speed;
        c.y += speed * grid.dt();
        if c.y >= grid.length() {
            c.active = false;
        }
    }

    let (dt, dx) = (grid.dt(), grid.dx());
    let mut metrics = state.metrics.clone();
    metrics.total_vehicle_time += rho.iter().sum::<f64>() * dt * dx;
    metrics.vehicle_distance += system.interface_flux[1..].iter().sum::<f64>() * dt * dx;
    metrics.throughput += outflow * dt;

    let next = SimulationState {
        k: state.k + 1,
        rho: next_rho,
        cavs,
        queue: scenario.next_queue(state.k, state.queue, inflow),
        metrics,
        next_id: state.next_id,
        next_arrival: state.next_arrival,
    };
    Ok((
        next,
        StepOutcome {
            system,
            inflow,
            outflow,
        },
    ))
}
