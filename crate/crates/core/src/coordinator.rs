//! Multiagent truncated rollout: decision ordering, agent-by-agent iterations
//! with adaptive truncation, objective bounds, baselines and the closed loop.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::bottleneck::CavId;
use crate::error::{Error, Result};
use crate::model::{DensityField, FundamentalDiagram, Grid};
use crate::mpc::{
    contraction_eta, linearize, ActionSet, ControlSequence, PlanResult, SearchLimits, Snapshot,
    Subproblem, Weights,
};
use crate::plant::{advance, spawn_and_retire, Metrics, Scenario, SimulationState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionOrdering {
    /// Ascending id with the warm-start plans as the initial solution.
    Fixed,
    /// Greedy construction, lowest travel cost first.
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    None,
    Centralized,
    DmpcParallel,
    RolloutFull,
    RolloutTruncated,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::None => "none",
            ControllerKind::Centralized => "centralized",
            ControllerKind::DmpcParallel => "dmpc",
            ControllerKind::RolloutFull => "rollout",
            ControllerKind::RolloutTruncated => "rollout-truncated",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "none" => ControllerKind::None,
            "centralized" => ControllerKind::Centralized,
            "dmpc" | "dmpc_parallel" => ControllerKind::DmpcParallel,
            "rollout" | "rollout_full" => ControllerKind::RolloutFull,
            "rollout-truncated" | "rollout_truncated" => ControllerKind::RolloutTruncated,
            _ => return None,
        })
    }

    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::None,
        ControllerKind::Centralized,
        ControllerKind::DmpcParallel,
        ControllerKind::RolloutFull,
        ControllerKind::RolloutTruncated,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    /// Prediction horizon `N`, steps.
    pub horizon: usize,
    pub m_min: usize,
    /// Number of speeds `S` in the action set (plus "no action").
    pub speeds: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub lambda: f64,
    /// Termination threshold on the change of the last agent's cost, veh*s.
    pub epsilon: f64,
    pub p_max: usize,
    pub ordering: DecisionOrdering,
    /// Only read by the parallel baseline; the rollout kinds fix it.
    pub truncation: bool,
    pub controller: ControllerKind,
    pub q: f64,
    pub r: f64,
    pub delta_q: f64,
    pub terminal_radius: Option<f64>,
    pub enumeration_budget: u64,
    pub beam_width: usize,
    pub centralized_budget: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 7,
            m_min: 2,
            speeds: 6,
            u_min: 5.0,
            u_max: 33.33,
            lambda: 0.6,
            epsilon: 1e-3,
            p_max: 5,
            ordering: DecisionOrdering::Optimized,
            truncation: true,
            controller: ControllerKind::RolloutTruncated,
            q: 0.5,
            r: 1.0,
            delta_q: 0.05,
            terminal_radius: None,
            enumeration_budget: 49,
            beam_width: 7,
            centralized_budget: 1e7,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("planner.{field}"), msg));
        if self.horizon == 0 {
            return bad("horizon_steps", "must be at least 1".into());
        }
        if self.m_min == 0 || self.m_min > self.horizon {
            return bad("m_min_steps", format!("must lie in [1, {}], got {}", self.horizon, self.m_min));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda", format!("must lie in [0, 1), got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon_veh_s", format!("must be positive, got {}", self.epsilon));
        }
        if self.p_max == 0 {
            return bad("p_max", "must be at least 1".into());
        }
        if self.speeds == 0 {
            return bad("speeds", "must be at least 1".into());
        }
        if !(self.u_min > 0.0 && self.u_min <= self.u_max) {
            return bad(
                "u_min_mps",
                format!("need 0 < u_min <= u_max, got [{}, {}]", self.u_min, self.u_max),
            );
        }
        for (f, v) in [("q", self.q), ("r", self.r), ("delta_q", self.delta_q)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(f, format!("must be positive, got {v}"));
            }
        }
        if self.beam_width == 0 {
            return bad("beam_width", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn actions(&self) -> Result<ActionSet> {
        ActionSet::new(self.u_min, self.u_max, self.speeds)
    }

    pub fn limits(&self) -> SearchLimits {
        SearchLimits {
            enumeration_budget: self.enumeration_budget,
            beam_width: self.beam_width,
            terminal_radius: self.terminal_radius,
        }
    }

    fn truncating(&self) -> bool {
        match self.controller {
            ControllerKind::RolloutTruncated => true,
            ControllerKind::RolloutFull => false,
            _ => self.truncation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub j_lb: f64,
    pub j_ub: f64,
    pub v_lb: f64,
    pub v_ub: f64,
}

/// `(J_LB, J_UB)` from the stability solution's costs.
pub fn j_bounds(
    v_stability: f64,
    j_stability: f64,
    weights: &Weights,
    config: &PlannerConfig,
    fd: &FundamentalDiagram,
    grid: &Grid,
    horizon: usize,
) -> (f64, f64) {
    let cells = grid.num_cells() as f64;
    let r2 = fd.jam_density() * fd.jam_density();
    let bracket = v_stability
        - horizon as f64 * weights.r * config.u_max * config.u_max
        - cells * weights.h_max * r2;
    let lb = (grid.dx() * grid.dt() / weights.q * bracket).max(0.0);
    (lb, j_stability)
}

/// `(V_LB, V_UB)` at the current density.
pub fn v_bounds(
    rho: &[f64],
    weights: &Weights,
    config: &PlannerConfig,
    fd: &FundamentalDiagram,
    horizon: usize,
) -> (f64, f64) {
    let cells = rho.len() as f64;
    let r2 = fd.jam_density() * fd.jam_density();
    let lb = weights.q * rho.iter().map(|x| x * x).sum::<f64>();
    let ub = cells * weights.h_max * r2
        + horizon as f64 * (weights.q * cells * r2 + weights.r * config.u_max * config.u_max);
    (lb, ub)
}

/// Truncation horizon interpolated between `m_min` and `n` by where `value`
/// sits in `[lb, ub]`, rounded half away from zero.
pub fn truncation_horizon(value: f64, lb: f64, ub: f64, m_min: usize, n: usize) -> usize {
    let m_min = m_min.min(n);
    if !(ub > lb) {
        return n;
    }
    let x = (value.clamp(lb, ub) - lb) / (ub - lb);
    let raw = m_min as f64 + (n - m_min) as f64 * x;
    (raw.round() as usize).clamp(m_min, n)
}

/// One agent's solve inside a coordination step.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveRecord {
    /// 0 for decision ordering, then the iteration number.
    pub iteration: usize,
    pub cav: CavId,
    pub m_j: usize,
    pub m_v: usize,
    pub j: f64,
    pub v: f64,
    pub j_stability: f64,
    pub v_stability: f64,
    pub eta: f64,
    pub bounds: Bounds,
    pub evaluations: u64,
    /// No enumerated candidate met the contraction constraint.
    pub fallback: bool,
    /// Whether this solve's plan became part of the joint solution.
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub k: usize,
    pub order: Vec<CavId>,
    pub iterations: usize,
    pub converged: bool,
    /// Joint travel cost of the initial solution and after each iteration.
    pub joint_j: Vec<f64>,
    pub deltas: Vec<f64>,
    pub records: Vec<SolveRecord>,
    pub eval_count: u64,
    pub horizon: usize,
    /// Final plan of every CAV.
    pub plans: BTreeMap<CavId, ControlSequence>,
}

#[derive(Debug, Clone)]
struct Memory {
    plan: ControlSequence,
    v_star: f64,
}

/// Stateful controller: keeps each CAV's last accepted plan and its `V`.
#[derive(Debug, Clone)]
pub struct Coordinator {
    config: PlannerConfig,
    actions: ActionSet,
    weights: Weights,
    memory: BTreeMap<CavId, Memory>,
}

struct AgentOutcome {
    plan: PlanResult,
    stability: PlanResult,
    record: SolveRecord,
}

impl Coordinator {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let config = scenario.planner.clone();
        config.validate()?;
        let lin = linearize(&scenario.fd, &scenario.grid, config.q, config.r)?;
        let weights = Weights::new(config.q, config.r, config.delta_q, &lin)?;
        Ok(Self {
            actions: config.actions()?,
            config,
            weights,
            memory: BTreeMap::new(),
        })
    }

    pub fn with_weights(config: PlannerConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            actions: config.actions()?,
            config,
            weights,
            memory: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut PlannerConfig {
        &mut self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn actions(&self) -> &ActionSet {
        &self.actions
    }

    /// The last accepted `V` of a CAV, if it has planned before.
    pub fn v_star(&self, id: CavId) -> Option<f64> {
        self.memory.get(&id).map(|m| m.v_star)
    }

    fn warm_start(&self, id: CavId, n: usize) -> ControlSequence {
        self.memory
            .get(&id)
            .map_or_else(|| ControlSequence::zeros(n), |m| m.plan.shifted(n))
    }

    fn eta(&self, id: CavId, v_now: f64) -> f64 {
        self.memory
            .get(&id)
            .map_or(f64::INFINITY, |m| contraction_eta(v_now, m.v_star, self.config.lambda))
    }

    fn subproblem<'s, 'a>(
        &'s self,
        snapshot: &'s Snapshot<'a>,
        me: CavId,
        committed: &'s BTreeMap<CavId, ControlSequence>,
    ) -> Subproblem<'s, 'a> {
        Subproblem {
            snapshot,
            me,
            committed,
            weights: &self.weights,
            actions: &self.actions,
            limits: self.config.limits(),
        }
    }

    /// Stability then travel-cost solve for one agent. `previous` holds the
    /// agent's last travel cost and stability cost feeding the truncation
    /// horizons; `None` means full horizon.
    fn agent_solve(
        &self,
        snapshot: &Snapshot,
        me: CavId,
        committed: &BTreeMap<CavId, ControlSequence>,
        prior: &[f64],
        previous: Option<(f64, f64)>,
        iteration: usize,
    ) -> Result<AgentOutcome> {
        let scenario = snapshot.scenario();
        let n = snapshot.horizon();
        let sub = self.subproblem(snapshot, me, committed);
        let (v_lb, v_ub) = v_bounds(snapshot.density(), &self.weights, &self.config, &scenario.fd, n);
        let m_v = match previous {
            Some((_, v_prev)) => truncation_horizon(v_prev, v_lb, v_ub, self.config.m_min, n),
            None => n,
        };
        let stability = sub.solve_stability(m_v, prior)?;
        let eta = self.eta(me, stability.v_value);
        let (j_lb, j_ub) = j_bounds(
            stability.v_value,
            stability.j_value,
            &self.weights,
            &self.config,
            &scenario.fd,
            &scenario.grid,
            n,
        );
        let m_j = match previous {
            Some((j_prev, _)) => truncation_horizon(j_prev, j_lb, j_ub, self.config.m_min, n),
            None => n,
        };
        let plan = sub.solve_control(eta, m_j, prior, &stability, Some(prior))?;
        let record = SolveRecord {
            iteration,
            cav: me,
            m_j,
            m_v,
            j: plan.j_value,
            v: plan.v_value,
            j_stability: stability.j_value,
            v_stability: stability.v_value,
            eta,
            bounds: Bounds { j_lb, j_ub, v_lb, v_ub },
            evaluations: stability.evaluations + plan.evaluations,
            fallback: !plan.feasible,
            accepted: true,
        };
        Ok(AgentOutcome {
            plan,
            stability,
            record,
        })
    }

    /// Greedy decision ordering: at each rank every remaining CAV solves
    /// against the plans fixed so far, and the one with the lowest travel cost
    /// takes the rank.
    #[allow(clippy::type_complexity)]
    pub fn decision_order(
        &self,
        snapshot: &Snapshot,
    ) -> Result<(Vec<CavId>, BTreeMap<CavId, ControlSequence>, BTreeMap<CavId, (f64, f64)>, Vec<SolveRecord>)> {
        let n = snapshot.horizon();
        let mut ids: Vec<CavId> = snapshot.ids().to_vec();
        ids.sort_unstable();
        let mut order = Vec::with_capacity(ids.len());
        let mut fixed: BTreeMap<CavId, ControlSequence> = BTreeMap::new();
        let mut costs = BTreeMap::new();
        let mut records = Vec::new();
        if self.config.ordering == DecisionOrdering::Fixed {
            for &id in &ids {
                fixed.insert(id, self.warm_start(id, n));
            }
            for &id in &ids {
                let mut others = fixed.clone();
                let mine = others.remove(&id).expect("present");
                let (j, v) = snapshot.evaluate(id, mine.commands(), &others, &self.weights)?;
                costs.insert(id, (j, v));
            }
            return Ok((ids, fixed, costs, records));
        }
        let mut remaining = ids;
        while !remaining.is_empty() {
            let outcomes: Vec<Result<AgentOutcome>> = remaining
                .par_iter()
                .map(|&id| {
                    let warm = self.warm_start(id, n);
                    self.agent_solve(snapshot, id, &fixed, warm.commands(), None, 0)
                })
                .collect();
            let mut outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
            let best = outcomes
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.plan
                        .j_value
                        .partial_cmp(&b.plan.j_value)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(a.record.cav.cmp(&b.record.cav))
                })
                .map(|(i, _)| i)
                .expect("nonempty");
            for (i, o) in outcomes.iter_mut().enumerate() {
                o.record.accepted = i == best;
                records.push(o.record.clone());
            }
            let chosen = outcomes.swap_remove(best);
            let id = chosen.record.cav;
            costs.insert(id, (chosen.plan.j_value, chosen.stability.v_value));
            fixed.insert(id, chosen.plan.mu);
            order.push(id);
            remaining.retain(|&c| c != id);
        }
        Ok((order, fixed, costs, records))
    }

    /// One coordination step: returns the first command of every active CAV.
    pub fn coordinate_step(
        &mut self,
        state: &SimulationState,
        scenario: &Scenario,
    ) -> Result<(BTreeMap<CavId, f64>, StepReport)> {
        let snapshot = Snapshot::new(state, scenario, self.config.horizon);
        let n = snapshot.horizon();
        let mut report = StepReport {
            k: state.k,
            horizon: n,
            ..StepReport::default()
        };
        if snapshot.ids().is_empty() || n == 0 {
            self.memory.clear();
            report.converged = true;
            return Ok((BTreeMap::new(), report));
        }
        let plans = match self.config.controller {
            ControllerKind::None => snapshot
                .ids()
                .iter()
                .map(|&id| (id, ControlSequence::zeros(n)))
                .collect(),
            ControllerKind::Centralized => {
                let joint = crate::mpc::solve_joint(&snapshot, &self.actions, self.config.centralized_budget)?;
                report.eval_count = joint.evaluations;
                report.joint_j.push(joint.j_value);
                report.order = snapshot.ids().to_vec();
                report.converged = true;
                joint.plans
            }
            ControllerKind::DmpcParallel | ControllerKind::RolloutFull | ControllerKind::RolloutTruncated => {
                self.iterate(&snapshot, &mut report)?
            }
        };
        let active: Vec<CavId> = snapshot.ids().to_vec();
        self.memory.retain(|id, _| active.contains(id));
        let controls = plans
            .iter()
            .map(|(&id, seq)| (id, seq.commands().first().copied().unwrap_or(0.0)))
            .collect();
        report.plans = plans;
        Ok((controls, report))
    }

    fn iterate(&mut self, snapshot: &Snapshot, report: &mut StepReport) -> Result<BTreeMap<CavId, ControlSequence>> {
        let parallel = self.config.controller == ControllerKind::DmpcParallel;
        let truncating = self.config.truncating();
        let (order, mut plans, init_costs, records) = self.decision_order(snapshot)?;
        report.eval_count += records.iter().map(|r| r.evaluations).sum::<u64>();
        report.records.extend(records);

        let last = *order.last().expect("nonempty");
        let j0 = init_costs[&last].0;
        // Travel cost of the initial joint solution seeds every agent.
        let mut previous: BTreeMap<CavId, (f64, f64)> =
            init_costs.iter().map(|(&id, &(_, v))| (id, (j0, v))).collect();
        let mut v_accepted: BTreeMap<CavId, f64> = BTreeMap::new();
        report.joint_j.push(j0);
        let mut delta = f64::INFINITY;
        let mut p = 0;
        while delta > self.config.epsilon && p < self.config.p_max {
            p += 1;
            let outcomes: Vec<AgentOutcome> = if parallel {
                let frozen = plans.clone();
                order
                    .par_iter()
                    .map(|&id| {
                        let mut others = frozen.clone();
                        let mine = others.remove(&id).expect("present");
                        let prev = truncating.then(|| previous[&id]);
                        self.agent_solve(snapshot, id, &others, mine.commands(), prev, p)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                let mut out = Vec::with_capacity(order.len());
                for &id in &order {
                    let mut others = plans.clone();
                    let mine = others.remove(&id).expect("present");
                    let prev = truncating.then(|| previous[&id]);
                    let o = self.agent_solve(snapshot, id, &others, mine.commands(), prev, p)?;
                    plans.insert(id, o.plan.mu.clone());
                    out.push(o);
                }
                out
            };
            for o in &outcomes {
                let id = o.record.cav;
                previous.insert(id, (o.plan.j_value, o.stability.v_value));
                v_accepted.insert(id, o.plan.v_value);
                report.eval_count += o.record.evaluations;
                report.records.push(o.record.clone());
            }
            let j_last = if parallel {
                for o in &outcomes {
                    plans.insert(o.record.cav, o.plan.mu.clone());
                }
                let mut others = plans.clone();
                let mine = others.remove(&last).expect("present");
                // Every agent solved against the old plans; score the new joint plan.
                snapshot.evaluate(last, mine.commands(), &others, &self.weights)?.0
            } else {
                outcomes.last().expect("nonempty").plan.j_value
            };
            delta = (j_last - report.joint_j.last().copied().unwrap_or(j_last)).abs();
            report.joint_j.push(j_last);
            report.deltas.push(delta);
        }
        report.iterations = p;
        report.converged = delta <= self.config.epsilon;
        report.order = order;
        for (&id, seq) in &plans {
            let v_star = v_accepted.get(&id).copied().unwrap_or(previous[&id].1);
            self.memory.insert(
                id,
                Memory {
                    plan: seq.clone(),
                    v_star,
                },
            );
        }
        Ok(plans)
    }
}

/// Per-step record of the plant for traces and audits.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub k: usize,
    pub rho: Vec<f64>,
    /// `(id, y, command)` of every active CAV at the start of the step.
    pub cavs: Vec<(CavId, f64, f64)>,
    pub inflow: f64,
    pub outflow: f64,
    pub queue: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub controller: ControllerKind,
    pub metrics: Metrics,
    pub reports: Vec<StepReport>,
    pub trace: Vec<TraceStep>,
    pub final_state: SimulationState,
}

impl RunOutput {
    /// Density after the last step.
    pub fn final_density(&self) -> &DensityField {
        &self.final_state.rho
    }
}

/// Runs the closed loop for the scenario's `T` steps with its controller.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    let mut coordinator = Coordinator::new(scenario)?;
    run_with(scenario, &mut coordinator)
}

pub fn run_with(scenario: &Scenario, coordinator: &mut Coordinator) -> Result<RunOutput> {
    let mut state = SimulationState::initial(scenario)?;
    let mut reports = Vec::with_capacity(scenario.steps);
    let mut trace = Vec::with_capacity(scenario.steps);
    for _ in 0..scenario.steps {
        spawn_and_retire(&mut state, scenario)?;
        let (controls, report) = coordinator.coordinate_step(&state, scenario)?;
        let (next, outcome) = advance(&state, &controls, scenario)?;
        trace.push(TraceStep {
            k: state.k,
            rho: state.rho.as_slice().to_vec(),
            cavs: state
                .active_cavs()
                .map(|c| (c.id, c.y, controls.get(&c.id).copied().unwrap_or(0.0)))
                .collect(),
            inflow: outcome.inflow,
            outflow: outcome.outflow,
            queue: state.queue,
        });
        state = next;
        state.metrics.eval_count += report.eval_count;
        for r in &report.records {
            if r.iteration > 0 {
                state.metrics.per_step_m.push(r.m_j);
                state.metrics.per_step_m.push(r.m_v);
            }
        }
        reports.push(report);
    }
    Ok(RunOutput {
        controller: coordinator.config().controller,
        metrics: state.metrics.clone(),
        reports,
        trace,
        final_state: state,
    })
}
