//! Per-CAV receding-horizon problems: prediction with neighbour plans, travel
//! and stability costs, the Lyapunov terminal weight, and the enumerative
//! solvers for the stability and travel-cost problems.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::bottleneck::{BoundaryFlows, CavId, FluxMode, Kernel, Mover, Scratch};
use crate::error::{Error, Result};
use crate::model::{DensityField, FundamentalDiagram, Grid};
use crate::plant::{cav_speed, Scenario, SimulationState};

/// The discrete action set: "no action" (0) followed by `S` evenly spaced
/// speeds in `[u_min, u_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    values: Vec<f64>,
}

impl ActionSet {
    pub fn new(u_min: f64, u_max: f64, speeds: usize) -> Result<Self> {
        if speeds == 0 {
            return Err(Error::InvalidParameter("action set needs at least one speed".into()));
        }
        if !(u_min > 0.0 && u_min <= u_max && u_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "speed bounds must satisfy 0 < u_min <= u_max, got [{u_min}, {u_max}]"
            )));
        }
        let mut values = vec![0.0];
        if speeds == 1 {
            values.push(u_min);
        } else {
            let step = (u_max - u_min) / (speeds - 1) as f64;
            values.extend((0..speeds).map(|s| if s + 1 == speeds { u_max } else { u_min + s as f64 * step }));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `S + 1`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Speed commands for one CAV over a horizon; 0 means no action.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlSequence(pub Vec<f64>);

impl ControlSequence {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn commands(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Drops the first command and pads with no-action up to `n` commands.
    pub fn shifted(&self, n: usize) -> Self {
        let mut v: Vec<f64> = self.0.iter().skip(1).copied().take(n).collect();
        v.resize(n, 0.0);
        Self(v)
    }

    /// The cell-indexed input vector at step `t`, given the CAV's predicted cell.
    pub fn cell_vector(&self, t: usize, cell: Option<usize>, num_cells: usize) -> Vec<f64> {
        let mut u = vec![0.0; num_cells];
        if let Some(j) = cell {
            u[j] = self.0[t];
        }
        u
    }
}

/// Linearization of the uncontrolled transition at the empty road.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub psi: DMatrix<f64>,
    pub delta: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub spectral_radius_z: f64,
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

/// Transition of the empty-boundary road (no inflow, unrestricted outflow)
/// with one CAV per cell commanding `u[j]`, without domain checks.
fn origin_transition(kernel: &Kernel, rho: &[f64], u: &[f64]) -> Vec<f64> {
    let grid = kernel.grid();
    let movers: Vec<Mover> = u
        .iter()
        .enumerate()
        .map(|(j, &c)| Mover {
            id: j as CavId,
            y: (j as f64 + 0.5) * grid.dx(),
            command: c,
        })
        .collect();
    let bnd = BoundaryFlows {
        inflow_demand: 0.0,
        outflow_supply: kernel.fd().capacity(),
    };
    let mut scratch = Scratch::new(rho.len());
    let mut out = vec![0.0; rho.len()];
    kernel.step_into(rho, &movers, bnd, &mut scratch, &mut out);
    out
}

/// Central-difference step used by [`linearize`].
pub const JACOBIAN_STEP: f64 = 1e-6;

/// `psi` and `delta` by central differences at `rho = 0, u = 0`; `K = 0` when
/// `psi` is Schur stable, otherwise the discrete LQR gain.
pub fn linearize(fd: &FundamentalDiagram, grid: &Grid, q: f64, r: f64) -> Result<LinearizedSystem> {
    let n = grid.num_cells();
    let kernel = Kernel::new(fd, grid, FluxMode::Consistent);
    let h = JACOBIAN_STEP;
    let zero = vec![0.0; n];
    let mut psi = DMatrix::zeros(n, n);
    let mut delta = DMatrix::zeros(n, n);
    for c in 0..n {
        let mut plus = zero.clone();
        let mut minus = zero.clone();
        plus[c] = h;
        minus[c] = -h;
        let fp = origin_transition(&kernel, &plus, &zero);
        let fm = origin_transition(&kernel, &minus, &zero);
        let up = origin_transition(&kernel, &zero, &plus);
        let um = origin_transition(&kernel, &zero, &minus);
        for i in 0..n {
            psi[(i, c)] = (fp[i] - fm[i]) / (2.0 * h);
            delta[(i, c)] = (up[i] - um[i]) / (2.0 * h);
        }
    }
    let k = if spectral_radius(&psi) < 1.0 {
        DMatrix::zeros(n, n)
    } else {
        lqr_gain(&psi, &delta, q, r)?
    };
    let z = &psi + &delta * &k;
    let spectral_radius_z = spectral_radius(&z);
    if !(spectral_radius_z < 1.0) {
        return Err(Error::Stabilization(format!(
            "closed-loop spectral radius {spectral_radius_z} >= 1"
        )));
    }
    Ok(LinearizedSystem {
        psi,
        delta,
        k,
        z,
        spectral_radius_z,
    })
}

/// Discrete-time LQR gain `K` (with `u = K x`) from the Riccati recursion.
fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: f64, r: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let qm = DMatrix::identity(n, n) * q;
    let rm = DMatrix::identity(b.ncols(), b.ncols()) * r;
    let mut p = qm.clone();
    for _ in 0..100_000 {
        let btp = b.transpose() * &p;
        let s = &rm + &btp * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Stabilization("singular Riccati gain matrix".into()))?;
        let atp = a.transpose() * &p;
        let next = &qm + &atp * a - &atp * b * &s_inv * &btp * a;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Stabilization("Riccati recursion diverged".into()));
        }
        let diff = (&next - &p).abs().max();
        p = next;
        if diff < 1e-12 {
            let btp = b.transpose() * &p;
            let s_inv = (&rm + &btp * b)
                .try_inverse()
                .ok_or_else(|| Error::Stabilization("singular Riccati gain matrix".into()))?;
            return Ok(-(s_inv * btp * a));
        }
    }
    Err(Error::Stabilization("Riccati recursion did not converge".into()))
}

/// Terminal weight `H = sum_m (Z^T)^m (Q* + dQ) Z^m` with `Q* = qI + K^T (rI) K`.
pub fn lyapunov_terminal(
    z: &DMatrix<f64>,
    q: f64,
    r: f64,
    k: &DMatrix<f64>,
    delta_q: f64,
) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    let p = lyapunov_rhs(n, q, r, k, delta_q);
    let zt = z.transpose();
    let mut h = p.clone();
    let mut term = p;
    const MAX_TERMS: usize = 1_000_000;
    for _ in 0..MAX_TERMS {
        term = &zt * &term * z;
        if !term.iter().all(|v| v.is_finite()) {
            break;
        }
        h += &term;
        if term.abs().max() < 1e-12 {
            return Ok((&h + h.transpose()) * 0.5);
        }
    }
    Err(Error::LyapunovDivergence(MAX_TERMS))
}

/// `Q* + dQ`.
pub fn lyapunov_rhs(n: usize, q: f64, r: f64, k: &DMatrix<f64>, delta_q: f64) -> DMatrix<f64> {
    DMatrix::identity(n, n) * (q + delta_q) + k.transpose() * k * r
}

/// Infinity-norm residual `|Z^T H Z - H + Q* + dQ|`.
pub fn lyapunov_residual(z: &DMatrix<f64>, h: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    let m = z.transpose() * h * z - h + rhs;
    m.row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Cost weights with uniform diagonals and the Lyapunov terminal matrix.
#[derive(Debug, Clone)]
pub struct Weights {
    pub q: f64,
    pub r: f64,
    pub delta_q: f64,
    pub h: DMatrix<f64>,
    /// Largest diagonal entry of `H`.
    pub h_max: f64,
    pub lyapunov_residual: f64,
    h_rows: Vec<f64>,
}

impl Weights {
    pub fn new(q: f64, r: f64, delta_q: f64, lin: &LinearizedSystem) -> Result<Self> {
        for (name, v) in [("q", q), ("r", r), ("delta_q", delta_q)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        let h = lyapunov_terminal(&lin.z, q, r, &lin.k, delta_q)?;
        let rhs = lyapunov_rhs(h.nrows(), q, r, &lin.k, delta_q);
        let residual = lyapunov_residual(&lin.z, &h, &rhs);
        Ok(Self::from_terminal(q, r, delta_q, h, residual))
    }

    /// Weights with a given terminal matrix.
    pub fn from_terminal(q: f64, r: f64, delta_q: f64, h: DMatrix<f64>, residual: f64) -> Self {
        let h_max = h.diagonal().iter().copied().fold(f64::MIN, f64::max);
        let n = h.nrows();
        let h_rows = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| h[(i, j)]).collect();
        Self {
            q,
            r,
            delta_q,
            h,
            h_max,
            lyapunov_residual: residual,
            h_rows,
        }
    }

    #[inline]
    pub fn terminal(&self, rho: &[f64]) -> f64 {
        let n = rho.len();
        let mut total = 0.0;
        for i in 0..n {
            let row = &self.h_rows[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row[j] * rho[j];
            }
            total += rho[i] * s;
        }
        total
    }
}

/// `sum_{t<N} sum_j rho_j dt dx` over the first `N` fields of `xi`.
pub fn travel_cost(xi: &[DensityField], horizon: usize, grid: &Grid) -> f64 {
    let total: f64 = xi.iter().take(horizon).map(|f| f.as_slice().iter().sum::<f64>()).sum();
    total * grid.dt() * grid.dx()
}

/// `sum_t (q |rho_t|^2 + r u_t^2) + rho_N^T H rho_N`; `xi` holds `N+1` fields.
pub fn stability_cost(xi: &[DensityField], mu: &[f64], weights: &Weights) -> f64 {
    let n = mu.len();
    let mut v = 0.0;
    for t in 0..n {
        v += weights.q * xi[t].norm_squared() + weights.r * mu[t] * mu[t];
    }
    v + weights.terminal(xi[n].as_slice())
}

/// `eta = V_now + lambda (V_prev - V_now)`.
pub fn contraction_eta(v_now: f64, v_prev_star: f64, lambda: f64) -> f64 {
    v_now + lambda * (v_prev_star - v_now)
}

/// A frozen view of the plant for prediction over one horizon.
#[derive(Debug, Clone)]
pub struct Snapshot<'a> {
    scenario: &'a Scenario,
    kernel: Kernel,
    horizon: usize,
    rho: Vec<f64>,
    queue: f64,
    ids: Vec<CavId>,
    ys: Vec<f64>,
    inflow: Vec<f64>,
    outflow: Vec<f64>,
}

/// Predicted trajectories over a horizon.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// `N+1` density fields starting with the snapshot.
    pub densities: Vec<DensityField>,
    /// `positions[t][slot]` at the start of step `t`; `N+1` rows.
    pub positions: Vec<Vec<f64>>,
    /// Commands in force at step `t`; 0 once a CAV has left the zone.
    pub commands: Vec<Vec<f64>>,
    pub travel_cost: f64,
}

#[derive(Debug, Clone)]
struct Rollout {
    rho: Vec<f64>,
    ys: Vec<f64>,
    queue: f64,
    mass: f64,
    stage: f64,
    ok: bool,
}

impl Rollout {
    fn copy_from(&mut self, other: &Rollout) {
        self.rho.copy_from_slice(&other.rho);
        self.ys.copy_from_slice(&other.ys);
        self.queue = other.queue;
        self.mass = other.mass;
        self.stage = other.stage;
        self.ok = other.ok;
    }
}

/// Working memory for rolling out candidates.
#[derive(Debug, Clone)]
struct Workspace {
    scratch: Scratch,
    out: Vec<f64>,
    movers: Vec<Mover>,
    cmds: Vec<f64>,
}

impl<'a> Snapshot<'a> {
    /// Snapshot of the active CAVs at the state's step; the horizon is cut to
    /// the remaining steps of the run.
    pub fn new(state: &SimulationState, scenario: &'a Scenario, horizon: usize) -> Self {
        let horizon = horizon.min(scenario.steps.saturating_sub(state.k));
        let active: Vec<_> = state.active_cavs().collect();
        Self {
            scenario,
            kernel: scenario.kernel(),
            horizon,
            rho: state.rho.as_slice().to_vec(),
            queue: state.queue,
            ids: active.iter().map(|c| c.id).collect(),
            ys: active.iter().map(|c| c.y).collect(),
            inflow: (0..horizon).map(|t| scenario.inflow.at(state.k + t)).collect(),
            outflow: (0..horizon).map(|t| scenario.outflow.at(state.k + t)).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn ids(&self) -> &[CavId] {
        &self.ids
    }

    pub fn positions(&self) -> &[f64] {
        &self.ys
    }

    pub fn density(&self) -> &[f64] {
        &self.rho
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    pub fn slot(&self, id: CavId) -> Option<usize> {
        self.ids.iter().position(|&c| c == id)
    }

    fn start(&self) -> Rollout {
        Rollout {
            rho: self.rho.clone(),
            ys: self.ys.clone(),
            queue: self.queue,
            mass: 0.0,
            stage: 0.0,
            ok: true,
        }
    }

    fn workspace(&self) -> Workspace {
        Workspace {
            scratch: Scratch::new(self.rho.len()),
            out: vec![0.0; self.rho.len()],
            movers: Vec::with_capacity(self.ids.len()),
            cmds: vec![0.0; self.ids.len()],
        }
    }

    /// Advances `st` by step `t` with per-slot commands in `ws.cmds`. The
    /// stage cost charges `me`'s command when it is still in the zone.
    #[inline]
    fn step(&self, st: &mut Rollout, t: usize, ws: &mut Workspace, me: Option<usize>, w: Option<&Weights>) {
        let grid = self.kernel.grid();
        let fd = self.kernel.fd();
        let length = grid.length();
        st.mass += st.rho.iter().sum::<f64>();
        ws.movers.clear();
        let mut my_u = 0.0;
        for (slot, &y) in st.ys.iter().enumerate() {
            if y < length {
                ws.movers.push(Mover {
                    id: self.ids[slot],
                    y,
                    command: ws.cmds[slot],
                });
                if Some(slot) == me {
                    my_u = ws.cmds[slot];
                }
            }
        }
        if let Some(w) = w {
            let norm: f64 = st.rho.iter().map(|r| r * r).sum();
            st.stage += w.q * norm + w.r * my_u * my_u;
        }
        let n = st.rho.len();
        let mut supply = self.outflow[t];
        if st.rho[n - 1] > fd.critical_density() {
            supply *= 1.0 - self.scenario.capacity_drop;
        }
        let bnd = BoundaryFlows {
            inflow_demand: self.inflow[t] + st.queue / grid.dt(),
            outflow_supply: supply,
        };
        self.kernel
            .step_into(&st.rho, &ws.movers, bnd, &mut ws.scratch, &mut ws.out);
        if self.kernel.settle(&mut ws.out).is_err() {
            st.ok = false;
        }
        st.queue = (st.queue + (self.inflow[t] - ws.scratch.flux[0]) * grid.dt()).max(0.0);
        let mut m = 0;
        for y in st.ys.iter_mut() {
            if *y < length {
                let speed = cav_speed(&st.rho, *y, ws.movers[m].command, fd, grid);
                *y += speed * grid.dt();
                m += 1;
            }
        }
        st.rho.copy_from_slice(&ws.out);
    }

    fn travel(&self, st: &Rollout) -> f64 {
        let grid = self.kernel.grid();
        st.mass * grid.dt() * grid.dx()
    }

    fn check_plans(&self, plans: &[&[f64]]) -> Result<()> {
        for p in plans {
            if p.len() != self.horizon {
                return Err(Error::Length(format!(
                    "control sequence has {} commands, horizon is {}",
                    p.len(),
                    self.horizon
                )));
            }
        }
        Ok(())
    }

    /// Per-slot plans from `me`'s sequence and the committed ones; everyone
    /// else takes no action.
    fn plans<'b>(
        &self,
        me: Option<(CavId, &'b [f64])>,
        committed: &'b BTreeMap<CavId, ControlSequence>,
    ) -> Result<Vec<Option<&'b [f64]>>> {
        let mut plans = vec![None; self.ids.len()];
        for (slot, id) in self.ids.iter().enumerate() {
            if let Some((mid, mu)) = me {
                if mid == *id {
                    plans[slot] = Some(mu);
                    continue;
                }
            }
            if let Some(seq) = committed.get(id) {
                plans[slot] = Some(seq.commands());
            }
        }
        let given: Vec<&[f64]> = plans.iter().flatten().copied().collect();
        self.check_plans(&given)?;
        Ok(plans)
    }

    /// Rolls the horizon forward with `me` following `my_mu`, committed CAVs
    /// their sequences and everybody else driving with the traffic.
    pub fn predict_horizon(
        &self,
        me: Option<CavId>,
        my_mu: &[f64],
        committed: &BTreeMap<CavId, ControlSequence>,
    ) -> Result<Prediction> {
        let plans = self.plans(me.map(|id| (id, my_mu)), committed)?;
        let length = self.kernel.grid().length();
        let mut st = self.start();
        let mut ws = self.workspace();
        let mut densities = vec![DensityField::from_vec_unchecked(st.rho.clone())];
        let mut positions = vec![st.ys.clone()];
        let mut commands = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            for (slot, p) in plans.iter().enumerate() {
                ws.cmds[slot] = p.map_or(0.0, |p| p[t]);
            }
            commands.push(
                (0..self.ids.len())
                    .map(|s| if st.ys[s] < length { ws.cmds[s] } else { 0.0 })
                    .collect(),
            );
            self.step(&mut st, t, &mut ws, None, None);
            if !st.ok {
                let (cell, value) = first_bad(&ws.out, self.kernel.fd());
                return Err(Error::Numerical { cell, value });
            }
            densities.push(DensityField::from_vec_unchecked(st.rho.clone()));
            positions.push(st.ys.clone());
        }
        Ok(Prediction {
            densities,
            positions,
            commands,
            travel_cost: self.travel(&st),
        })
    }

    /// `(J, V)` of one joint plan from `me`'s point of view.
    pub fn evaluate(
        &self,
        me: CavId,
        my_mu: &[f64],
        committed: &BTreeMap<CavId, ControlSequence>,
        weights: &Weights,
    ) -> Result<(f64, f64)> {
        let plans = self.plans(Some((me, my_mu)), committed)?;
        let me_slot = self.slot(me);
        let mut st = self.start();
        let mut ws = self.workspace();
        for t in 0..self.horizon {
            for (slot, p) in plans.iter().enumerate() {
                ws.cmds[slot] = p.map_or(0.0, |p| p[t]);
            }
            self.step(&mut st, t, &mut ws, me_slot, Some(weights));
        }
        if !st.ok {
            return Err(Error::Numerical { cell: 0, value: f64::NAN });
        }
        Ok((self.travel(&st), st.stage + weights.terminal(&st.rho)))
    }
}

fn first_bad(out: &[f64], fd: &FundamentalDiagram) -> (usize, f64) {
    out.iter()
        .enumerate()
        .find(|(_, v)| v.is_nan() || **v < 0.0 || **v > fd.jam_density())
        .map(|(j, v)| (j, *v))
        .unwrap_or((0, f64::NAN))
}

/// Which problem a solve addresses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Minimise `V`.
    Stability,
    /// Minimise `J` subject to `V <= eta`.
    Travel { eta: f64 },
}

/// Search limits for a solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchLimits {
    /// Largest candidate count enumerated exhaustively.
    pub enumeration_budget: u64,
    /// Beam width used above the budget.
    pub beam_width: usize,
    /// Terminal level set radius; `None` disables the terminal constraint.
    pub terminal_radius: Option<f64>,
}

/// A candidate sequence with known costs that always stays admissible.
#[derive(Debug, Clone, PartialEq)]
pub struct Known {
    pub mu: Vec<f64>,
    pub j: f64,
    pub v: f64,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub mu: ControlSequence,
    /// Predicted densities, `N+1` fields.
    pub xi: Vec<DensityField>,
    pub j_value: f64,
    pub v_value: f64,
    /// Stability: some candidate met the terminal constraint. Travel: some
    /// enumerated candidate met the contraction constraint.
    pub feasible: bool,
    /// Candidate sequences evaluated by this solve.
    pub evaluations: u64,
    /// Whether beam search replaced exhaustive enumeration.
    pub beam: bool,
}

/// One agent's problem on a snapshot: who it is, what the others do and the
/// sequence that supplies the fixed tail.
#[derive(Debug, Clone, Copy)]
pub struct Subproblem<'s, 'a> {
    pub snapshot: &'s Snapshot<'a>,
    pub me: CavId,
    pub committed: &'s BTreeMap<CavId, ControlSequence>,
    pub weights: &'s Weights,
    pub actions: &'s ActionSet,
    pub limits: SearchLimits,
}

#[derive(Debug, Clone)]
struct Best {
    key: f64,
    admissible: bool,
    mu: Vec<f64>,
    j: f64,
    v: f64,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y).unwrap_or(Ordering::Equal) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

struct Scorer<'p> {
    objective: Objective,
    terminal_radius: Option<f64>,
    always: &'p [Known],
    forced: Option<&'p [f64]>,
}

impl Scorer<'_> {
    fn terminal_ok(&self, terminal: f64) -> bool {
        self.terminal_radius.is_none_or(|e| terminal <= e * e)
    }

    /// `(admissible, key)`; lower keys win among admissible candidates.
    fn score(&self, mu: &[f64], j: f64, v: f64, terminal: f64) -> (bool, f64) {
        match self.objective {
            Objective::Stability => (self.terminal_ok(terminal), v),
            Objective::Travel { eta } => {
                let forced = self.forced == Some(mu) || self.always.iter().any(|k| k.mu == mu);
                (forced || (v <= eta && self.terminal_ok(terminal)), j)
            }
        }
    }
}

impl Best {
    /// Admissible beats inadmissible, then lower key, then lexicographic order.
    fn better(&self, admissible: bool, key: f64, mu: &[f64]) -> bool {
        if admissible != self.admissible {
            return admissible;
        }
        match key.partial_cmp(&self.key) {
            Some(Ordering::Less) => true,
            Some(Ordering::Greater) => false,
            _ => lex_cmp(mu, &self.mu) == Ordering::Less,
        }
    }

    fn offer(slot: &mut Option<Best>, admissible: bool, key: f64, mu: &[f64], j: f64, v: f64) {
        let take = match slot {
            None => true,
            Some(b) => b.better(admissible, key, mu),
        };
        if take {
            *slot = Some(Best {
                key,
                admissible,
                mu: mu.to_vec(),
                j,
                v,
            });
        }
    }
}

impl<'s, 'a> Subproblem<'s, 'a> {
    /// Minimises the objective over the first `free` commands, the remaining
    /// ones copied from `prior`. `always` lists pre-evaluated candidates that
    /// are admissible regardless of the contraction constraint; they are not
    /// counted as evaluations. `forced` is admissible whenever it is enumerated.
    pub fn solve(
        &self,
        objective: Objective,
        free: usize,
        prior: &[f64],
        always: &[Known],
        forced: Option<&[f64]>,
    ) -> Result<PlanResult> {
        let snap = self.snapshot;
        let n = snap.horizon;
        if prior.len() != n {
            return Err(Error::Length(format!(
                "prior has {} commands, horizon is {n}",
                prior.len()
            )));
        }
        let free = free.min(n);
        let plans = snap.plans(None, self.committed)?;
        let me_slot = snap
            .slot(self.me)
            .ok_or_else(|| Error::InvalidParameter(format!("CAV {} is not active", self.me)))?;
        let scorer = Scorer {
            objective,
            terminal_radius: self.limits.terminal_radius,
            always,
            forced,
        };
        let mut ctx = Search {
            snap,
            plans,
            me_slot,
            weights: self.weights,
            actions: self.actions.values(),
            scorer: &scorer,
            prior,
            free,
            ws: snap.workspace(),
            best: None,
            evaluations: 0,
            any_feasible: false,
        };
        let exhaustive = (self.actions.len() as f64).powi(free as i32) <= self.limits.enumeration_budget as f64;
        if exhaustive {
            ctx.exhaustive();
        } else {
            ctx.beam(self.limits.beam_width.max(1));
        }
        for k in always {
            let (adm, key) = scorer.score(&k.mu, k.j, k.v, 0.0);
            Best::offer(&mut ctx.best, adm, key, &k.mu, k.j, k.v);
        }
        let feasible = ctx.any_feasible;
        let evaluations = ctx.evaluations;
        let best = ctx
            .best
            .ok_or_else(|| Error::InvalidParameter("no candidate could be evaluated".into()))?;
        let prediction = snap.predict_horizon(Some(self.me), &best.mu, self.committed)?;
        Ok(PlanResult {
            mu: ControlSequence(best.mu),
            xi: prediction.densities,
            j_value: best.j,
            v_value: best.v,
            feasible,
            evaluations,
            beam: !exhaustive,
        })
    }

    /// Stability problem: minimise `V` over the first `free` commands.
    pub fn solve_stability(&self, free: usize, prior: &[f64]) -> Result<PlanResult> {
        self.solve(Objective::Stability, free, prior, &[], None)
    }

    /// Travel-cost problem: minimise `J` subject to `V <= eta`. The stability
    /// solution and the incumbent remain admissible.
    pub fn solve_control(
        &self,
        eta: f64,
        free: usize,
        prior: &[f64],
        stability: &PlanResult,
        incumbent: Option<&[f64]>,
    ) -> Result<PlanResult> {
        let always = [Known {
            mu: stability.mu.0.clone(),
            j: stability.j_value,
            v: stability.v_value,
        }];
        self.solve(Objective::Travel { eta }, free, prior, &always, incumbent)
    }
}

struct Search<'c, 'a> {
    snap: &'c Snapshot<'a>,
    plans: Vec<Option<&'c [f64]>>,
    me_slot: usize,
    weights: &'c Weights,
    actions: &'c [f64],
    scorer: &'c Scorer<'c>,
    prior: &'c [f64],
    free: usize,
    ws: Workspace,
    best: Option<Best>,
    evaluations: u64,
    any_feasible: bool,
}

impl Search<'_, '_> {
    #[inline]
    fn set_cmds(&mut self, t: usize, mine: f64) {
        for (slot, p) in self.plans.iter().enumerate() {
            self.ws.cmds[slot] = p.map_or(0.0, |p| p[t]);
        }
        self.ws.cmds[self.me_slot] = mine;
    }

    #[inline]
    fn advance(&mut self, st: &mut Rollout, t: usize, mine: f64) {
        self.set_cmds(t, mine);
        self.snap.step(st, t, &mut self.ws, Some(self.me_slot), Some(self.weights));
    }

    /// Finishes a rollout from step `from` with the prior tail and scores the
    /// full sequence `mu`. Returns `(admissible, key)`.
    fn finish(&mut self, st: &mut Rollout, from: usize, mu: &[f64]) -> Option<(bool, f64)> {
        for t in from..self.snap.horizon {
            self.advance(st, t, mu[t]);
        }
        self.evaluations += 1;
        if !st.ok {
            return None;
        }
        let j = self.snap.travel(st);
        let terminal = self.weights.terminal(&st.rho);
        let v = st.stage + terminal;
        let (adm, key) = self.scorer.score(mu, j, v, terminal);
        let enumerated_ok = match self.scorer.objective {
            Objective::Stability => adm,
            Objective::Travel { eta } => v <= eta && self.scorer.terminal_ok(terminal),
        };
        self.any_feasible |= enumerated_ok;
        Best::offer(&mut self.best, adm, key, mu, j, v);
        Some((adm, key))
    }

    fn exhaustive(&mut self) {
        let mut mu = self.prior.to_vec();
        let mut tail = self.snap.start();
        if self.free == 0 {
            self.finish(&mut tail, 0, &mu);
            return;
        }
        // Depth-first over the free prefix; states[t] is the state before step t.
        let mut states: Vec<Rollout> = (0..=self.free).map(|_| self.snap.start()).collect();
        let mut idx = vec![0usize; self.free];
        let mut depth = 0;
        loop {
            let a = self.actions[idx[depth]];
            mu[depth] = a;
            let (head, rest) = states.split_at_mut(depth + 1);
            rest[0].copy_from(&head[depth]);
            self.advance(&mut rest[0], depth, a);
            if depth + 1 < self.free {
                depth += 1;
                idx[depth] = 0;
                continue;
            }
            tail.copy_from(&states[self.free]);
            self.finish(&mut tail, self.free, &mu);
            loop {
                idx[depth] += 1;
                if idx[depth] < self.actions.len() {
                    break;
                }
                if depth == 0 {
                    return;
                }
                depth -= 1;
            }
        }
    }

    fn beam(&mut self, width: usize) {
        struct Node {
            mu: Vec<f64>,
            st: Rollout,
            adm: bool,
            key: f64,
        }
        let mut frontier = vec![Node {
            mu: self.prior.to_vec(),
            st: self.snap.start(),
            adm: true,
            key: 0.0,
        }];
        let mut tail = self.snap.start();
        for depth in 0..self.free {
            let mut children = Vec::with_capacity(frontier.len() * self.actions.len());
            for node in &frontier {
                for ai in 0..self.actions.len() {
                    let a = self.actions[ai];
                    let mut mu = node.mu.clone();
                    mu[depth] = a;
                    let mut st = node.st.clone();
                    self.advance(&mut st, depth, a);
                    tail.copy_from(&st);
                    if let Some((adm, key)) = self.finish(&mut tail, depth + 1, &mu) {
                        children.push(Node { mu, st, adm, key });
                    }
                }
            }
            if depth + 1 == self.free {
                break;
            }
            children.sort_by(|a, b| {
                b.adm
                    .cmp(&a.adm)
                    .then(a.key.partial_cmp(&b.key).unwrap_or(Ordering::Equal))
                    .then(lex_cmp(&a.mu, &b.mu))
            });
            // Keep the prefix of the prior so the prior itself stays reachable.
            let prior_pos = children
                .iter()
                .position(|c| c.mu[..=depth] == self.prior[..=depth]);
            let keep_prior = prior_pos.filter(|&p| p >= width);
            let mut kept: Vec<Node> = Vec::with_capacity(width + 1);
            for (i, c) in children.into_iter().enumerate() {
                if i < width || Some(i) == keep_prior {
                    kept.push(c);
                }
            }
            frontier = kept;
        }
    }
}

/// `(S+1)^M` as a float, for budget checks.
pub fn candidate_count(actions: &ActionSet, free: usize) -> f64 {
    (actions.len() as f64).powi(free as i32)
}

/// Result of a joint enumeration over every CAV.
#[derive(Debug, Clone)]
pub struct JointPlan {
    pub plans: BTreeMap<CavId, ControlSequence>,
    pub j_value: f64,
    pub evaluations: u64,
}

/// Minimises `J` over the product of all CAVs' action sequences. Candidates
/// are ordered step-major then by slot, and the first minimum wins.
pub fn solve_joint(snapshot: &Snapshot, actions: &ActionSet, budget: f64) -> Result<JointPlan> {
    let n = snapshot.horizon;
    let cavs = snapshot.ids.len();
    let needed = (actions.len() as f64).powi((n * cavs) as i32);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let empty = BTreeMap::new();
    if cavs == 0 || n == 0 {
        let st = snapshot.predict_horizon(None, &[], &empty)?;
        return Ok(JointPlan {
            plans: snapshot.ids.iter().map(|&id| (id, ControlSequence::zeros(n))).collect(),
            j_value: st.travel_cost,
            evaluations: 1,
        });
    }
    let a = actions.values();
    let per_step = a.len().pow(cavs as u32);
    let decode = |code: usize, cmds: &mut [f64]| {
        let mut c = code;
        for slot in (0..cmds.len()).rev() {
            cmds[slot] = a[c % a.len()];
            c /= a.len();
        }
    };
    let mut ws = snapshot.workspace();
    let mut states: Vec<Rollout> = (0..=n).map(|_| snapshot.start()).collect();
    let mut idx = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluations = 0u64;
    let mut depth = 0;
    'search: loop {
        decode(idx[depth], &mut ws.cmds);
        let (head, rest) = states.split_at_mut(depth + 1);
        rest[0].copy_from(&head[depth]);
        snapshot.step(&mut rest[0], depth, &mut ws, None, None);
        if depth + 1 < n {
            depth += 1;
            idx[depth] = 0;
            continue;
        }
        evaluations += 1;
        let st = &states[n];
        if st.ok {
            let j = snapshot.travel(st);
            if best.as_ref().is_none_or(|(b, _)| j < *b) {
                best = Some((j, idx.clone()));
            }
        }
        loop {
            idx[depth] += 1;
            if idx[depth] < per_step {
                break;
            }
            if depth == 0 {
                break 'search;
            }
            depth -= 1;
        }
    }
    let (j_value, idx) = best.ok_or_else(|| Error::InvalidParameter("no joint candidate".into()))?;
    let mut plans: BTreeMap<CavId, ControlSequence> = BTreeMap::new();
    let mut cmds = vec![0.0; cavs];
    for (t, &code) in idx.iter().enumerate() {
        decode(code, &mut cmds);
        for (slot, &id) in snapshot.ids.iter().enumerate() {
            plans.entry(id).or_insert_with(|| ControlSequence::zeros(n)).0[t] = cmds[slot];
        }
    }
    Ok(JointPlan {
        plans,
        j_value,
        evaluations,
    })
}
