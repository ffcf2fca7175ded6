//! Moving-bottleneck detection, flux reconstruction around a slow CAV and the
//! full density transition `rho' = rho + A*O + B + C_u`.

use crate::error::{Error, Result};
use crate::model::{DensityField, FundamentalDiagram, Grid};

pub type CavId = u32;

/// Float drift tolerated after a transition before it counts as a numerical error.
pub const DRIFT_TOLERANCE: f64 = 1e-12;

/// How interface fluxes next to a bottleneck cell are shared with its neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FluxMode {
    /// One flux per interface; the reconstructed fluxes are seen by both sides.
    #[default]
    Consistent,
    /// Only the host cell sees the reconstructed fluxes.
    PaperLiteral,
}

/// A CAV as seen by the transition: where it is and what it was told to do.
/// A command of 0 means "no action".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mover {
    pub id: CavId,
    pub y: f64,
    pub command: f64,
}

/// Boundary flows for one step, in veh/s. The inflow demand is capped at
/// capacity inside the transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFlows {
    pub inflow_demand: f64,
    pub outflow_supply: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleneckReconstruction {
    pub rho_hat: f64,
    pub rho_check: f64,
    pub d_frac: f64,
    /// Time for the CAV to cross the rest of its queue, s. Infinite when u = 0.
    pub passage_time: f64,
    pub heaviside_a: bool,
    pub heaviside_b: bool,
    pub heaviside_c: bool,
    pub heaviside_d: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemStep {
    pub a_diag: Vec<f64>,
    pub b: Vec<f64>,
    pub c_u: Vec<f64>,
    pub o: Vec<bool>,
    pub bottleneck_owner: Vec<Option<CavId>>,
    pub reconstruction: Vec<Option<BottleneckReconstruction>>,
    /// Extra term that makes `rho + A*O + B + C_u + consistency` equal the
    /// returned field. Zero in paper-literal mode.
    pub consistency: Vec<f64>,
    /// Interface fluxes, `J+2` entries from the inflow boundary to the outflow
    /// boundary. In paper-literal mode entry `i` is the flux seen by cell `i`
    /// (the last entry by cell `J`).
    pub interface_flux: Vec<f64>,
}

fn check_speed(u: f64, fd: &FundamentalDiagram) -> Result<()> {
    if u.is_nan() || u < 0.0 || u > fd.free_speed() {
        return Err(Error::SpeedDomain {
            value: u,
            max: fd.free_speed(),
        });
    }
    Ok(())
}

fn check_density(rho: f64, fd: &FundamentalDiagram) -> Result<()> {
    fd.flux(rho).map(|_| ())
}

/// Upstream and downstream densities `(rho_hat, rho_check)` around a CAV
/// driving at `u`; the two roots of `(aR/4V)(V-u)^2 = f(rho) - u*rho`.
pub fn reconstruct_densities(u: f64, fd: &FundamentalDiagram) -> Result<(f64, f64)> {
    check_speed(u, fd)?;
    Ok(Constants::new(fd).reconstruct(u))
}

/// The open speed window `(gamma1, gamma2)` in which a CAV at density `rho`
/// breaks the capacity-reduction constraint.
pub fn gamma_bounds(rho: f64, fd: &FundamentalDiagram) -> Result<(f64, f64)> {
    check_density(rho, fd)?;
    Ok(Constants::new(fd).gammas(rho))
}

pub fn is_moving_bottleneck(u: f64, rho: f64, fd: &FundamentalDiagram) -> Result<bool> {
    check_speed(u, fd)?;
    check_density(rho, fd)?;
    Ok(Constants::new(fd).gamma(u, rho))
}

/// `(d_frac, passage_time)` for a CAV at `u` in a cell of density `rho_cell`.
/// `None` when the reconstruction is degenerate (`rho_hat == rho_check`).
pub fn passage_fraction(
    rho_cell: f64,
    u: f64,
    rho_hat: f64,
    rho_check: f64,
    grid: &Grid,
) -> Option<(f64, f64)> {
    if rho_hat == rho_check {
        return None;
    }
    Some(passage_raw(rho_cell, u, rho_hat, rho_check, grid.dx()))
}

#[inline]
fn passage_raw(rho_cell: f64, u: f64, rho_hat: f64, rho_check: f64, dx: f64) -> (f64, f64) {
    let d = ((rho_cell - rho_hat) / (rho_check - rho_hat)).clamp(0.0, 1.0);
    let dt_i = if u > 0.0 {
        (1.0 - d) * dx / u
    } else {
        f64::INFINITY
    };
    (d, dt_i)
}

/// Fluxes `(F_up, F_down)` across the upstream and downstream interfaces of a
/// cell hosting a moving bottleneck. `rho_prev` is the upstream neighbour's
/// density.
pub fn bottleneck_fluxes(
    rho_prev: f64,
    rho_cell: f64,
    u: f64,
    fd: &FundamentalDiagram,
    grid: &Grid,
) -> Result<(f64, f64, BottleneckReconstruction)> {
    check_speed(u, fd)?;
    check_density(rho_prev, fd)?;
    check_density(rho_cell, fd)?;
    let k = Constants::new(fd);
    if !k.gamma(u, rho_cell) {
        return Err(Error::InvalidParameter(format!(
            "u = {u} m/s at density {rho_cell} veh/m is not a moving bottleneck"
        )));
    }
    let h = k
        .host(0, 0.0, u, rho_cell, grid.dx(), grid.dt())
        .ok_or_else(|| Error::InvalidParameter("degenerate reconstruction".into()))?;
    let up = fd.demand_raw(rho_prev).min(fd.supply_raw(h.rho_hat));
    let recon = reconstruction(&h, fd.flux_raw(rho_prev), rho_prev, fd, grid.dt());
    Ok((up, h.f_down, recon))
}

/// Downstream-most CAV among `(id, y, u)` that is a moving bottleneck in a cell
/// of density `rho_cell`. Ties on position go to the lower id.
pub fn select_bottleneck_cav(
    cavs_in_cell: &[(CavId, f64, f64)],
    rho_cell: f64,
    fd: &FundamentalDiagram,
) -> Result<Option<CavId>> {
    check_density(rho_cell, fd)?;
    let k = Constants::new(fd);
    let mut best: Option<(CavId, f64)> = None;
    for &(id, y, u) in cavs_in_cell {
        check_speed(u, fd)?;
        if u == 0.0 || !k.gamma(u, rho_cell) {
            continue;
        }
        best = match best {
            Some((bid, by)) if by > y || (by == y && bid < id) => Some((bid, by)),
            _ => Some((id, y)),
        };
    }
    Ok(best.map(|(id, _)| id))
}

fn reconstruction(
    h: &Host,
    f_prev: f64,
    rho_prev: f64,
    fd: &FundamentalDiagram,
    dt: f64,
) -> BottleneckReconstruction {
    BottleneckReconstruction {
        rho_hat: h.rho_hat,
        rho_check: h.rho_check,
        d_frac: h.d_frac,
        passage_time: h.passage_time,
        heaviside_a: f_prev <= h.f_hat,
        heaviside_b: h.rho_hat <= fd.critical_density(),
        heaviside_c: rho_prev <= fd.critical_density(),
        heaviside_d: h.passage_time <= dt,
    }
}

/// Precomputed coefficients of the reconstruction and of the speed window.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Constants {
    fd: FundamentalDiagram,
    hat_coef: f64,
    check_coef: f64,
    gamma1_coef: f64,
    gamma2_coef: f64,
}

impl Constants {
    pub(crate) fn new(fd: &FundamentalDiagram) -> Self {
        let v = fd.free_speed();
        let r = fd.jam_density();
        let alpha = fd.alpha();
        let s = (1.0 - alpha).sqrt();
        let g = 2.0 * v / (alpha * r);
        Self {
            fd: *fd,
            hat_coef: r * (1.0 + s) / (2.0 * v),
            check_coef: r * (1.0 - s) / (2.0 * v),
            gamma1_coef: g * (1.0 + s),
            gamma2_coef: g * (1.0 - s),
        }
    }

    #[inline]
    fn reconstruct(&self, u: f64) -> (f64, f64) {
        let gap = self.fd.free_speed() - u;
        (self.hat_coef * gap, self.check_coef * gap)
    }

    #[inline]
    fn gammas(&self, rho: f64) -> (f64, f64) {
        let v = self.fd.free_speed();
        (v - self.gamma1_coef * rho, v - self.gamma2_coef * rho)
    }

    #[inline]
    pub(crate) fn gamma(&self, u: f64, rho: f64) -> bool {
        let (g1, g2) = self.gammas(rho);
        g1 < u && u < g2
    }

    /// Reconstruction for CAV `id` at `y` driving `u` in a cell of density
    /// `rho`. `None` when degenerate.
    #[inline]
    fn host(&self, id: CavId, y: f64, u: f64, rho: f64, dx: f64, dt: f64) -> Option<Host> {
        let fd = &self.fd;
        let (rho_hat, rho_check) = self.reconstruct(u);
        if rho_hat == rho_check {
            return None;
        }
        let (d_frac, passage_time) = passage_raw(rho, u, rho_hat, rho_check, dx);
        let f_hat = fd.flux_raw(rho_hat);
        let f_check = fd.flux_raw(rho_check);
        let f_down = if passage_time <= dt {
            let w = passage_time / dt;
            w * f_check + (1.0 - w) * f_hat
        } else {
            f_check
        };
        Some(Host {
            id,
            y,
            rho_hat,
            rho_check,
            d_frac,
            passage_time,
            f_hat,
            f_down,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Host {
    id: CavId,
    y: f64,
    rho_hat: f64,
    rho_check: f64,
    d_frac: f64,
    passage_time: f64,
    f_hat: f64,
    f_down: f64,
}

/// Reusable buffers for [`Kernel::step_into`].
#[derive(Debug, Clone, Default)]
pub(crate) struct Scratch {
    hosts: Vec<Option<Host>>,
    pub(crate) flux: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(num_cells: usize) -> Self {
        Self {
            hosts: vec![None; num_cells],
            flux: vec![0.0; num_cells + 1],
        }
    }
}

/// The density transition, specialised to one diagram, grid and flux mode.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Kernel {
    k: Constants,
    grid: Grid,
    mode: FluxMode,
}

impl Kernel {
    pub(crate) fn new(fd: &FundamentalDiagram, grid: &Grid, mode: FluxMode) -> Self {
        Self {
            k: Constants::new(fd),
            grid: *grid,
            mode,
        }
    }

    pub(crate) fn fd(&self) -> &FundamentalDiagram {
        &self.k.fd
    }

    pub(crate) fn grid(&self) -> &Grid {
        &self.grid
    }

    fn select_hosts(&self, rho: &[f64], movers: &[Mover], hosts: &mut [Option<Host>]) {
        hosts.iter_mut().for_each(|h| *h = None);
        let (dx, dt) = (self.grid.dx(), self.grid.dt());
        for m in movers {
            if m.command == 0.0 {
                continue;
            }
            let Some(j) = self.grid.cell_of(m.y) else {
                continue;
            };
            if !self.k.gamma(m.command, rho[j]) {
                continue;
            }
            let replace = match &hosts[j] {
                None => true,
                Some(h) => m.y > h.y || (m.y == h.y && m.id < h.id),
            };
            if replace {
                if let Some(h) = self.k.host(m.id, m.y, m.command, rho[j], dx, dt) {
                    hosts[j] = Some(h);
                }
            }
        }
    }

    /// One transition without domain checks. `out` receives the new field
    /// (unclamped) and `scratch.flux` the interface fluxes.
    pub(crate) fn step_into(
        &self,
        rho: &[f64],
        movers: &[Mover],
        bnd: BoundaryFlows,
        scratch: &mut Scratch,
        out: &mut [f64],
    ) {
        let fd = &self.k.fd;
        let n = rho.len();
        let ratio = self.grid.dt() / self.grid.dx();
        let inflow = bnd.inflow_demand.min(fd.capacity());
        self.select_hosts(rho, movers, &mut scratch.hosts);
        let hosts = &scratch.hosts;
        let flux = &mut scratch.flux;
        match self.mode {
            FluxMode::Consistent => {
                for i in 0..=n {
                    let demand = if i == 0 {
                        inflow
                    } else {
                        match &hosts[i - 1] {
                            Some(h) => h.f_down,
                            None => fd.demand_raw(rho[i - 1]),
                        }
                    };
                    let supply = if i == n {
                        bnd.outflow_supply
                    } else {
                        match &hosts[i] {
                            Some(h) => fd.supply_raw(h.rho_hat),
                            None => fd.supply_raw(rho[i]),
                        }
                    };
                    flux[i] = demand.min(supply);
                }
                for j in 0..n {
                    out[j] = rho[j] - ratio * (flux[j + 1] - flux[j]);
                }
            }
            FluxMode::PaperLiteral => {
                for i in 0..=n {
                    let demand = if i == 0 { inflow } else { fd.demand_raw(rho[i - 1]) };
                    let supply = if i == n {
                        bnd.outflow_supply
                    } else {
                        fd.supply_raw(rho[i])
                    };
                    flux[i] = demand.min(supply);
                }
                let mut last_out = flux[n];
                for j in 0..n {
                    match &hosts[j] {
                        None => out[j] = rho[j] - ratio * (flux[j + 1] - flux[j]),
                        Some(h) => {
                            let d_up = if j == 0 { inflow } else { fd.demand_raw(rho[j - 1]) };
                            let f_up = d_up.min(fd.supply_raw(h.rho_hat));
                            out[j] = rho[j] - ratio * (h.f_down - f_up);
                            flux[j] = f_up;
                            if j + 1 == n {
                                last_out = h.f_down;
                            }
                        }
                    }
                }
                flux[n] = last_out;
            }
        }
    }

    /// Validates the unclamped field in `out` and clamps float drift.
    pub(crate) fn settle(&self, out: &mut [f64]) -> Result<()> {
        let r = self.k.fd.jam_density();
        for (j, v) in out.iter_mut().enumerate() {
            if v.is_nan() || *v < -DRIFT_TOLERANCE || *v > r + DRIFT_TOLERANCE {
                return Err(Error::Numerical { cell: j, value: *v });
            }
            *v = v.clamp(0.0, r);
        }
        Ok(())
    }

    /// Decomposition of the step into the `A`, `B`, `C_u` and `O` terms.
    fn assemble(&self, rho: &[f64], bnd: BoundaryFlows, hosts: &[Option<Host>], out: &[f64], flux: &[f64]) -> SystemStep {
        let fd = &self.k.fd;
        let n = rho.len();
        let ratio = self.grid.dt() / self.grid.dx();
        let dt = self.grid.dt();
        let inflow = bnd.inflow_demand.min(fd.capacity());
        let f_star = fd.capacity();

        let std_flux: Vec<f64> = (0..=n)
            .map(|i| {
                let demand = if i == 0 { inflow } else { fd.demand_raw(rho[i - 1]) };
                let supply = if i == n { bnd.outflow_supply } else { fd.supply_raw(rho[i]) };
                demand.min(supply)
            })
            .collect();
        let b: Vec<f64> = (0..n).map(|j| -ratio * (std_flux[j + 1] - std_flux[j])).collect();

        let mut a_diag = vec![0.0; n];
        let mut c_u = vec![0.0; n];
        let mut o = vec![false; n];
        let mut owner = vec![None; n];
        let mut recon = vec![None; n];
        for j in 0..n {
            let Some(h) = &hosts[j] else { continue };
            // Upstream neighbour as seen by the Heaviside form: the inflow
            // boundary enters as a free-flow demand.
            let (f_prev, rho_prev) = if j == 0 {
                (inflow, 0.0)
            } else {
                (fd.flux_raw(rho[j - 1]), rho[j - 1])
            };
            let rc = reconstruction(h, f_prev, rho_prev, fd, dt);
            let a = rc.heaviside_a as u8 as f64;
            let bb = rc.heaviside_b as u8 as f64;
            let c = rc.heaviside_c as u8 as f64;
            let d = rc.heaviside_d as u8 as f64;
            let f2 = d * rho[j]
                + (bb * c + a * (1.0 - bb) * c) * ratio * f_prev
                + bb * (1.0 - c) * ratio * f_star;
            let f3 = ((1.0 - a) * (1.0 - bb) * c + (1.0 - bb) * (1.0 - c) - d) * ratio * h.f_hat
                - d * h.rho_check
                - (1.0 - d) * ratio * fd.flux_raw(h.rho_check);
            a_diag[j] = f2 - b[j];
            c_u[j] = f3;
            o[j] = true;
            owner[j] = Some(h.id);
            recon[j] = Some(rc);
        }
        let consistency = (0..n)
            .map(|j| out[j] - (rho[j] + a_diag[j] + b[j] + c_u[j]))
            .collect();
        SystemStep {
            a_diag,
            b,
            c_u,
            o,
            bottleneck_owner: owner,
            reconstruction: recon,
            consistency,
            interface_flux: flux.to_vec(),
        }
    }
}

/// One transition of the density field with the given CAV commands.
pub fn density_step(
    rho: &DensityField,
    movers: &[Mover],
    boundary: BoundaryFlows,
    fd: &FundamentalDiagram,
    grid: &Grid,
    mode: FluxMode,
) -> Result<(DensityField, SystemStep)> {
    if rho.len() != grid.num_cells() {
        return Err(Error::Length(format!(
            "density field has {} cells, grid has {}",
            rho.len(),
            grid.num_cells()
        )));
    }
    for &v in rho.as_slice() {
        check_density(v, fd)?;
    }
    for m in movers {
        check_speed(m.command, fd)?;
    }
    if !(boundary.inflow_demand >= 0.0) || !(boundary.outflow_supply >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "boundary flows must be nonnegative, got {boundary:?}"
        )));
    }
    let kernel = Kernel::new(fd, grid, mode);
    let mut scratch = Scratch::new(rho.len());
    let mut out = vec![0.0; rho.len()];
    kernel.step_into(rho.as_slice(), movers, boundary, &mut scratch, &mut out);
    kernel.settle(&mut out)?;
    let step = kernel.assemble(rho.as_slice(), boundary, &scratch.hosts, &out, &scratch.flux);
    Ok((DensityField::from_vec_unchecked(out), step))
}
