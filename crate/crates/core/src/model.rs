//! Greenshields fundamental diagram, grid bookkeeping and the plain
//! supply-demand interface flux of the cell transmission model.

use crate::error::{Error, Result};

/// Greenshields fundamental diagram with the capacity-reduction factor of a
/// `W`-to-`W-1` lane drop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalDiagram {
    free_speed: f64,
    jam_density: f64,
    critical_density: f64,
    alpha: f64,
    lanes_upstream: u32,
}

impl FundamentalDiagram {
    pub fn new(free_speed: f64, jam_density: f64, lanes_upstream: u32) -> Result<Self> {
        if !(free_speed.is_finite() && free_speed > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "free speed must be positive, got {free_speed}"
            )));
        }
        if !(jam_density.is_finite() && jam_density > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jam density must be positive, got {jam_density}"
            )));
        }
        if lanes_upstream < 2 {
            return Err(Error::InvalidParameter(format!(
                "upstream lane count must exceed 1, got {lanes_upstream}"
            )));
        }
        let w = lanes_upstream as f64;
        Ok(Self {
            free_speed,
            jam_density,
            critical_density: jam_density / 2.0,
            alpha: (w - 1.0) / w,
            lanes_upstream,
        })
    }

    pub fn free_speed(&self) -> f64 {
        self.free_speed
    }

    pub fn jam_density(&self) -> f64 {
        self.jam_density
    }

    pub fn critical_density(&self) -> f64 {
        self.critical_density
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lanes_upstream(&self) -> u32 {
        self.lanes_upstream
    }

    /// Maximum flow `VR/4` in veh/s.
    pub fn capacity(&self) -> f64 {
        self.free_speed * self.jam_density / 4.0
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if rho.is_nan() || rho < 0.0 || rho > self.jam_density {
            return Err(Error::DensityDomain {
                value: rho,
                jam: self.jam_density,
            });
        }
        Ok(())
    }

    pub fn flux(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.flux_raw(rho))
    }

    pub fn equilibrium_speed(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.speed_raw(rho))
    }

    pub fn demand(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.demand_raw(rho))
    }

    pub fn supply(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.supply_raw(rho))
    }

    pub fn standard_interface_flux(&self, rho_up: f64, rho_down: f64) -> Result<f64> {
        Ok(self.demand(rho_up)?.min(self.supply(rho_down)?))
    }

    // Unchecked forms used inside the transition kernel, where the whole
    // field is validated once per step, and by the linearization, which
    // differentiates through negative perturbations around the origin.

    #[inline]
    pub(crate) fn flux_raw(&self, rho: f64) -> f64 {
        self.free_speed * rho * (1.0 - rho / self.jam_density)
    }

    #[inline]
    pub(crate) fn speed_raw(&self, rho: f64) -> f64 {
        self.free_speed * (1.0 - rho / self.jam_density)
    }

    #[inline]
    pub(crate) fn demand_raw(&self, rho: f64) -> f64 {
        self.flux_raw(rho.min(self.critical_density))
    }

    #[inline]
    pub(crate) fn supply_raw(&self, rho: f64) -> f64 {
        self.flux_raw(rho.max(self.critical_density))
    }
}

/// Uniform spatial and temporal discretization of the coordination zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    num_cells: usize,
    dx: f64,
    dt: f64,
}

impl Grid {
    /// Rejects grids that violate `V*dt <= 0.9*dx`.
    pub fn new(num_cells: usize, dx: f64, dt: f64, fd: &FundamentalDiagram) -> Result<Self> {
        if num_cells == 0 {
            return Err(Error::InvalidParameter("grid needs at least one cell".into()));
        }
        if !(dx.is_finite() && dx > 0.0) || !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cell length and time step must be positive, got dx={dx}, dt={dt}"
            )));
        }
        let lhs = fd.free_speed() * dt;
        let rhs = 0.9 * dx;
        if lhs > rhs {
            return Err(Error::Cfl { lhs, rhs });
        }
        Ok(Self { num_cells, dx, dt })
    }

    pub fn num_cells(&self) -> usize {
        self.num_cells
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn length(&self) -> f64 {
        self.num_cells as f64 * self.dx
    }

    /// Index of the cell containing position `y`, if `y` lies in `[0, L)`.
    pub fn cell_of(&self, y: f64) -> Option<usize> {
        if !(y >= 0.0) {
            return None;
        }
        let j = (y / self.dx).floor() as usize;
        (j < self.num_cells).then_some(j)
    }
}

/// Cell densities in veh/m.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField(Vec<f64>);

impl DensityField {
    pub fn new(values: Vec<f64>, fd: &FundamentalDiagram) -> Result<Self> {
        for &v in &values {
            fd.check_density(v)?;
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn uniform(n: usize, rho: f64, fd: &FundamentalDiagram) -> Result<Self> {
        Self::new(vec![rho; n], fd)
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of vehicles on the grid.
    pub fn mass(&self, grid: &Grid) -> f64 {
        self.0.iter().sum::<f64>() * grid.dx()
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|r| r * r).sum()
    }
}

impl std::ops::Index<usize> for DensityField {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd() -> FundamentalDiagram {
        FundamentalDiagram::new(33.33, 0.12, 3).unwrap()
    }

    #[test]
    fn derived_parameters() {
        let fd = fd();
        assert_eq!(fd.critical_density(), 0.06);
        assert_abs_diff_eq!(fd.alpha(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(FundamentalDiagram::new(33.33, 0.12, 1).is_err());
        assert!(FundamentalDiagram::new(0.0, 0.12, 3).is_err());
    }

    #[test]
    fn flux_values() {
        let fd = fd();
        assert_eq!(fd.flux(0.0).unwrap(), 0.0);
        assert_eq!(fd.flux(0.12).unwrap(), 0.0);
        assert_abs_diff_eq!(fd.flux(0.06).unwrap(), 0.9999, epsilon = 1e-4);
        assert_abs_diff_eq!(fd.flux(0.06).unwrap(), fd.capacity(), epsilon = 1e-15);
        assert!(matches!(fd.flux(-0.01), Err(Error::DensityDomain { .. })));
        assert!(fd.flux(0.13).is_err());
    }

    #[test]
    fn speed_values() {
        let fd = fd();
        assert_eq!(fd.equilibrium_speed(0.0).unwrap(), 33.33);
        assert_eq!(fd.equilibrium_speed(0.12).unwrap(), 0.0);
        // 33.33 * 0.75; a free speed of exactly 100/3 would give 25.
        assert_abs_diff_eq!(fd.equilibrium_speed(0.03).unwrap(), 24.9975, epsilon = 1e-12);
    }

    #[test]
    fn demand_supply_branches() {
        let fd = fd();
        assert_eq!(fd.demand(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(fd.supply(0.0).unwrap(), fd.capacity(), epsilon = 1e-15);
        assert_abs_diff_eq!(fd.demand(0.12).unwrap(), fd.capacity(), epsilon = 1e-15);
        assert_eq!(fd.supply(0.12).unwrap(), 0.0);
    }

    #[test]
    fn interface_flux() {
        let fd = fd();
        assert_eq!(fd.standard_interface_flux(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(fd.standard_interface_flux(0.12, 0.12).unwrap(), 0.0);
        assert_abs_diff_eq!(
            fd.standard_interface_flux(0.03, 0.03).unwrap(),
            0.7499,
            epsilon = 1e-4
        );
    }

    #[test]
    fn grid_cfl() {
        let fd = fd();
        assert!(Grid::new(7, 300.0, 1.0, &fd).is_ok());
        assert!(matches!(Grid::new(7, 300.0, 10.0, &fd), Err(Error::Cfl { .. })));
        let g = Grid::new(7, 300.0, 1.0, &fd).unwrap();
        assert_eq!(g.length(), 2100.0);
        assert_eq!(g.cell_of(0.0), Some(0));
        assert_eq!(g.cell_of(299.9), Some(0));
        assert_eq!(g.cell_of(300.0), Some(1));
        assert_eq!(g.cell_of(2100.0), None);
        assert_eq!(g.cell_of(-1.0), None);
    }

    #[test]
    fn density_field_validation() {
        let fd = fd();
        assert!(DensityField::new(vec![0.0, 0.05, 0.12], &fd).is_ok());
        assert!(DensityField::new(vec![0.0, -0.05], &fd).is_err());
        assert!(DensityField::new(vec![f64::NAN], &fd).is_err());
    }
}
