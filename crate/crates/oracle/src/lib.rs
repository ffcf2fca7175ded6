//! Brute-force reference implementations for testing the `lanedrop` crate.
//!
//! Everything here is written from the model definitions with plain loops and
//! shares no code with the production crate. Inputs are plain numbers.

/// Road and discretization parameters.
#[derive(Debug, Clone, Copy)]
pub struct Road {
    pub v: f64,
    pub r: f64,
    pub lanes: u32,
    pub dx: f64,
    pub dt: f64,
}

/// A CAV with its position (m) and commanded speed (m/s, 0 = no action).
#[derive(Debug, Clone, Copy)]
pub struct Car {
    pub id: u32,
    pub y: f64,
    pub u: f64,
}

/// Boundary conditions over a horizon.
#[derive(Debug, Clone)]
pub struct Boundary {
    /// Arrival rate at each step, veh/s.
    pub inflow: Vec<f64>,
    /// Downstream discharge supply at each step, veh/s.
    pub outflow: Vec<f64>,
    /// Fractional discharge loss while the last cell is congested.
    pub capacity_drop: f64,
    /// Vehicles waiting upstream of the first cell.
    pub queue: f64,
}

fn flow(road: &Road, rho: f64) -> f64 {
    road.v * rho * (1.0 - rho / road.r)
}

fn half(road: &Road) -> f64 {
    road.r / 2.0
}

/// One step of the density field with the given cars and boundary flows, with
/// one flux value per interface. Returns the new field and the interface
/// fluxes (`n+1` entries).
pub fn straightline_step_with_flux(
    rho: &[f64],
    cars: &[Car],
    inflow_demand: f64,
    outflow_supply: f64,
    road: &Road,
) -> (Vec<f64>, Vec<f64>) {
    let n = rho.len();
    let v = road.v;
    let r = road.r;
    let w = road.lanes as f64;
    let alpha = (w - 1.0) / w;
    let s = (1.0 - alpha).sqrt();
    let g = 2.0 * v / (alpha * r);
    let g1 = g * (1.0 + s);
    let g2 = g * (1.0 - s);
    let hat_k = r * (1.0 + s) / (2.0 * v);
    let check_k = r * (1.0 - s) / (2.0 * v);
    let rho_crit = half(road);

    // For every cell: is there a moving bottleneck, and if so which car.
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for j in 0..n {
        let lo = j as f64 * road.dx;
        let mut best: Option<usize> = None;
        for (idx, car) in cars.iter().enumerate() {
            if car.u == 0.0 {
                continue;
            }
            if car.y < 0.0 {
                continue;
            }
            let cell = (car.y / road.dx).floor() as usize;
            if cell != j || car.y < lo {
                continue;
            }
            let gamma1 = v - g1 * rho[j];
            let gamma2 = v - g2 * rho[j];
            if !(gamma1 < car.u && car.u < gamma2) {
                continue;
            }
            let take = match best {
                None => true,
                Some(b) => {
                    car.y > cars[b].y || (car.y == cars[b].y && car.id < cars[b].id)
                }
            };
            if take {
                best = Some(idx);
            }
        }
        if let Some(b) = best {
            let gap = v - cars[b].u;
            if hat_k * gap != check_k * gap {
                owner[j] = Some(b);
            }
        }
    }

    let mut hat = vec![0.0; n];
    let mut down = vec![0.0; n];
    for j in 0..n {
        if let Some(b) = owner[j] {
            let u = cars[b].u;
            let gap = v - u;
            let rho_hat = hat_k * gap;
            let rho_check = check_k * gap;
            let mut d = (rho[j] - rho_hat) / (rho_check - rho_hat);
            if d < 0.0 {
                d = 0.0;
            }
            if d > 1.0 {
                d = 1.0;
            }
            let t_pass = if u > 0.0 {
                (1.0 - d) * road.dx / u
            } else {
                f64::INFINITY
            };
            let q_hat = flow(road, rho_hat);
            let q_check = flow(road, rho_check);
            let f_down;
            if t_pass <= road.dt {
                let frac = t_pass / road.dt;
                f_down = frac * q_check + (1.0 - frac) * q_hat;
            } else {
                f_down = q_check;
            }
            hat[j] = rho_hat;
            down[j] = f_down;
        }
    }

    let cap = v * r / 4.0;
    let mut flux = vec![0.0; n + 1];
    for i in 0..=n {
        let sending;
        if i == 0 {
            sending = if inflow_demand < cap { inflow_demand } else { cap };
        } else if owner[i - 1].is_some() {
            sending = down[i - 1];
        } else if rho[i - 1] < rho_crit {
            sending = flow(road, rho[i - 1]);
        } else {
            sending = flow(road, rho_crit);
        }
        let receiving;
        if i == n {
            receiving = outflow_supply;
        } else {
            let x = if owner[i].is_some() { hat[i] } else { rho[i] };
            receiving = if x > rho_crit { flow(road, x) } else { flow(road, rho_crit) };
        }
        flux[i] = if sending < receiving { sending } else { receiving };
    }

    let lam = road.dt / road.dx;
    let mut next = vec![0.0; n];
    for j in 0..n {
        let mut x = rho[j] - lam * (flux[j + 1] - flux[j]);
        if x < 0.0 {
            x = 0.0;
        }
        if x > r {
            x = r;
        }
        next[j] = x;
    }
    (next, flux)
}

pub fn straightline_step(
    rho: &[f64],
    cars: &[Car],
    inflow_demand: f64,
    outflow_supply: f64,
    road: &Road,
) -> Vec<f64> {
    straightline_step_with_flux(rho, cars, inflow_demand, outflow_supply, road).0
}

/// Speed a car actually drives: its command capped by the traffic ahead, or
/// the traffic speed when it has no command.
pub fn car_speed(rho: &[f64], car: &Car, road: &Road) -> f64 {
    let n = rho.len();
    let j = (car.y / road.dx).floor() as usize;
    let mut ahead = rho[j];
    if car.y >= (j + 1) as f64 * road.dx - 1.0 && j + 1 < n {
        ahead = rho[j + 1];
    }
    let traffic = road.v * (1.0 - ahead / road.r);
    if car.u > 0.0 {
        if car.u < traffic {
            car.u
        } else {
            traffic
        }
    } else {
        traffic
    }
}

/// Rolls the closed loop forward with fixed per-car plans and returns the
/// total time spent `sum_t sum_j rho_j dt dx` over `t = 0..steps`.
pub fn travel_time(
    rho0: &[f64],
    cars: &[Car],
    plans: &[Vec<f64>],
    boundary: &Boundary,
    road: &Road,
    steps: usize,
) -> f64 {
    let n = rho0.len();
    let length = n as f64 * road.dx;
    let mut rho = rho0.to_vec();
    let mut ys: Vec<f64> = cars.iter().map(|c| c.y).collect();
    let mut queue = boundary.queue;
    let mut total = 0.0;
    for t in 0..steps {
        let mut s = 0.0;
        for x in &rho {
            s += *x;
        }
        total += s;
        let mut now = Vec::new();
        for (i, c) in cars.iter().enumerate() {
            if ys[i] < length {
                now.push(Car {
                    id: c.id,
                    y: ys[i],
                    u: plans[i][t],
                });
            }
        }
        let demand = boundary.inflow[t] + queue / road.dt;
        let mut supply = boundary.outflow[t];
        if rho[n - 1] > half(road) {
            supply = supply * (1.0 - boundary.capacity_drop);
        }
        let (next, flux) = straightline_step_with_flux(&rho, &now, demand, supply, road);
        queue = queue + (boundary.inflow[t] - flux[0]) * road.dt;
        if queue < 0.0 {
            queue = 0.0;
        }
        let mut k = 0;
        for i in 0..cars.len() {
            if ys[i] < length {
                let spd = car_speed(&rho, &now[k], road);
                ys[i] += spd * road.dt;
                k += 1;
            }
        }
        rho = next;
    }
    total * road.dt * road.dx
}

/// Best joint plan by full enumeration of every car's command at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOptimum {
    /// `plans[i][t]` is car `i`'s command at step `t`.
    pub plans: Vec<Vec<f64>>,
    pub value: f64,
    pub candidates: usize,
}

/// Exhaustive minimisation of the total time spent over all joint plans drawn
/// from `actions`. Candidates are visited in lexicographic order of the
/// flattened (step-major, then car) action indices and the first minimum is
/// kept. Refuses more than 10^6 candidates.
pub fn exhaustive_joint(
    rho0: &[f64],
    cars: &[Car],
    boundary: &Boundary,
    road: &Road,
    steps: usize,
    actions: &[f64],
) -> Result<JointOptimum, String> {
    let slots = steps * cars.len();
    let total = (actions.len() as f64).powi(slots as i32);
    if total > 1e6 {
        return Err(format!("{total} candidates exceed the oracle budget"));
    }
    let total = total as usize;
    let mut digits = vec![0usize; slots];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..total {
        let mut plans = vec![vec![0.0; steps]; cars.len()];
        for t in 0..steps {
            for i in 0..cars.len() {
                plans[i][t] = actions[digits[t * cars.len() + i]];
            }
        }
        let value = travel_time(rho0, cars, &plans, boundary, road, steps);
        let better = match &best {
            None => true,
            Some((b, _)) => value < *b,
        };
        if better {
            best = Some((value, digits.clone()));
        }
        // Odometer with the first slot most significant.
        let mut pos = slots;
        while pos > 0 {
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < actions.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
    let (value, digits) = best.expect("at least one candidate");
    let mut plans = vec![vec![0.0; steps]; cars.len()];
    for t in 0..steps {
        for i in 0..cars.len() {
            plans[i][t] = actions[digits[t * cars.len() + i]];
        }
    }
    Ok(JointOptimum {
        plans,
        value,
        candidates: total,
    })
}

/// Jacobian by central differences, `J[i][k] = d f_i / d x_k`.
pub fn fd_jacobian<F>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    for k in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..m {
            jac[i][k] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Jacobian by forward differences.
pub fn forward_jacobian<F>(f: F, x: &[f64], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let f0 = f(x);
    let mut jac = vec![vec![0.0; x.len()]; f0.len()];
    for k in 0..x.len() {
        let mut xp = x.to_vec();
        xp[k] += h;
        let fp = f(&xp);
        for i in 0..f0.len() {
            jac[i][k] = (fp[i] - f0[i]) / h;
        }
    }
    jac
}

/// One recorded step for [`conservation_audit`].
#[derive(Debug, Clone)]
pub struct MassStep {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub inflow: f64,
    pub outflow: f64,
}

/// Largest relative mass-balance residual over a run,
/// `|M' - M - dt (F_in - F_out)| / max(M, M', dt (F_in + F_out))`.
pub fn conservation_audit(trace: &[MassStep], dx: f64, dt: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in trace {
        let mut m0 = 0.0;
        for x in &s.before {
            m0 += x * dx;
        }
        let mut m1 = 0.0;
        for x in &s.after {
            m1 += x * dx;
        }
        let moved = dt * (s.inflow - s.outflow);
        let residual = (m1 - m0 - moved).abs();
        let mut scale = m0;
        if m1 > scale {
            scale = m1;
        }
        if dt * (s.inflow + s.outflow) > scale {
            scale = dt * (s.inflow + s.outflow);
        }
        if scale > 0.0 {
            let rel = residual / scale;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Spectral radius estimate by power iteration on `A^T A` powers: returns
/// `lim ||A^k x||^(1/k)` approximated with `iters` steps.
pub fn power_iteration_radius(a: &[Vec<f64>], iters: usize) -> f64 {
    let n = a.len();
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.01).collect();
    let mut start = 0.0;
    for v in &x {
        start += v * v;
    }
    let start = start.sqrt();
    for v in x.iter_mut() {
        *v /= start;
    }
    let mut log_growth = 0.0;
    for _ in 0..iters {
        let mut y = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                y[i] += a[i][k] * x[k];
            }
        }
        let mut norm = 0.0;
        for v in &y {
            norm += v * v;
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        log_growth += norm.ln();
        for i in 0..n {
            x[i] = y[i] / norm;
        }
    }
    (log_growth / iters as f64).exp()
}

/// `max_i sum_k |(Z^T H Z - H + Q)_{ik}|`.
pub fn lyapunov_residual(z: &[Vec<f64>], h: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let n = z.len();
    let mut hz = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for m in 0..n {
                hz[i][k] += h[i][m] * z[m][k];
            }
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for k in 0..n {
            let mut ztz = 0.0;
            for m in 0..n {
                ztz += z[m][i] * hz[m][k];
            }
            row += (ztz - h[i][k] + q[i][k]).abs();
        }
        if row > worst {
            worst = row;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn road() -> Road {
        Road {
            v: 33.33,
            r: 0.12,
            lanes: 3,
            dx: 300.0,
            dt: 1.0,
        }
    }

    #[test]
    fn identity_jacobian() {
        let j = fd_jacobian(|x| x.to_vec(), &[1.0, 2.0], 1e-6);
        assert!((j[0][0] - 1.0).abs() < 1e-9 && j[0][1].abs() < 1e-9);
        assert!((j[1][1] - 1.0).abs() < 1e-9 && j[1][0].abs() < 1e-9);
    }

    #[test]
    fn linear_jacobian() {
        let m = [[2.0, -1.0], [0.5, 3.0]];
        let f = |x: &[f64]| {
            vec![
                m[0][0] * x[0] + m[0][1] * x[1],
                m[1][0] * x[0] + m[1][1] * x[1],
            ]
        };
        let j = fd_jacobian(f, &[0.3, -0.2], 1e-6);
        for i in 0..2 {
            for k in 0..2 {
                assert!((j[i][k] - m[i][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn empty_road_stays_empty() {
        let out = straightline_step(&[0.0; 4], &[], 0.0, 0.0, &road());
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn free_flow_is_stationary() {
        let rd = road();
        let f = flow(&rd, 0.03);
        let out = straightline_step(&[0.03; 5], &[], f, 1.0, &rd);
        for x in out {
            assert!((x - 0.03).abs() < 1e-15);
        }
    }

    #[test]
    fn audit_of_nothing_is_zero() {
        assert_eq!(conservation_audit(&[], 300.0, 1.0), 0.0);
    }

    #[test]
    fn one_car_one_step_two_candidates() {
        let rd = road();
        let b = Boundary {
            inflow: vec![0.5],
            outflow: vec![1.0],
            capacity_drop: 0.0,
            queue: 0.0,
        };
        let cars = [Car { id: 0, y: 10.0, u: 0.0 }];
        let best = exhaustive_joint(&[0.03, 0.03], &cars, &b, &rd, 1, &[0.0, 10.0]).unwrap();
        assert_eq!(best.candidates, 2);
        // Only the initial state enters a one-step sum, so both tie.
        assert_eq!(best.plans, vec![vec![0.0]]);
    }

    #[test]
    fn radius_of_scaled_identity() {
        let a = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        assert!((power_iteration_radius(&a, 200) - 0.5).abs() < 1e-9);
    }
}
