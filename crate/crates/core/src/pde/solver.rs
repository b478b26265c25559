//! Reference solvers for the four benchmark families.
//!
//! * advection: exact characteristic shift (analytic for sinusoid initial
//!   data, Fourier phase shift for raw fields);
//! * Burgers: finite volumes, MUSCL/minmod reconstruction with a local
//!   Lax-Friedrichs flux, central diffusion, SSP-RK3 substeps;
//! * Fisher-KPP: Strang splitting of an exact spectral heat step and the
//!   exact logistic flow;
//! * FitzHugh-Nagumo 2D: RK4 substeps with a cell-centred no-flow Laplacian.

use std::f64::consts::PI;

use super::{Boundary, EquationSpec, GridSpec, InitialState, PdeError, Result, Trajectory};
use crate::tensor::{fft, Tensor};

pub const ADVECTIVE_CFL_LIMIT: f64 = 0.4;
pub const DIFFUSIVE_CFL_LIMIT: f64 = 0.4;

/// Integrates `eq` from `init` and stores `grid.snapshots()` states.
pub fn solve_trajectory(eq: &EquationSpec, grid: &GridSpec, init: &InitialState) -> Result<Trajectory> {
    grid.validate()?;
    eq.validate()?;
    let family = eq.family();
    if grid.spatial_dims() != family.spatial_dims() {
        return Err(PdeError::InvalidGrid(format!(
            "{family} needs {} spatial dims, grid has {}",
            family.spatial_dims(),
            grid.spatial_dims()
        )));
    }
    let mut field_shape = vec![family.n_vars()];
    field_shape.extend_from_slice(&grid.points);

    let states = match (eq, init) {
        (EquationSpec::Advection { beta }, InitialState::Sinusoids(ic)) => {
            let coords = grid.coords(0, Boundary::Periodic);
            let snaps: Vec<Tensor> = (0..grid.snapshots())
                .map(|n| ic.field(&coords, beta * n as f64 * grid.snapshot_dt))
                .collect();
            Tensor::stack(&snaps).expect("equal snapshot shapes")
        }
        (_, InitialState::Sinusoids(ic)) => {
            let u0 = ic.field(&grid.coords(0, Boundary::Periodic), 0.0);
            return solve_trajectory(eq, grid, &InitialState::Field(u0));
        }
        (_, InitialState::Field(u0)) => {
            if u0.shape() != field_shape.as_slice() {
                return Err(PdeError::InitialCondition(format!(
                    "initial field {:?} does not match grid {:?}",
                    u0.shape(),
                    field_shape
                )));
            }
            if !u0.is_finite() {
                return Err(PdeError::NonFinite {
                    snapshot: 0,
                    detail: "initial condition".into(),
                });
            }
            match *eq {
                EquationSpec::Advection { beta } => advection_spectral(u0, beta, grid),
                EquationSpec::Burgers { nu } => burgers(u0, nu, grid)?,
                EquationSpec::ReactionDiffusion1d { nu, rho } => fisher_kpp(u0, nu, rho, grid)?,
                EquationSpec::ReactionDiffusion2d { k, du, dv } => fitzhugh_nagumo(u0, k, du, dv, grid)?,
            }
        }
    };

    for n in 0..grid.snapshots() {
        if !states.index_outer(n).is_finite() {
            return Err(PdeError::NonFinite {
                snapshot: n,
                detail: format!("{eq:?}"),
            });
        }
    }
    Ok(Trajectory {
        params: eq.params(),
        states,
        equation: eq.clone(),
        grid: grid.clone(),
    })
}

/// Smallest substep count keeping both Burgers CFL numbers within limits
/// for solutions bounded by `u_max` and viscosities up to `nu_max`.
pub fn burgers_substeps(grid: &GridSpec, nu_max: f64, u_max: f64) -> usize {
    let dx = grid.dx(0);
    let adv = u_max * grid.snapshot_dt / (ADVECTIVE_CFL_LIMIT * dx);
    let diff = PI * nu_max * grid.snapshot_dt / (DIFFUSIVE_CFL_LIMIT * dx * dx);
    (adv.max(diff) * (1.0 + 1e-9)).ceil().max(1.0) as usize
}

fn advection_spectral(u0: &Tensor, beta: f64, grid: &GridSpec) -> Tensor {
    let n = grid.points[0];
    let len = grid.length(0);
    let spec0 = fft::rfft_rows(u0.data(), n);
    let snaps: Vec<Tensor> = (0..grid.snapshots())
        .map(|s| {
            let shift = beta * s as f64 * grid.snapshot_dt;
            let mut spec = spec0.clone();
            for m in 0..fft::half_len(n) {
                let th = -2.0 * PI * m as f64 * shift / len;
                let (c, si) = (th.cos(), th.sin());
                let (re, im) = (spec[2 * m], spec[2 * m + 1]);
                spec[2 * m] = re * c - im * si;
                spec[2 * m + 1] = re * si + im * c;
            }
            Tensor::new(vec![1, n], fft::irfft_rows(&spec, n)).expect("row shape")
        })
        .collect();
    Tensor::stack(&snaps).expect("equal snapshot shapes")
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Semi-discrete Burgers right-hand side on a periodic grid.
fn burgers_rhs(u: &[f64], nu: f64, dx: f64, out: &mut [f64], flux: &mut [f64]) {
    let n = u.len();
    let at = |i: isize| u[i.rem_euclid(n as isize) as usize];
    // flux[j] lives on the interface j+1/2
    for j in 0..n as isize {
        let (um, u0, u1, u2) = (at(j - 1), at(j), at(j + 1), at(j + 2));
        let ul = u0 + 0.5 * minmod(u0 - um, u1 - u0);
        let ur = u1 - 0.5 * minmod(u1 - u0, u2 - u1);
        let a = ul.abs().max(ur.abs());
        flux[j as usize] = 0.25 * (ul * ul + ur * ur) - 0.5 * a * (ur - ul);
    }
    let visc = PI * nu / (dx * dx);
    for j in 0..n {
        let jm = (j + n - 1) % n;
        let jp = (j + 1) % n;
        out[j] = -(flux[j] - flux[jm]) / dx + visc * (u[jp] - 2.0 * u[j] + u[jm]);
    }
}

fn burgers(u0: &Tensor, nu: f64, grid: &GridSpec) -> Result<Tensor> {
    let n = grid.points[0];
    let dx = grid.dx(0);
    let dt = grid.snapshot_dt / grid.internal_substeps as f64;
    let diff_number = PI * nu * dt / (dx * dx);
    if diff_number > DIFFUSIVE_CFL_LIMIT {
        return Err(PdeError::CflViolation {
            what: "diffusive",
            number: diff_number,
            limit: DIFFUSIVE_CFL_LIMIT,
        });
    }
    let mut u = u0.data().to_vec();
    let (mut k, mut flux) = (vec![0.0; n], vec![0.0; n]);
    let (mut u1, mut u2) = (vec![0.0; n], vec![0.0; n]);
    let mut snaps = vec![u0.clone()];
    for s in 1..grid.snapshots() {
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let adv_number = umax * dt / dx;
        if adv_number > ADVECTIVE_CFL_LIMIT {
            return Err(PdeError::CflViolation {
                what: "advective",
                number: adv_number,
                limit: ADVECTIVE_CFL_LIMIT,
            });
        }
        for _ in 0..grid.internal_substeps {
            burgers_rhs(&u, nu, dx, &mut k, &mut flux);
            for j in 0..n {
                u1[j] = u[j] + dt * k[j];
            }
            burgers_rhs(&u1, nu, dx, &mut k, &mut flux);
            for j in 0..n {
                u2[j] = 0.75 * u[j] + 0.25 * (u1[j] + dt * k[j]);
            }
            burgers_rhs(&u2, nu, dx, &mut k, &mut flux);
            for j in 0..n {
                u[j] = u[j] / 3.0 + 2.0 / 3.0 * (u2[j] + dt * k[j]);
            }
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite {
                snapshot: s,
                detail: format!("burgers nu={nu}"),
            });
        }
        snaps.push(Tensor::new(vec![1, n], u.clone()).expect("row shape"));
    }
    Ok(Tensor::stack(&snaps).expect("equal snapshot shapes"))
}

/// Exact logistic flow `u' = rho u (1 - u)` over `tau`.
fn logistic_step(u: &mut [f64], rho: f64, tau: f64, snapshot: usize) -> Result<()> {
    if rho == 0.0 {
        return Ok(());
    }
    let e = (rho * tau).exp();
    for v in u.iter_mut() {
        let denom = 1.0 - *v + *v * e;
        if !(denom > 0.0) {
            return Err(PdeError::NonFinite {
                snapshot,
                detail: format!("logistic step diverges at u={v}"),
            });
        }
        *v = *v * e / denom;
    }
    Ok(())
}

fn fisher_kpp(u0: &Tensor, nu: f64, rho: f64, grid: &GridSpec) -> Result<Tensor> {
    let n = grid.points[0];
    let len = grid.length(0);
    let dt = grid.snapshot_dt / grid.internal_substeps as f64;
    let decay: Vec<f64> = (0..fft::half_len(n))
        .map(|m| {
            let k = 2.0 * PI * m as f64 / len;
            (-nu * k * k * dt).exp()
        })
        .collect();
    let mut u = u0.data().to_vec();
    let mut snaps = vec![u0.clone()];
    for s in 1..grid.snapshots() {
        for _ in 0..grid.internal_substeps {
            logistic_step(&mut u, rho, 0.5 * dt, s)?;
            if nu != 0.0 {
                let mut spec = fft::rfft_rows(&u, n);
                for (m, f) in decay.iter().enumerate() {
                    spec[2 * m] *= f;
                    spec[2 * m + 1] *= f;
                }
                u = fft::irfft_rows(&spec, n);
            }
            logistic_step(&mut u, rho, 0.5 * dt, s)?;
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite {
                snapshot: s,
                detail: format!("fisher-kpp nu={nu} rho={rho}"),
            });
        }
        snaps.push(Tensor::new(vec![1, n], u.clone()).expect("row shape"));
    }
    Ok(Tensor::stack(&snaps).expect("equal snapshot shapes"))
}

/// Five-point Laplacian with mirrored ghost cells (zero normal flux).
fn neumann_laplacian(f: &[f64], nx: usize, ny: usize, dx: f64, dy: f64, out: &mut [f64]) {
    let (ix2, iy2) = (1.0 / (dx * dx), 1.0 / (dy * dy));
    for i in 0..nx {
        let im = if i == 0 { 0 } else { i - 1 };
        let ip = if i + 1 == nx { i } else { i + 1 };
        for j in 0..ny {
            let jm = if j == 0 { 0 } else { j - 1 };
            let jp = if j + 1 == ny { j } else { j + 1 };
            let c = f[i * ny + j];
            out[i * ny + j] =
                (f[ip * ny + j] - 2.0 * c + f[im * ny + j]) * ix2 + (f[i * ny + jp] - 2.0 * c + f[i * ny + jm]) * iy2;
        }
    }
}

struct FhnRhs {
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
    k: f64,
    du: f64,
    dv: f64,
    lap: Vec<f64>,
}

impl FhnRhs {
    /// `state` holds u then v, each `nx * ny`.
    fn eval(&mut self, state: &[f64], out: &mut [f64]) {
        let m = self.nx * self.ny;
        let (u, v) = state.split_at(m);
        let (ou, ov) = out.split_at_mut(m);
        neumann_laplacian(u, self.nx, self.ny, self.dx, self.dy, &mut self.lap);
        for i in 0..m {
            ou[i] = self.du * self.lap[i] + u[i] - u[i] * u[i] * u[i] - self.k - v[i];
        }
        neumann_laplacian(v, self.nx, self.ny, self.dx, self.dy, &mut self.lap);
        for i in 0..m {
            ov[i] = self.dv * self.lap[i] + u[i] - v[i];
        }
    }
}

fn fitzhugh_nagumo(u0: &Tensor, k: f64, du: f64, dv: f64, grid: &GridSpec) -> Result<Tensor> {
    let (nx, ny) = (grid.points[0], grid.points[1]);
    let (dx, dy) = (grid.dx(0), grid.dx(1));
    let dt = grid.snapshot_dt / grid.internal_substeps as f64;
    let diff_number = du.max(dv) * dt * (1.0 / (dx * dx) + 1.0 / (dy * dy));
    if diff_number > DIFFUSIVE_CFL_LIMIT {
        return Err(PdeError::CflViolation {
            what: "diffusive",
            number: diff_number,
            limit: DIFFUSIVE_CFL_LIMIT,
        });
    }
    let mut rhs = FhnRhs {
        nx,
        ny,
        dx,
        dy,
        k,
        du,
        dv,
        lap: vec![0.0; nx * ny],
    };
    let len = 2 * nx * ny;
    let mut y = u0.data().to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
    let mut tmp = vec![0.0; len];
    let mut snaps = vec![u0.clone()];
    for s in 1..grid.snapshots() {
        for _ in 0..grid.internal_substeps {
            rhs.eval(&y, &mut k1);
            for i in 0..len {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            rhs.eval(&tmp, &mut k2);
            for i in 0..len {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            rhs.eval(&tmp, &mut k3);
            for i in 0..len {
                tmp[i] = y[i] + dt * k3[i];
            }
            rhs.eval(&tmp, &mut k4);
            for i in 0..len {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(PdeError::NonFinite {
                snapshot: s,
                detail: format!("fitzhugh-nagumo k={k}"),
            });
        }
        snaps.push(Tensor::new(vec![2, nx, ny], y.clone()).expect("field shape"));
    }
    Ok(Tensor::stack(&snaps).expect("equal snapshot shapes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{SinusoidIc, Wave};

    fn sine_ic() -> SinusoidIc {
        SinusoidIc {
            waves: vec![Wave {
                amplitude: 1.0,
                mode: 1,
                phase: 0.0,
            }],
            length: 1.0,
        }
    }

    #[test]
    fn advection_half_time_shift() {
        let grid = GridSpec::new_1d(64, (0.0, 1.0), 0.05, 0.5, 1);
        let tr = solve_trajectory(
            &EquationSpec::Advection { beta: 0.5 },
            &grid,
            &InitialState::Sinusoids(sine_ic()),
        )
        .unwrap();
        let last = tr.states.index_outer(10);
        for (j, x) in grid.coords(0, Boundary::Periodic).iter().enumerate() {
            let exact = (2.0 * PI * (x - 0.25)).sin();
            assert!((last.data()[j] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn advection_field_path_matches_analytic() {
        let grid = GridSpec::new_1d(64, (0.0, 1.0), 0.05, 0.5, 1);
        let ic = SinusoidIc {
            waves: vec![
                Wave {
                    amplitude: 0.7,
                    mode: 3,
                    phase: 1.1,
                },
                Wave {
                    amplitude: 0.2,
                    mode: 8,
                    phase: 4.0,
                },
            ],
            length: 1.0,
        };
        let eq = EquationSpec::Advection { beta: 0.37 };
        let exact = solve_trajectory(&eq, &grid, &InitialState::Sinusoids(ic.clone())).unwrap();
        let u0 = ic.field(&grid.coords(0, Boundary::Periodic), 0.0);
        let spectral = solve_trajectory(&eq, &grid, &InitialState::Field(u0)).unwrap();
        assert!(exact.states.max_abs_diff(&spectral.states) < 1e-12);
    }

    #[test]
    fn logistic_closed_form() {
        let grid = GridSpec::new_1d(16, (0.0, 1.0), 0.05, 0.5, 50);
        let u0 = Tensor::full(&[1, 16], 0.5);
        let tr = solve_trajectory(
            &EquationSpec::ReactionDiffusion1d { nu: 0.0, rho: 1.0 },
            &grid,
            &InitialState::Field(u0),
        )
        .unwrap();
        let e = 0.5f64.exp();
        let expected = e / (1.0 + e);
        assert!(tr
            .states
            .index_outer(10)
            .data()
            .iter()
            .all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn burgers_conserves_mass() {
        let grid = GridSpec::new_1d(64, (0.0, 1.0), 0.005, 0.5, 8);
        let ic = SinusoidIc {
            waves: vec![
                Wave {
                    amplitude: 0.8,
                    mode: 2,
                    phase: 0.3,
                },
                Wave {
                    amplitude: 0.5,
                    mode: 5,
                    phase: 2.0,
                },
            ],
            length: 1.0,
        };
        let u0 = ic.field(&grid.coords(0, Boundary::Periodic), 0.0).map(|v| v + 0.3);
        let tr = solve_trajectory(
            &EquationSpec::Burgers { nu: 0.01 },
            &grid,
            &InitialState::Field(u0.clone()),
        )
        .unwrap();
        let m0: f64 = u0.data().iter().sum();
        let scale: f64 = u0.data().iter().map(|v| v.abs()).sum();
        for s in 1..grid.snapshots() {
            let m: f64 = tr.states.index_outer(s).data().iter().sum();
            assert!((m - m0).abs() <= 1e-8 * scale, "snapshot {s}");
        }
    }

    #[test]
    fn burgers_flags_cfl_violation() {
        let grid = GridSpec::new_1d(128, (0.0, 1.0), 0.005, 0.05, 1);
        let u0 = Tensor::full(&[1, 128], 1.5);
        let err = solve_trajectory(&EquationSpec::Burgers { nu: 0.02 }, &grid, &InitialState::Field(u0)).unwrap_err();
        assert!(matches!(err, PdeError::CflViolation { .. }));
        let needed = burgers_substeps(&grid, 0.02, 1.5);
        let grid = GridSpec {
            internal_substeps: needed,
            ..grid
        };
        let u0 = Tensor::full(&[1, 128], 1.5);
        assert!(solve_trajectory(&EquationSpec::Burgers { nu: 0.02 }, &grid, &InitialState::Field(u0)).is_ok());
    }

    #[test]
    fn logistic_blow_up_is_reported() {
        let grid = GridSpec::new_1d(8, (0.0, 1.0), 0.5, 2.0, 10);
        let u0 = Tensor::full(&[1, 8], -3.0);
        let err = solve_trajectory(
            &EquationSpec::ReactionDiffusion1d { nu: 0.0, rho: 1.0 },
            &grid,
            &InitialState::Field(u0),
        )
        .unwrap_err();
        assert!(matches!(err, PdeError::NonFinite { .. }));
    }

    #[test]
    fn neumann_laplacian_of_uniform_is_zero() {
        let f = vec![0.37; 20];
        let mut out = vec![1.0; 20];
        neumann_laplacian(&f, 4, 5, 0.1, 0.2, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_field_shape_rejected() {
        let grid = GridSpec::new_1d(16, (0.0, 1.0), 0.05, 0.5, 1);
        let err = solve_trajectory(
            &EquationSpec::Burgers { nu: 0.01 },
            &grid,
            &InitialState::Field(Tensor::zeros(&[1, 8])),
        )
        .unwrap_err();
        assert!(matches!(err, PdeError::InitialCondition(_)));
    }
}
