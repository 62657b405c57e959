//! Forward solver for the coupled Stokes–Cahn–Hilliard–Oono system.
//!
//! One time step advances the phase first and the flow second:
//!
//! 1. Stabilized semi-implicit Cahn–Hilliard–Oono update with the
//!    chemical potential eliminated. With A = (1+αΔt)I + Δt·Δ² − S·Δt·Δ,
//!
//!    A u⁺ = uⁿ − Δt·∇·(vⁿ uⁿ) + Δt·Δ(f(uⁿ) − S uⁿ),
//!    w⁺  = −Δu⁺ + f(uⁿ) + S(u⁺ − uⁿ).
//!
//!    Taking means kills every Laplacian and the advection flux, leaving
//!    the exact recurrence mean(u⁺) = mean(uⁿ)/(1+αΔt): the Oono term
//!    forces exponential decay of the spatial mean instead of mass
//!    conservation.
//!
//! 2. Incremental pressure projection for the Stokes part:
//!
//!    (I − μΔt·Δ) v* = vⁿ + Δt(−λ(u⁺)_f∇w⁺ + θⁿ − ∇pⁿ),   no-slip,
//!    −Δφ = −∇·v*/Δt  (Neumann, zero mean),
//!    v⁺ = v* − Δt∇φ,   p⁺ = pⁿ + φ.
//!
//! All three solves share one CG kernel; each operator ships its analytic
//! diagonal for Jacobi preconditioning.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, VectorField};
use crate::linsolve::{cg_solve, SolveReport, SolverConfig};
use crate::operators::{
    advect, div_fc, grad_cc, inner_cc, inner_face, laplace_cc, laplace_face, potential,
    potential_d, surface_force,
};

/// Physical and scheme parameters of the state system.
#[derive(Debug, Clone, Copy)]
pub struct PhysParams {
    /// Viscosity μ > 0.
    pub mu: f64,
    /// Interfacial parameter λ > 0 (surface tension scale).
    pub lambda: f64,
    /// Oono coefficient α ≥ 0.
    pub alpha: f64,
    /// Stabilization constant S ≥ 0 of the semi-implicit step.
    pub stab_s: f64,
}

impl PhysParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.stab_s >= 0.0) {
            return Err(Error::Config(format!(
                "stab_S must be nonnegative, got {}",
                self.stab_s
            )));
        }
        Ok(())
    }

    /// The uniqueness/stability analysis of the model needs μ > λ; a
    /// violation is legal input but worth flagging.
    pub fn viscosity_warning(&self) -> Option<String> {
        if self.mu <= self.lambda {
            Some(format!(
                "mu = {} <= lambda = {}: the model's stability estimates assume mu > lambda",
                self.mu, self.lambda
            ))
        } else {
            None
        }
    }
}

/// Uniform partition of (0,T].
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub t_final: f64,
    pub nt: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<Self> {
        if !(t_final > 0.0) {
            return Err(Error::Config(format!(
                "time horizon must be positive, got {t_final}"
            )));
        }
        if nt == 0 {
            return Err(Error::Config("step count nt must be at least 1".into()));
        }
        Ok(Self {
            t_final,
            nt,
            dt: t_final / nt as f64,
        })
    }
}

/// One time level of the state.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub v: VectorField,
    pub u: ScalarField,
    pub w: ScalarField,
    pub p: ScalarField,
}

impl Snapshot {
    pub fn div_inf(&self) -> f64 {
        div_fc(&self.v).max_abs()
    }
}

/// Forward trajectory: nt+1 snapshots plus the nt driving controls.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: GridSpec,
    pub params: PhysParams,
    pub timegrid: TimeGrid,
    pub snapshots: Vec<Snapshot>,
    pub controls: Vec<VectorField>,
}

/// Memory budget for stored trajectories (whole forward history is kept
/// for the backward sweeps; no checkpointing at desk scale).
pub const TRAJECTORY_BUDGET_BYTES: usize = 2 << 30;

pub fn trajectory_bytes(grid: &GridSpec, nt: usize) -> usize {
    let cells = grid.cells();
    let faces = (grid.nx + 1) * grid.ny + grid.nx * (grid.ny + 1);
    // snapshots: v + u + w + p; controls: one face field per step
    (nt + 1) * (faces + 3 * cells) * 8 + nt * faces * 8
}

fn check_budget(grid: &GridSpec, nt: usize) -> Result<()> {
    let need = trajectory_bytes(grid, nt);
    if need > TRAJECTORY_BUDGET_BYTES {
        return Err(Error::Config(format!(
            "trajectory of {} x {} cells over {} steps needs {:.2} GiB, above the {:.2} GiB budget",
            grid.nx,
            grid.ny,
            nt,
            need as f64 / (1u64 << 30) as f64,
            TRAJECTORY_BUDGET_BYTES as f64 / (1u64 << 30) as f64,
        )));
    }
    Ok(())
}

/// Stabilized CH operator A = (1+αΔt)I + Δt·Δ² − S·Δt·Δ and its diagonal.
/// Shared by the forward, linearized and adjoint sweeps.
pub(crate) struct ChOperator {
    pub alpha_dt: f64,
    pub dt: f64,
    pub stab_s: f64,
    pub diag: ScalarField,
}

impl ChOperator {
    pub fn new(grid: &GridSpec, params: &PhysParams, dt: f64) -> Self {
        let (hx2, hy2) = (grid.hx * grid.hx, grid.hy * grid.hy);
        let mut diag = ScalarField::zeros(grid);
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let cx = ((i > 0) as usize + (i + 1 < grid.nx) as usize) as f64;
                let cy = ((j > 0) as usize + (j + 1 < grid.ny) as usize) as f64;
                // Neumann Laplacian row: diagonal −(cx/hx²+cy/hy²),
                // off-diagonals 1/hx² and 1/hy² per existing neighbor.
                let dlap = -(cx / hx2 + cy / hy2);
                let dbih = dlap * dlap + cx / (hx2 * hx2) + cy / (hy2 * hy2);
                diag[(i, j)] =
                    (1.0 + params.alpha * dt) + dt * dbih - params.stab_s * dt * dlap;
            }
        }
        Self {
            alpha_dt: params.alpha * dt,
            dt,
            stab_s: params.stab_s,
            diag,
        }
    }

    pub fn apply(&self, x: &ScalarField) -> ScalarField {
        let lap = laplace_cc(x);
        let bih = laplace_cc(&lap);
        let mut out = x.clone();
        out.scale(1.0 + self.alpha_dt);
        out.axpy(self.dt, &bih);
        out.axpy(-self.stab_s * self.dt, &lap);
        out
    }

    pub fn solve(&self, rhs: &ScalarField, solver: &SolverConfig) -> Result<(ScalarField, SolveReport)> {
        cg_solve(
            |x| self.apply(x),
            rhs,
            solver.cg_tol,
            solver.cg_maxiter,
            false,
            Some(&self.diag),
        )
    }
}

/// Velocity Helmholtz operator (I − μΔt·Δ) on the no-slip subspace:
/// wall-normal entries are treated as identity rows and kept at zero.
pub(crate) struct HelmholtzOperator {
    pub mu_dt: f64,
    pub diag: VectorField,
}

impl HelmholtzOperator {
    pub fn new(grid: &GridSpec, mu: f64, dt: f64) -> Self {
        let (hx2, hy2) = (grid.hx * grid.hx, grid.hy * grid.hy);
        let mut diag = VectorField::constant(grid, 1.0, 1.0);
        for i in 1..grid.nx {
            for j in 0..grid.ny {
                // tangential walls add one odd-reflection unit
                let wy = 2.0 + (j == 0) as usize as f64 + (j + 1 == grid.ny) as usize as f64;
                diag.set_x(i, j, 1.0 + mu * dt * (2.0 / hx2 + wy / hy2));
            }
        }
        for i in 0..grid.nx {
            for j in 1..grid.ny {
                let wx = 2.0 + (i == 0) as usize as f64 + (i + 1 == grid.nx) as usize as f64;
                diag.set_y(i, j, 1.0 + mu * dt * (wx / hx2 + 2.0 / hy2));
            }
        }
        Self { mu_dt: mu * dt, diag }
    }

    pub fn apply(&self, v: &VectorField) -> VectorField {
        let mut out = v.clone();
        out.axpy(-self.mu_dt, &laplace_face(v));
        out.zero_boundary_normals();
        out
    }

    pub fn solve(&self, rhs: &VectorField, solver: &SolverConfig) -> Result<(VectorField, SolveReport)> {
        cg_solve(
            |v| self.apply(v),
            rhs,
            solver.cg_tol,
            solver.cg_maxiter,
            false,
            Some(&self.diag),
        )
    }
}

/// Pressure Poisson operator −Δ (Neumann) with its diagonal.
pub(crate) struct PoissonOperator {
    pub diag: ScalarField,
}

impl PoissonOperator {
    pub fn new(grid: &GridSpec) -> Self {
        let (hx2, hy2) = (grid.hx * grid.hx, grid.hy * grid.hy);
        let mut diag = ScalarField::zeros(grid);
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                let cx = ((i > 0) as usize + (i + 1 < grid.nx) as usize) as f64;
                let cy = ((j > 0) as usize + (j + 1 < grid.ny) as usize) as f64;
                diag[(i, j)] = cx / hx2 + cy / hy2;
            }
        }
        Self { diag }
    }

    pub fn solve(&self, rhs: &ScalarField, solver: &SolverConfig) -> Result<(ScalarField, SolveReport)> {
        cg_solve(
            |x| {
                let mut out = laplace_cc(x);
                out.scale(-1.0);
                out
            },
            rhs,
            solver.cg_tol,
            solver.cg_maxiter,
            true,
            Some(&self.diag),
        )
    }
}

fn require_converged(rep: &SolveReport, context: &'static str, step: usize) -> Result<()> {
    if rep.converged {
        Ok(())
    } else {
        Err(Error::SolverFailure {
            context,
            step,
            residual: rep.final_residual,
            iterations: rep.iterations,
        })
    }
}

/// One Cahn–Hilliard–Oono step; returns (u⁺, w⁺).
pub fn step_cho(
    u_n: &ScalarField,
    v_n: &VectorField,
    params: &PhysParams,
    dt: f64,
    solver: &SolverConfig,
) -> Result<(ScalarField, ScalarField)> {
    u_n.check_finite("step_cho order parameter")?;
    let grid = u_n.grid;
    let op = ChOperator::new(&grid, params, dt);

    let f_n = u_n.map(potential_d);
    let mut expl = f_n.clone();
    expl.axpy(-params.stab_s, u_n);

    let mut rhs = u_n.clone();
    rhs.axpy(-dt, &advect(v_n, u_n)?);
    rhs.axpy(dt, &laplace_cc(&expl));

    let (u_next, rep) = op.solve(&rhs, solver)?;
    require_converged(&rep, "cahn-hilliard step", 0)?;

    // w⁺ = −Δu⁺ + f(uⁿ) + S(u⁺ − uⁿ)
    let mut w_next = laplace_cc(&u_next);
    w_next.scale(-1.0);
    w_next.axpy(1.0, &f_n);
    let mut du = u_next.clone();
    du.axpy(-1.0, u_n);
    w_next.axpy(params.stab_s, &du);

    Ok((u_next, w_next))
}

/// One incremental-projection Stokes step; returns (v⁺, p⁺).
pub fn step_stokes(
    v_n: &VectorField,
    p_n: &ScalarField,
    u_next: &ScalarField,
    w_next: &ScalarField,
    theta_n: &VectorField,
    params: &PhysParams,
    dt: f64,
    solver: &SolverConfig,
) -> Result<(VectorField, ScalarField)> {
    v_n.check_finite("step_stokes velocity")?;
    theta_n.check_finite("step_stokes control")?;
    let grid = v_n.grid;
    let helm = HelmholtzOperator::new(&grid, params.mu, dt);
    let poisson = PoissonOperator::new(&grid);

    let mut rhs = v_n.clone();
    rhs.axpy(dt, &surface_force(u_next, w_next, params.lambda));
    rhs.axpy(dt, theta_n);
    rhs.axpy(-dt, &grad_cc(p_n));
    // restrict to the no-slip subspace: the weak form only sees test
    // functions vanishing on the boundary
    rhs.zero_boundary_normals();

    let (v_star, rep) = helm.solve(&rhs, solver)?;
    require_converged(&rep, "velocity helmholtz solve", 0)?;

    // −Δφ = −∇·v*/Δt, zero-mean Neumann problem
    let mut prhs = div_fc(&v_star);
    prhs.scale(-1.0 / dt);
    let (phi, rep) = poisson.solve(&prhs, solver)?;
    require_converged(&rep, "pressure poisson solve", 0)?;

    let mut v_next = v_star;
    v_next.axpy(-dt, &grad_cc(&phi));
    v_next.zero_boundary_normals();
    let mut p_next = p_n.clone();
    p_next.axpy(1.0, &phi);

    Ok((v_next, p_next))
}

/// Marches the full state system and stores every snapshot.
///
/// Snapshot 0 holds the supplied initial data with w⁰ = −Δu⁰ + f(u⁰)
/// (diagnostics only; the scheme never consumes it) and p⁰ = 0.
pub fn solve_forward(
    u0: &ScalarField,
    v0: &VectorField,
    theta: &[VectorField],
    params: &PhysParams,
    timegrid: &TimeGrid,
    solver: &SolverConfig,
) -> Result<Trajectory> {
    params.validate()?;
    u0.check_finite("initial order parameter")?;
    v0.check_finite("initial velocity")?;
    v0.check_no_slip(1e-12, "initial velocity")?;
    let grid = u0.grid;
    grid.assert_same(&v0.grid);
    if theta.len() != timegrid.nt {
        return Err(Error::LengthMismatch(format!(
            "control sequence has {} entries, expected nt = {}",
            theta.len(),
            timegrid.nt
        )));
    }
    check_budget(&grid, timegrid.nt)?;

    let mut w0 = laplace_cc(u0);
    w0.scale(-1.0);
    w0.axpy(1.0, &u0.map(potential_d));

    let mut snapshots = Vec::with_capacity(timegrid.nt + 1);
    snapshots.push(Snapshot {
        v: v0.clone(),
        u: u0.clone(),
        w: w0,
        p: ScalarField::zeros(&grid),
    });

    for n in 0..timegrid.nt {
        let prev = &snapshots[n];
        let step = |e: Error| match e {
            Error::SolverFailure {
                context,
                residual,
                iterations,
                ..
            } => Error::SolverFailure {
                context,
                step: n,
                residual,
                iterations,
            },
            other => other,
        };
        let (u_next, w_next) =
            step_cho(&prev.u, &prev.v, params, timegrid.dt, solver).map_err(step)?;
        let (v_next, p_next) = step_stokes(
            &prev.v,
            &prev.p,
            &u_next,
            &w_next,
            &theta[n],
            params,
            timegrid.dt,
            solver,
        )
        .map_err(step)?;
        snapshots.push(Snapshot {
            v: v_next,
            u: u_next,
            w: w_next,
            p: p_next,
        });
    }

    Ok(Trajectory {
        grid,
        params: *params,
        timegrid: *timegrid,
        snapshots,
        controls: theta.to_vec(),
    })
}

/// Discrete free + kinetic energy
/// E = ½‖v‖² + (λ/2)‖∇u‖² + λ∫F(u).
pub fn energy(s: &Snapshot, params: &PhysParams) -> f64 {
    let gu = grad_cc(&s.u);
    let f = s.u.map(potential);
    let one = ScalarField::constant(&s.u.grid, 1.0);
    0.5 * inner_face(&s.v, &s.v)
        + 0.5 * params.lambda * inner_face(&gu, &gu)
        + params.lambda * inner_cc(&f, &one)
}

/// Stability ratio of two forward solves against the control distance.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzProbe {
    pub ratio: f64,
    /// Set when θ₁ = θ₂ (ratio is 0 by convention, not by estimate).
    pub identical_controls: bool,
}

/// Runs the state system for both controls from shared data and returns
/// (‖v₁−v₂‖_{L²L²} + ‖u₁−u₂‖_{L∞H¹}) / ‖θ₁−θ₂‖_{L²L²}.
#[allow(clippy::too_many_arguments)]
pub fn lipschitz_probe(
    theta1: &[VectorField],
    theta2: &[VectorField],
    u0: &ScalarField,
    v0: &VectorField,
    params: &PhysParams,
    timegrid: &TimeGrid,
    solver: &SolverConfig,
) -> Result<LipschitzProbe> {
    let dt = timegrid.dt;
    let mut denom2 = 0.0;
    if theta1.len() != theta2.len() {
        return Err(Error::LengthMismatch(
            "control sequences differ in length".into(),
        ));
    }
    for (a, b) in theta1.iter().zip(theta2) {
        let mut d = a.clone();
        d.axpy(-1.0, b);
        denom2 += dt * inner_face(&d, &d);
    }
    if denom2 == 0.0 {
        return Ok(LipschitzProbe {
            ratio: 0.0,
            identical_controls: true,
        });
    }

    let t1 = solve_forward(u0, v0, theta1, params, timegrid, solver)?;
    let t2 = solve_forward(u0, v0, theta2, params, timegrid, solver)?;

    let mut v_l2l2 = 0.0;
    let mut u_linf_h1: f64 = 0.0;
    for n in 1..=timegrid.nt {
        let mut dv = t1.snapshots[n].v.clone();
        dv.axpy(-1.0, &t2.snapshots[n].v);
        v_l2l2 += dt * inner_face(&dv, &dv);

        let mut du = t1.snapshots[n].u.clone();
        du.axpy(-1.0, &t2.snapshots[n].u);
        let gdu = grad_cc(&du);
        u_linf_h1 = u_linf_h1.max(inner_cc(&du, &du) + inner_face(&gdu, &gdu));
    }

    Ok(LipschitzProbe {
        ratio: (v_l2l2.sqrt() + u_linf_h1.sqrt()) / denom2.sqrt(),
        identical_controls: false,
    })
}
