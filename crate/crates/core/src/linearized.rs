//! Sensitivity system around a stored trajectory: the Fréchet derivative
//! of the control-to-state map, realized by differentiating the forward
//! scheme term by term with frozen coefficients (û, v̂, ŵ).
//!
//! Step n → n+1, writing A for the same stabilized operator the forward
//! solver factors through:
//!
//!   A φ₂⁺ = φ₂ⁿ − Δt[∇·(v̂ⁿ φ₂ⁿ) + ∇·(φ₁ⁿ ûⁿ)] + Δt·Δ(f′(ûⁿ)φ₂ⁿ − S φ₂ⁿ),
//!   φ₃⁺  = −Δφ₂⁺ + f′(ûⁿ)φ₂ⁿ + S(φ₂⁺ − φ₂ⁿ),
//!   (I − μΔt·Δ) φ₁* = φ₁ⁿ + Δt(−λ(φ₂⁺)_f∇ŵ⁺ − λ(û⁺)_f∇φ₃⁺ + hⁿ − ∇p̄ⁿ),
//!   projection: φ₁⁺ = φ₁* − Δt∇φ̄,  p̄⁺ = p̄ⁿ + φ̄.
//!
//! Every forward term is linear or bilinear, so this is the exact
//! derivative of one discrete forward step; superposition holds to solver
//! tolerance and the Taylor remainder of the discrete map is genuinely
//! quadratic. φ₂ keeps zero mean for all n (the same telescoping that
//! drives the forward mean recurrence, started from φ₂⁰ = 0).

use crate::error::{Error, Result};
use crate::grid::{ScalarField, VectorField};
use crate::linsolve::SolverConfig;
use crate::operators::{advect, div_fc, grad_cc, laplace_cc, potential_dd, surface_force};
use crate::state::{ChOperator, HelmholtzOperator, PoissonOperator, Trajectory};

/// Solution of the linearized system, indices 0..nt.
#[derive(Debug, Clone)]
pub struct LinTrajectory {
    pub phi1: Vec<VectorField>,
    pub phi2: Vec<ScalarField>,
    pub phi3: Vec<ScalarField>,
}

/// Runs the linearized sweep for the control perturbation `h`.
pub fn solve_linearized(
    base: &Trajectory,
    h: &[VectorField],
    solver: &SolverConfig,
) -> Result<LinTrajectory> {
    let nt = base.timegrid.nt;
    let dt = base.timegrid.dt;
    let grid = base.grid;
    let params = base.params;
    if h.len() != nt {
        return Err(Error::LengthMismatch(format!(
            "perturbation has {} entries, expected nt = {}",
            h.len(),
            nt
        )));
    }
    if base.snapshots.len() != nt + 1 {
        return Err(Error::LengthMismatch(
            "base trajectory is incomplete".into(),
        ));
    }

    let ch = ChOperator::new(&grid, &params, dt);
    let helm = HelmholtzOperator::new(&grid, params.mu, dt);
    let poisson = PoissonOperator::new(&grid);

    let mut phi1 = Vec::with_capacity(nt + 1);
    let mut phi2 = Vec::with_capacity(nt + 1);
    let mut phi3 = Vec::with_capacity(nt + 1);
    phi1.push(VectorField::zeros(&grid));
    phi2.push(ScalarField::zeros(&grid));
    phi3.push(ScalarField::zeros(&grid));
    let mut pbar = ScalarField::zeros(&grid);

    let fail = |e: Error, n: usize| match e {
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

    for n in 0..nt {
        let hat_n = &base.snapshots[n];
        let hat_next = &base.snapshots[n + 1];
        let p2n = &phi2[n];
        let p1n = &phi1[n];

        // d/dε of f(ûⁿ + ε φ₂ⁿ) is f′(ûⁿ)φ₂ⁿ; stabilization differentiates
        // to −S φ₂ⁿ.
        let fp_n = hat_n.u.map(potential_dd);
        let mut expl = ScalarField::zeros(&grid);
        for (o, (&a, &b)) in expl
            .as_mut_slice()
            .iter_mut()
            .zip(fp_n.as_slice().iter().zip(p2n.as_slice()))
        {
            *o = a * b;
        }
        expl.axpy(-params.stab_s, p2n);

        let mut rhs = p2n.clone();
        rhs.axpy(-dt, &advect(&hat_n.v, p2n).map_err(|e| fail(e, n))?);
        rhs.axpy(-dt, &advect(p1n, &hat_n.u).map_err(|e| fail(e, n))?);
        rhs.axpy(dt, &laplace_cc(&expl));

        let (p2_next, rep) = ch.solve(&rhs, solver)?;
        if !rep.converged {
            return Err(Error::SolverFailure {
                context: "linearized cahn-hilliard step",
                step: n,
                residual: rep.final_residual,
                iterations: rep.iterations,
            });
        }

        // φ₃⁺ mirrors the forward chemical-potential reconstruction
        let mut p3_next = laplace_cc(&p2_next);
        p3_next.scale(-1.0);
        let mut fp_p2 = ScalarField::zeros(&grid);
        for (o, (&a, &b)) in fp_p2
            .as_mut_slice()
            .iter_mut()
            .zip(fp_n.as_slice().iter().zip(p2n.as_slice()))
        {
            *o = a * b;
        }
        p3_next.axpy(1.0, &fp_p2);
        let mut dphi = p2_next.clone();
        dphi.axpy(-1.0, p2n);
        p3_next.axpy(params.stab_s, &dphi);

        // linearized surface force: −λ(φ₂⁺)_f ∇ŵ⁺ − λ(û⁺)_f ∇φ₃⁺
        let mut rhs_v = p1n.clone();
        rhs_v.axpy(dt, &surface_force(&p2_next, &hat_next.w, params.lambda));
        rhs_v.axpy(dt, &surface_force(&hat_next.u, &p3_next, params.lambda));
        rhs_v.axpy(dt, &h[n]);
        rhs_v.axpy(-dt, &grad_cc(&pbar));
        rhs_v.zero_boundary_normals();

        let (p1_star, rep) = helm.solve(&rhs_v, solver)?;
        if !rep.converged {
            return Err(Error::SolverFailure {
                context: "linearized helmholtz solve",
                step: n,
                residual: rep.final_residual,
                iterations: rep.iterations,
            });
        }

        let mut prhs = div_fc(&p1_star);
        prhs.scale(-1.0 / dt);
        let (phi_p, rep) = poisson.solve(&prhs, solver)?;
        if !rep.converged {
            return Err(Error::SolverFailure {
                context: "linearized pressure solve",
                step: n,
                residual: rep.final_residual,
                iterations: rep.iterations,
            });
        }

        let mut p1_next = p1_star;
        p1_next.axpy(-dt, &grad_cc(&phi_p));
        p1_next.zero_boundary_normals();
        pbar.axpy(1.0, &phi_p);

        phi1.push(p1_next);
        phi2.push(p2_next);
        phi3.push(p3_next);
    }

    Ok(LinTrajectory { phi1, phi2, phi3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::operators::{inner_cc, inner_face, mean_cc};
    use crate::rng::SplitMix64;
    use crate::state::{solve_forward, PhysParams, TimeGrid};

    fn params() -> PhysParams {
        // λ larger than the forward-solver default so the two-way coupling
        // (and with it the quadratic Taylor term) is well above solver noise
        PhysParams {
            mu: 0.1,
            lambda: 0.05,
            alpha: 0.1,
            stab_s: 2.0,
        }
    }

    fn smooth_direction(grid: &crate::grid::GridSpec, rng: &mut SplitMix64) -> VectorField {
        // low-frequency sine modes: wall-normal components vanish at the walls
        let (lx, ly) = (grid.lx, grid.ly);
        let mut coef = [[0.0; 2]; 4];
        for row in coef.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.uniform(-1.0, 1.0);
            }
        }
        let pi = std::f64::consts::PI;
        VectorField::from_fn(
            grid,
            |x, y| {
                coef[0][0] * (pi * x / lx).sin() * (pi * y / ly).cos()
                    + coef[0][1] * (pi * x / lx).sin() * (2.0 * pi * y / ly).cos()
                    + coef[1][0] * (2.0 * pi * x / lx).sin() * (pi * y / ly).cos()
            },
            |x, y| {
                coef[2][0] * (pi * y / ly).sin() * (pi * x / lx).cos()
                    + coef[2][1] * (pi * y / ly).sin() * (2.0 * pi * x / lx).cos()
                    + coef[3][0] * (2.0 * pi * y / ly).sin() * (pi * x / lx).cos()
            },
        )
    }

    fn base_setup(
        n: usize,
        nt: usize,
        dt: f64,
    ) -> (
        crate::grid::GridSpec,
        Trajectory,
        SolverConfig,
        SplitMix64,
    ) {
        let g = make_grid(n, n, 1.0, 1.0).unwrap();
        let solver = SolverConfig::for_grid(&g).with_tol(1e-12);
        let tg = TimeGrid::new(dt * nt as f64, nt).unwrap();
        let mut rng = SplitMix64::new(77);
        let pi = std::f64::consts::PI;
        let u0 = ScalarField::from_fn(&g, |x, y| 0.5 * (pi * x).cos() * (pi * y).cos());
        let v0 = VectorField::zeros(&g);
        let theta: Vec<_> = (0..nt)
            .map(|_| {
                let mut t = smooth_direction(&g, &mut rng);
                t.scale(2.0);
                t
            })
            .collect();
        let traj = solve_forward(&u0, &v0, &theta, &params(), &tg, &solver).unwrap();
        (g, traj, solver, rng)
    }

    #[test]
    fn zero_perturbation_gives_zero_sensitivity() {
        let (g, traj, solver, _) = base_setup(8, 6, 1e-3);
        let h = vec![VectorField::zeros(&g); 6];
        let lin = solve_linearized(&traj, &h, &solver).unwrap();
        for n in 0..=6 {
            assert_eq!(lin.phi1[n].max_abs(), 0.0);
            assert_eq!(lin.phi2[n].max_abs(), 0.0);
            assert_eq!(lin.phi3[n].max_abs(), 0.0);
        }
    }

    #[test]
    fn initial_conditions_and_divergence() {
        let (g, traj, solver, mut rng) = base_setup(8, 6, 1e-3);
        let h: Vec<_> = (0..6).map(|_| smooth_direction(&g, &mut rng)).collect();
        let lin = solve_linearized(&traj, &h, &solver).unwrap();
        assert_eq!(lin.phi1[0].max_abs(), 0.0);
        assert_eq!(lin.phi2[0].max_abs(), 0.0);
        for n in 0..=6 {
            assert!(div_fc(&lin.phi1[n]).max_abs() < 1e-8);
            assert!(mean_cc(&lin.phi2[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_linearity() {
        let (g, traj, solver, mut rng) = base_setup(8, 6, 1e-3);
        let h: Vec<_> = (0..6).map(|_| smooth_direction(&g, &mut rng)).collect();
        let h2: Vec<_> = h
            .iter()
            .map(|f| {
                let mut d = f.clone();
                d.scale(2.0);
                d
            })
            .collect();
        let a = solve_linearized(&traj, &h, &solver).unwrap();
        let b = solve_linearized(&traj, &h2, &solver).unwrap();
        for n in 0..=6 {
            let mut d = b.phi2[n].clone();
            d.axpy(-2.0, &a.phi2[n]);
            let scale = b.phi2[n].max_abs().max(1e-30);
            assert!(d.max_abs() / scale < 1e-9);
            let mut d = b.phi1[n].clone();
            d.axpy(-2.0, &a.phi1[n]);
            let scale = b.phi1[n].max_abs().max(1e-30);
            assert!(d.max_abs() / scale < 1e-9);
        }
    }

    #[test]
    fn superposition() {
        let (g, traj, solver, mut rng) = base_setup(8, 6, 1e-3);
        let h1: Vec<_> = (0..6).map(|_| smooth_direction(&g, &mut rng)).collect();
        let h2: Vec<_> = (0..6).map(|_| smooth_direction(&g, &mut rng)).collect();
        let hsum: Vec<_> = h1
            .iter()
            .zip(&h2)
            .map(|(a, b)| {
                let mut s = a.clone();
                s.axpy(1.0, b);
                s
            })
            .collect();
        let la = solve_linearized(&traj, &h1, &solver).unwrap();
        let lb = solve_linearized(&traj, &h2, &solver).unwrap();
        let ls = solve_linearized(&traj, &hsum, &solver).unwrap();
        for n in 0..=6 {
            let mut d = ls.phi2[n].clone();
            d.axpy(-1.0, &la.phi2[n]);
            d.axpy(-1.0, &lb.phi2[n]);
            let scale = ls.phi2[n].max_abs().max(1e-30);
            assert!(d.max_abs() / scale < 1e-10, "phi2 superposition at {n}");
            let mut d = ls.phi1[n].clone();
            d.axpy(-1.0, &la.phi1[n]);
            d.axpy(-1.0, &lb.phi1[n]);
            let scale = ls.phi1[n].max_abs().max(1e-30);
            assert!(d.max_abs() / scale < 1e-10, "phi1 superposition at {n}");
        }
    }

    #[test]
    fn taylor_remainder_is_second_order() {
        // ‖S(θ+εh) − S(θ) − ε·DS(θ)h‖ in the discrete L²(L²) norm decays
        // quadratically: two forward solves per ε against one linearized
        // solve.
        let nt = 30;
        let (g, traj, solver, mut rng) = base_setup(16, nt, 1e-3);
        let h: Vec<_> = (0..nt)
            .map(|_| {
                let mut d = smooth_direction(&g, &mut rng);
                d.scale(10.0);
                d
            })
            .collect();
        let lin = solve_linearized(&traj, &h, &solver).unwrap();

        let u0 = traj.snapshots[0].u.clone();
        let v0 = traj.snapshots[0].v.clone();
        let dt = traj.timegrid.dt;

        let mut remainders = Vec::new();
        let epsilons = [1e-1, 3e-2, 1e-2, 3e-3];
        for &eps in &epsilons {
            let theta_eps: Vec<_> = traj
                .controls
                .iter()
                .zip(&h)
                .map(|(t, d)| {
                    let mut x = t.clone();
                    x.axpy(eps, d);
                    x
                })
                .collect();
            let pert =
                solve_forward(&u0, &v0, &theta_eps, &traj.params, &traj.timegrid, &solver)
                    .unwrap();
            let mut acc = 0.0;
            for n in 1..=nt {
                let mut dv = pert.snapshots[n].v.clone();
                dv.axpy(-1.0, &traj.snapshots[n].v);
                dv.axpy(-eps, &lin.phi1[n]);
                let mut du = pert.snapshots[n].u.clone();
                du.axpy(-1.0, &traj.snapshots[n].u);
                du.axpy(-eps, &lin.phi2[n]);
                acc += dt * (inner_face(&dv, &dv) + inner_cc(&du, &du));
            }
            remainders.push(acc.sqrt());
        }
        for k in 0..remainders.len() - 1 {
            let order = (remainders[k] / remainders[k + 1]).ln()
                / (epsilons[k] / epsilons[k + 1]).ln();
            assert!(
                order >= 1.8,
                "Taylor order {order:.3} between eps {} and {} (remainders {:?})",
                epsilons[k],
                epsilons[k + 1],
                remainders
            );
        }
    }
}
