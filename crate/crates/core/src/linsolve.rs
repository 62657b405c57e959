//! Matrix-free preconditioned conjugate gradients.
//!
//! Every linear system in a time step (stabilized Cahn–Hilliard update,
//! velocity Helmholtz solve, pressure Poisson) is symmetric positive
//! (semi-)definite, so one solver covers all of them. Operators are
//! closures; the optional diagonal enables Jacobi preconditioning; the
//! `nullspace_mean` flag handles the Neumann pressure problem by keeping
//! the whole iteration in the zero-mean subspace.

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ScalarField, VectorField};

/// Convergence record of a single solve. `final_residual` is relative to
/// the right-hand side norm.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

/// Shared tolerance/iteration budget for the per-step solves.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub cg_tol: f64,
    pub cg_maxiter: usize,
}

impl SolverConfig {
    /// Default budget: relative tolerance 1e-10 and 10·(nx·ny) iterations,
    /// far below the scheme's own O(Δt, h²) error.
    pub fn for_grid(grid: &GridSpec) -> Self {
        Self {
            cg_tol: 1e-10,
            cg_maxiter: 10 * grid.cells(),
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.cg_tol = tol;
        self
    }
}

/// Minimal vector-space interface CG needs; implemented by both field
/// layouts. `dot` is the plain Euclidean product — relative residuals are
/// norm-agnostic and the step operators are symmetric under it.
pub trait CgField: Clone {
    fn dot(&self, other: &Self) -> f64;
    fn axpy(&mut self, a: f64, x: &Self);
    /// self = x + a·self (used for the direction update).
    fn xpay(&mut self, a: f64, x: &Self);
    fn zeros_like(&self) -> Self;
    /// Pointwise division by a diagonal field (Jacobi application).
    fn div_pointwise(&self, diag: &Self) -> Self;
    /// Subtract the mean so the field lies in the zero-mean subspace.
    fn remove_mean(&mut self);
    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

impl CgField for ScalarField {
    fn dot(&self, other: &Self) -> f64 {
        self.grid.assert_same(&other.grid);
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        ScalarField::axpy(self, a, x);
    }

    fn xpay(&mut self, a: f64, x: &Self) {
        self.grid.assert_same(&x.grid);
        for (s, &v) in self.as_mut_slice().iter_mut().zip(x.as_slice()) {
            *s = v + a * *s;
        }
    }

    fn zeros_like(&self) -> Self {
        ScalarField::zeros(&self.grid)
    }

    fn div_pointwise(&self, diag: &Self) -> Self {
        self.grid.assert_same(&diag.grid);
        let mut out = self.clone();
        for (s, &d) in out.as_mut_slice().iter_mut().zip(diag.as_slice()) {
            *s /= d;
        }
        out
    }

    fn remove_mean(&mut self) {
        let m = self.as_slice().iter().sum::<f64>() / self.as_slice().len() as f64;
        for s in self.as_mut_slice() {
            *s -= m;
        }
    }
}

impl CgField for VectorField {
    fn dot(&self, other: &Self) -> f64 {
        self.grid.assert_same(&other.grid);
        let x: f64 = self
            .x_slice()
            .iter()
            .zip(other.x_slice())
            .map(|(&a, &b)| a * b)
            .sum();
        let y: f64 = self
            .y_slice()
            .iter()
            .zip(other.y_slice())
            .map(|(&a, &b)| a * b)
            .sum();
        x + y
    }

    fn axpy(&mut self, a: f64, x: &Self) {
        VectorField::axpy(self, a, x);
    }

    fn xpay(&mut self, a: f64, x: &Self) {
        self.grid.assert_same(&x.grid);
        for (s, &v) in self.x_mut_slice().iter_mut().zip(x.x_slice()) {
            *s = v + a * *s;
        }
        for (s, &v) in self.y_mut_slice().iter_mut().zip(x.y_slice()) {
            *s = v + a * *s;
        }
    }

    fn zeros_like(&self) -> Self {
        VectorField::zeros(&self.grid)
    }

    fn div_pointwise(&self, diag: &Self) -> Self {
        self.grid.assert_same(&diag.grid);
        let mut out = self.clone();
        for (s, &d) in out.x_mut_slice().iter_mut().zip(diag.x_slice()) {
            *s /= d;
        }
        for (s, &d) in out.y_mut_slice().iter_mut().zip(diag.y_slice()) {
            *s /= d;
        }
        out
    }

    fn remove_mean(&mut self) {
        let mx = self.x_slice().iter().sum::<f64>() / self.x_slice().len() as f64;
        for s in self.x_mut_slice() {
            *s -= mx;
        }
        let my = self.y_slice().iter().sum::<f64>() / self.y_slice().len() as f64;
        for s in self.y_mut_slice() {
            *s -= my;
        }
    }
}

/// Solves apply(x) = rhs by (optionally Jacobi-preconditioned) CG.
///
/// With `nullspace_mean` the rhs is projected to zero mean and the
/// returned solution has zero mean; the operator must preserve that
/// subspace (the Neumann Laplacian does, exactly).
///
/// Non-finite values abort with `Error::Breakdown`; running out of
/// iterations returns `converged = false` and leaves the decision to the
/// caller.
pub fn cg_solve<F, A>(
    apply: A,
    rhs: &F,
    tol: f64,
    maxiter: usize,
    nullspace_mean: bool,
    jacobi_diag: Option<&F>,
) -> Result<(F, SolveReport)>
where
    F: CgField,
    A: Fn(&F) -> F,
{
    let mut b = rhs.clone();
    if nullspace_mean {
        b.remove_mean();
    }
    let bnorm = b.norm();
    if !bnorm.is_finite() {
        return Err(Error::NonFinite("cg right-hand side"));
    }
    if bnorm == 0.0 {
        return Ok((
            rhs.zeros_like(),
            SolveReport {
                iterations: 0,
                final_residual: 0.0,
                converged: true,
            },
        ));
    }

    let precondition = |r: &F| -> F {
        let mut z = match jacobi_diag {
            Some(d) => r.div_pointwise(d),
            None => r.clone(),
        };
        if nullspace_mean {
            z.remove_mean();
        }
        z
    };

    let mut x = rhs.zeros_like();
    let mut r = b.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);

    let mut iterations = 0;
    let mut res = r.norm() / bnorm;
    let mut converged = res <= tol;

    while !converged && iterations < maxiter {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        let alpha = rz / pap;
        if !alpha.is_finite() {
            return Err(Error::Breakdown {
                context: "cg step length",
                iteration: iterations,
            });
        }
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        iterations += 1;

        res = r.norm() / bnorm;
        if !res.is_finite() {
            return Err(Error::Breakdown {
                context: "cg residual",
                iteration: iterations,
            });
        }
        if res <= tol {
            converged = true;
            break;
        }

        z = precondition(&r);
        let rz_next = r.dot(&z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.xpay(beta, &z);
    }

    if nullspace_mean {
        x.remove_mean();
    }
    Ok((
        x,
        SolveReport {
            iterations,
            final_residual: res,
            converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::operators::{laplace_cc, mean_cc};
    use crate::rng::SplitMix64;

    #[test]
    fn identity_converges_immediately() {
        let g = make_grid(8, 8, 1.0, 1.0).unwrap();
        let mut rng = SplitMix64::new(1);
        let rhs = rng.scalar_field(&g, -1.0, 1.0);
        let (x, rep) = cg_solve(|v: &ScalarField| v.clone(), &rhs, 1e-12, 100, false, None).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 1);
        let mut d = x;
        d.axpy(-1.0, &rhs);
        assert!(d.max_abs() < 1e-12);
    }

    #[test]
    fn diagonal_scaling() {
        let g = make_grid(8, 8, 1.0, 1.0).unwrap();
        let rhs = ScalarField::constant(&g, 8.0);
        let (x, rep) = cg_solve(
            |v: &ScalarField| v.map(|e| 4.0 * e),
            &rhs,
            1e-12,
            100,
            false,
            None,
        )
        .unwrap();
        assert!(rep.converged);
        for &e in x.as_slice() {
            assert!((e - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn helmholtz_residual_recheck() {
        // (I − εΔ) with Neumann Δ; recompute the residual independently.
        let g = make_grid(16, 16, 1.0, 1.0).unwrap();
        let eps = 0.05;
        let apply = |u: &ScalarField| {
            let mut out = u.clone();
            out.axpy(-eps, &laplace_cc(u));
            out
        };
        let mut rng = SplitMix64::new(2);
        let rhs = rng.scalar_field(&g, -1.0, 1.0);
        let (x, rep) = cg_solve(apply, &rhs, 1e-10, 10_000, false, None).unwrap();
        assert!(rep.converged);
        let mut r = rhs.clone();
        r.axpy(-1.0, &apply(&x));
        let rel = CgField::norm(&r) / CgField::norm(&rhs);
        assert!(rel <= 1e-10, "recomputed residual {rel}");
        // the reported residual matches the recomputation up to rounding slack
        assert!((rel - rep.final_residual).abs() <= 1e-12 + 10.0 * f64::EPSILON / rel.max(1e-30));
    }

    #[test]
    fn jacobi_preconditioning_agrees_with_plain_cg() {
        let g = make_grid(12, 12, 1.0, 1.0).unwrap();
        let eps = 0.05;
        let apply = |u: &ScalarField| {
            let mut out = u.clone();
            out.axpy(-eps, &laplace_cc(u));
            out
        };
        // analytic diagonal of I − εΔ with Neumann ghosts
        let mut diag = ScalarField::zeros(&g);
        let (hx2, hy2) = (g.hx * g.hx, g.hy * g.hy);
        for i in 0..g.nx {
            for j in 0..g.ny {
                let cx = (i > 0) as usize + (i + 1 < g.nx) as usize;
                let cy = (j > 0) as usize + (j + 1 < g.ny) as usize;
                diag[(i, j)] = 1.0 + eps * (cx as f64 / hx2 + cy as f64 / hy2);
            }
        }
        let mut rng = SplitMix64::new(4);
        let rhs = rng.scalar_field(&g, -1.0, 1.0);
        let (xp, repp) = cg_solve(apply, &rhs, 1e-11, 10_000, false, Some(&diag)).unwrap();
        let (x, _rep) = cg_solve(apply, &rhs, 1e-11, 10_000, false, None).unwrap();
        assert!(repp.converged);
        let mut d = xp;
        d.axpy(-1.0, &x);
        assert!(d.max_abs() < 1e-9);
    }

    #[test]
    fn nullspace_mean_solution_has_zero_mean() {
        let g = make_grid(16, 16, 1.0, 1.0).unwrap();
        let apply = |u: &ScalarField| {
            let mut out = laplace_cc(u);
            out.scale(-1.0);
            out
        };
        let mut rng = SplitMix64::new(9);
        let rhs = rng.scalar_field(&g, -1.0, 1.0);
        let (x, rep) = cg_solve(apply, &rhs, 1e-11, 10_000, true, None).unwrap();
        assert!(rep.converged);
        assert!(mean_cc(&x).abs() < 1e-13);
        // residual against the projected rhs
        let mut b = rhs.clone();
        CgField::remove_mean(&mut b);
        let mut r = b.clone();
        r.axpy(-1.0, &apply(&x));
        assert!(CgField::norm(&r) / CgField::norm(&b) <= 1e-11 * 10.0);
    }

    #[test]
    fn maxiter_exhaustion_reports_unconverged() {
        let g = make_grid(16, 16, 1.0, 1.0).unwrap();
        let apply = |u: &ScalarField| {
            let mut out = u.clone();
            out.axpy(-1.0, &laplace_cc(u));
            out
        };
        let mut rng = SplitMix64::new(12);
        let rhs = rng.scalar_field(&g, -1.0, 1.0);
        let (_, rep) = cg_solve(apply, &rhs, 1e-14, 3, false, None).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 3);
    }
}
