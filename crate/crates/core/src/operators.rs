//! Discrete differential operators on the MAC grid, with the model's
//! boundary conditions baked in, plus quadratures and the double-well
//! potential.
//!
//! Conventions that the rest of the toolkit leans on:
//!
//! * `grad_cc` produces zero on wall-normal faces (homogeneous Neumann),
//!   so `laplace_cc == div_fc ∘ grad_cc` exactly and
//!   `mean_cc(laplace_cc(u)) == 0` by telescoping.
//! * Summation by parts: `inner_face(grad_cc(u), psi) == -inner_cc(u, div_fc(psi))`
//!   for every `psi` with zero wall-normal entries. This identity is what
//!   makes the discrete weak forms and the adjoint pairings consistent.
//! * Face quadrature weights wall-normal entries by ½; since admissible
//!   fields vanish there, their pairings reduce to plain sums times hx·hy.

use crate::error::{Error, Result};
use crate::grid::{ScalarField, VectorField};

/// Double-well bulk energy F(s) = ¼(s²−1)².
pub fn potential(s: f64) -> f64 {
    let q = s * s - 1.0;
    0.25 * q * q
}

/// f = F′, f(s) = s³ − s.
pub fn potential_d(s: f64) -> f64 {
    s * s * s - s
}

/// f′(s) = 3s² − 1.
pub fn potential_dd(s: f64) -> f64 {
    3.0 * s * s - 1.0
}

/// f″(s) = 6s.
pub fn potential_ddd(s: f64) -> f64 {
    6.0 * s
}

/// Centered gradient of a cell field onto faces; wall-normal faces get 0
/// (homogeneous Neumann).
pub fn grad_cc(u: &ScalarField) -> VectorField {
    let g = u.grid;
    let mut out = VectorField::zeros(&g);
    for i in 1..g.nx {
        for j in 0..g.ny {
            out.set_x(i, j, (u[(i, j)] - u[(i - 1, j)]) / g.hx);
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            out.set_y(i, j, (u[(i, j)] - u[(i, j - 1)]) / g.hy);
        }
    }
    out
}

/// MAC divergence of a face field onto cells.
pub fn div_fc(v: &VectorField) -> ScalarField {
    let g = v.grid;
    let mut out = ScalarField::zeros(&g);
    for i in 0..g.nx {
        for j in 0..g.ny {
            out[(i, j)] = (v.x(i + 1, j) - v.x(i, j)) / g.hx
                + (v.y(i, j + 1) - v.y(i, j)) / g.hy;
        }
    }
    out
}

/// 5-point Laplacian with Neumann ghost reflection. Identical (up to
/// rounding) to `div_fc(grad_cc(u))`.
pub fn laplace_cc(u: &ScalarField) -> ScalarField {
    let g = u.grid;
    let (hx2, hy2) = (g.hx * g.hx, g.hy * g.hy);
    let mut out = ScalarField::zeros(&g);
    for i in 0..g.nx {
        for j in 0..g.ny {
            let c = u[(i, j)];
            let xl = if i > 0 { u[(i - 1, j)] } else { c };
            let xr = if i + 1 < g.nx { u[(i + 1, j)] } else { c };
            let yb = if j > 0 { u[(i, j - 1)] } else { c };
            let yt = if j + 1 < g.ny { u[(i, j + 1)] } else { c };
            out[(i, j)] = (xl - 2.0 * c + xr) / hx2 + (yb - 2.0 * c + yt) / hy2;
        }
    }
    out
}

/// Componentwise 5-point Laplacian of a face field with no-slip walls.
///
/// In the direction normal to a wall the wall face itself stores the
/// (zero) Dirichlet value; in the tangential direction the ghost value is
/// the odd reflection −v, so the interpolated wall value vanishes.
/// Wall-normal output entries are set to 0: those degrees of freedom are
/// constrained, and the Helmholtz solves treat them as identity rows.
pub fn laplace_face(v: &VectorField) -> VectorField {
    let g = v.grid;
    let (hx2, hy2) = (g.hx * g.hx, g.hy * g.hy);
    let mut out = VectorField::zeros(&g);

    // x component on vertical faces: interior i only.
    for i in 1..g.nx {
        for j in 0..g.ny {
            let c = v.x(i, j);
            let xl = v.x(i - 1, j);
            let xr = v.x(i + 1, j);
            let yb = if j > 0 { v.x(i, j - 1) } else { -c };
            let yt = if j + 1 < g.ny { v.x(i, j + 1) } else { -c };
            out.set_x(i, j, (xl - 2.0 * c + xr) / hx2 + (yb - 2.0 * c + yt) / hy2);
        }
    }
    // y component on horizontal faces: interior j only.
    for i in 0..g.nx {
        for j in 1..g.ny {
            let c = v.y(i, j);
            let yb = v.y(i, j - 1);
            let yt = v.y(i, j + 1);
            let xl = if i > 0 { v.y(i - 1, j) } else { -c };
            let xr = if i + 1 < g.nx { v.y(i + 1, j) } else { -c };
            out.set_y(i, j, (xl - 2.0 * c + xr) / hx2 + (yb - 2.0 * c + yt) / hy2);
        }
    }
    out
}

/// Centered interpolation of a cell field to faces. Wall-normal faces get
/// 0; every use multiplies them by a field that vanishes there anyway.
pub fn interp_cc_to_face(u: &ScalarField) -> VectorField {
    let g = u.grid;
    let mut out = VectorField::zeros(&g);
    for i in 1..g.nx {
        for j in 0..g.ny {
            out.set_x(i, j, 0.5 * (u[(i - 1, j)] + u[(i, j)]));
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            out.set_y(i, j, 0.5 * (u[(i, j - 1)] + u[(i, j)]));
        }
    }
    out
}

/// Cellwise contraction of two face fields: the average of the face
/// products surrounding each cell. Used for terms like (∇û · γ₁) at
/// centers.
pub fn dot_face_to_cc(a: &VectorField, b: &VectorField) -> ScalarField {
    a.grid.assert_same(&b.grid);
    let g = a.grid;
    let mut out = ScalarField::zeros(&g);
    for i in 0..g.nx {
        for j in 0..g.ny {
            let px = 0.5 * (a.x(i, j) * b.x(i, j) + a.x(i + 1, j) * b.x(i + 1, j));
            let py = 0.5 * (a.y(i, j) * b.y(i, j) + a.y(i, j + 1) * b.y(i, j + 1));
            out[(i, j)] = px + py;
        }
    }
    out
}

/// Conservative advection term ∇·(v u) with centered face interpolation.
///
/// Requires zero wall-normal velocity; then the column/row fluxes
/// telescope and the output mean is exactly zero, which is what keeps the
/// Oono mean recurrence exact.
pub fn advect(v: &VectorField, u: &ScalarField) -> Result<ScalarField> {
    v.grid.assert_same(&u.grid);
    v.check_no_slip(1e-14, "advect velocity")?;
    let g = u.grid;
    let mut flux = VectorField::zeros(&g);
    for i in 1..g.nx {
        for j in 0..g.ny {
            flux.set_x(i, j, v.x(i, j) * 0.5 * (u[(i - 1, j)] + u[(i, j)]));
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            flux.set_y(i, j, v.y(i, j) * 0.5 * (u[(i, j - 1)] + u[(i, j)]));
        }
    }
    Ok(div_fc(&flux))
}

/// Surface tension force −λ (u)_face ⊙ ∇w on faces; wall-normal entries 0.
pub fn surface_force(u: &ScalarField, w: &ScalarField, lambda: f64) -> VectorField {
    u.grid.assert_same(&w.grid);
    let g = u.grid;
    let mut out = VectorField::zeros(&g);
    for i in 1..g.nx {
        for j in 0..g.ny {
            let uf = 0.5 * (u[(i - 1, j)] + u[(i, j)]);
            let gw = (w[(i, j)] - w[(i - 1, j)]) / g.hx;
            out.set_x(i, j, -lambda * uf * gw);
        }
    }
    for i in 0..g.nx {
        for j in 1..g.ny {
            let uf = 0.5 * (u[(i, j - 1)] + u[(i, j)]);
            let gw = (w[(i, j)] - w[(i, j - 1)]) / g.hy;
            out.set_y(i, j, -lambda * uf * gw);
        }
    }
    out
}

/// Midpoint quadrature of a·b over the cells.
pub fn inner_cc(a: &ScalarField, b: &ScalarField) -> f64 {
    a.grid.assert_same(&b.grid);
    let w = a.grid.hx * a.grid.hy;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x * y)
        .sum::<f64>()
        * w
}

/// Face quadrature of a·b; wall-normal faces carry half weight (their
/// quadrature cell is half inside the domain).
pub fn inner_face(a: &VectorField, b: &VectorField) -> f64 {
    a.grid.assert_same(&b.grid);
    let g = a.grid;
    let mut acc = 0.0;
    for i in 0..=g.nx {
        let w = if i == 0 || i == g.nx { 0.5 } else { 1.0 };
        for j in 0..g.ny {
            acc += w * a.x(i, j) * b.x(i, j);
        }
    }
    for i in 0..g.nx {
        for j in 0..=g.ny {
            let w = if j == 0 || j == g.ny { 0.5 } else { 1.0 };
            acc += w * a.y(i, j) * b.y(i, j);
        }
    }
    acc * g.hx * g.hy
}

/// Domain average of a cell field.
pub fn mean_cc(a: &ScalarField) -> f64 {
    a.as_slice().iter().sum::<f64>() / a.grid.cells() as f64
}

/// Rejects advection input whose wall-normal entries exceed the stated
/// tolerance. Exposed so callers can pre-validate controls.
pub fn check_advection_velocity(v: &VectorField) -> Result<()> {
    v.check_no_slip(1e-14, "advect velocity").map_err(|e| match e {
        Error::Precondition(msg) => Error::Precondition(msg),
        other => other,
    })
}
