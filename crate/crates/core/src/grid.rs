//! Rectangular MAC staggering: scalars at cell centers, vector components
//! on cell faces.
//!
//! The domain is the rectangle [0,Lx]×[0,Ly] split into nx×ny cells.
//! A `ScalarField` stores one value per cell center ((i+½)hx, (j+½)hy).
//! A `VectorField` stores its x component on the (nx+1)×ny vertical faces
//! (i·hx, (j+½)hy) and its y component on the nx×(ny+1) horizontal faces
//! ((i+½)hx, j·hy). The entries with i ∈ {0,nx} (x) and j ∈ {0,ny} (y) sit
//! on the walls and are the boundary-normal values; no-slip fields keep
//! them at zero.

use crate::error::{Error, Result};

/// Cell counts, edge lengths and derived spacings of the rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub hx: f64,
    pub hy: f64,
}

/// Validates counts and lengths and derives the spacings.
pub fn make_grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<GridSpec> {
    if nx < 4 || ny < 4 {
        return Err(Error::Config(format!(
            "cell counts must be at least 4, got nx={nx}, ny={ny}"
        )));
    }
    if !(lx > 0.0) || !(ly > 0.0) {
        return Err(Error::Config(format!(
            "domain lengths must be positive, got Lx={lx}, Ly={ly}"
        )));
    }
    Ok(GridSpec {
        nx,
        ny,
        lx,
        ly,
        hx: lx / nx as f64,
        hy: ly / ny as f64,
    })
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell-center abscissa of column i.
    pub fn xc(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.hx
    }

    /// Cell-center ordinate of row j.
    pub fn yc(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.hy
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    /// Panics on mismatch; silently broadcasting fields between different
    /// grids is never meaningful here.
    #[track_caller]
    pub fn assert_same(&self, other: &GridSpec) {
        assert!(
            self == other,
            "grid mismatch: {}x{} [{} x {}] vs {}x{} [{} x {}]",
            self.nx, self.ny, self.lx, self.ly, other.nx, other.ny, other.lx, other.ly
        );
    }
}

/// Cell-centered scalar, nx×ny values stored row-major in i (x index).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: GridSpec,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            grid: *grid,
            data: vec![0.0; grid.cells()],
        }
    }

    pub fn from_fn(grid: &GridSpec, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut s = Self::zeros(grid);
        for i in 0..grid.nx {
            for j in 0..grid.ny {
                s[(i, j)] = f(grid.xc(i), grid.yc(j));
            }
        }
        s
    }

    pub fn constant(grid: &GridSpec, c: f64) -> Self {
        Self {
            grid: *grid,
            data: vec![c; grid.cells()],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.grid.nx && j < self.grid.ny);
        i * self.grid.ny + j
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Pointwise map, fresh field.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += a·x
    pub fn axpy(&mut self, a: f64, x: &ScalarField) {
        self.grid.assert_same(&x.grid);
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.data {
            *s *= a;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }
}

impl std::ops::Index<(usize, usize)> for ScalarField {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[self.idx(i, j)]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ScalarField {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }
}

/// Staggered vector field on the MAC faces.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: GridSpec,
    /// x component, (nx+1)×ny, index (i,j) ↦ i·ny + j.
    x: Vec<f64>,
    /// y component, nx×(ny+1), index (i,j) ↦ i·(ny+1) + j.
    y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self {
            grid: *grid,
            x: vec![0.0; (grid.nx + 1) * grid.ny],
            y: vec![0.0; grid.nx * (grid.ny + 1)],
        }
    }

    /// Samples (fx, fy) at the respective face centers. Wall-normal faces
    /// are sampled too; use [`VectorField::zero_boundary_normals`] after
    /// construction when the field carries a no-slip role.
    pub fn from_fn(
        grid: &GridSpec,
        mut fx: impl FnMut(f64, f64) -> f64,
        mut fy: impl FnMut(f64, f64) -> f64,
    ) -> Self {
        let mut v = Self::zeros(grid);
        for i in 0..=grid.nx {
            for j in 0..grid.ny {
                v.set_x(i, j, fx(i as f64 * grid.hx, grid.yc(j)));
            }
        }
        for i in 0..grid.nx {
            for j in 0..=grid.ny {
                v.set_y(i, j, fy(grid.xc(i), j as f64 * grid.hy));
            }
        }
        v
    }

    pub fn constant(grid: &GridSpec, cx: f64, cy: f64) -> Self {
        Self {
            grid: *grid,
            x: vec![cx; (grid.nx + 1) * grid.ny],
            y: vec![cy; grid.nx * (grid.ny + 1)],
        }
    }

    #[inline]
    pub fn x(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i <= self.grid.nx && j < self.grid.ny);
        self.x[i * self.grid.ny + j]
    }

    #[inline]
    pub fn y(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.grid.nx && j <= self.grid.ny);
        self.y[i * (self.grid.ny + 1) + j]
    }

    #[inline]
    pub fn set_x(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i <= self.grid.nx && j < self.grid.ny);
        self.x[i * self.grid.ny + j] = v;
    }

    #[inline]
    pub fn set_y(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.grid.nx && j <= self.grid.ny);
        self.y[i * (self.grid.ny + 1) + j] = v;
    }

    pub fn x_slice(&self) -> &[f64] {
        &self.x
    }

    pub fn y_slice(&self) -> &[f64] {
        &self.y
    }

    pub fn x_mut_slice(&mut self) -> &mut [f64] {
        &mut self.x
    }

    pub fn y_mut_slice(&mut self) -> &mut [f64] {
        &mut self.y
    }

    /// self += a·w
    pub fn axpy(&mut self, a: f64, w: &VectorField) {
        self.grid.assert_same(&w.grid);
        for (s, &v) in self.x.iter_mut().zip(&w.x) {
            *s += a * v;
        }
        for (s, &v) in self.y.iter_mut().zip(&w.y) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for s in &mut self.x {
            *s *= a;
        }
        for s in &mut self.y {
            *s *= a;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            x: self.x.iter().map(|&v| f(v)).collect(),
            y: self.y.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mx = self.x.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        self.y.iter().fold(mx, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.y.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    /// Largest |entry| sitting on a wall-normal face.
    pub fn boundary_normal_max(&self) -> f64 {
        let g = &self.grid;
        let mut m = 0.0f64;
        for j in 0..g.ny {
            m = m.max(self.x(0, j).abs()).max(self.x(g.nx, j).abs());
        }
        for i in 0..g.nx {
            m = m.max(self.y(i, 0).abs()).max(self.y(i, g.ny).abs());
        }
        m
    }

    /// Dedicated no-slip check for fields that must be admissible
    /// (velocity, linearized/adjoint velocity).
    pub fn check_no_slip(&self, tol: f64, context: &'static str) -> Result<()> {
        let m = self.boundary_normal_max();
        if m <= tol {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "{context}: boundary-normal entries reach {m:.3e} (allowed {tol:.1e})"
            )))
        }
    }

    pub fn zero_boundary_normals(&mut self) {
        let g = self.grid;
        for j in 0..g.ny {
            self.set_x(0, j, 0.0);
            self.set_x(g.nx, j, 0.0);
        }
        for i in 0..g.nx {
            self.set_y(i, 0, 0.0);
            self.set_y(i, g.ny, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_grid_derives_spacings() {
        let g = make_grid(8, 8, 1.0, 1.0).unwrap();
        assert_eq!(g.hx, 0.125);
        assert_eq!(g.hy, 0.125);

        let g = make_grid(4, 16, 2.0, 1.0).unwrap();
        assert_eq!(g.hx, 0.5);
        assert_eq!(g.hy, 0.0625);
        assert_eq!(g.hx * g.nx as f64, g.lx);
        assert_eq!(g.hy * g.ny as f64, g.ly);
    }

    #[test]
    fn make_grid_rejects_bad_input() {
        assert!(make_grid(3, 8, 1.0, 1.0).is_err());
        assert!(make_grid(8, 3, 1.0, 1.0).is_err());
        assert!(make_grid(8, 8, 0.0, 1.0).is_err());
        assert!(make_grid(8, 8, 1.0, -2.0).is_err());
    }

    #[test]
    fn fresh_fields_are_zero() {
        let g = make_grid(5, 7, 1.0, 2.0).unwrap();
        let s = ScalarField::zeros(&g);
        for i in 0..g.nx {
            for j in 0..g.ny {
                assert_eq!(s[(i, j)], 0.0);
            }
        }
        let v = VectorField::zeros(&g);
        for i in 0..=g.nx {
            for j in 0..g.ny {
                assert_eq!(v.x(i, j), 0.0);
            }
        }
        for i in 0..g.nx {
            for j in 0..=g.ny {
                assert_eq!(v.y(i, j), 0.0);
            }
        }
    }

    #[test]
    #[should_panic(expected = "grid mismatch")]
    fn binary_op_rejects_size_mismatch() {
        let a = ScalarField::zeros(&make_grid(8, 8, 1.0, 1.0).unwrap());
        let b = ScalarField::zeros(&make_grid(8, 9, 1.0, 1.0).unwrap());
        let mut a = a;
        a.axpy(1.0, &b);
    }

    #[test]
    fn boundary_normal_detection() {
        let g = make_grid(4, 4, 1.0, 1.0).unwrap();
        let mut v = VectorField::zeros(&g);
        assert_eq!(v.boundary_normal_max(), 0.0);
        assert!(v.check_no_slip(0.0, "test").is_ok());
        v.set_x(0, 2, 3.0);
        assert_eq!(v.boundary_normal_max(), 3.0);
        assert!(v.check_no_slip(1e-14, "test").is_err());
        v.zero_boundary_normals();
        assert!(v.check_no_slip(0.0, "test").is_ok());
    }

    #[test]
    fn finiteness_check() {
        let g = make_grid(4, 4, 1.0, 1.0).unwrap();
        let mut s = ScalarField::zeros(&g);
        assert!(s.check_finite("s").is_ok());
        s[(1, 1)] = f64::NAN;
        assert!(s.check_finite("s").is_err());
    }
}
