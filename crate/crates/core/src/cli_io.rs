//! Configuration parsing, field/trajectory serialization, diagnostics
//! emission, and the command-line entry points.
//!
//! Config format: flat `section.key = value` lines, `#` comments, one
//! bare key `seed`. Unknown keys are errors — no silent typos.
//!
//! Field file format (bit-exact contract):
//! ```text
//! SCHO-FIELD v1
//! kind=<cc|face-x|face-y> nx=<> ny=<> Lx=<> Ly=<> t=<> step=<>
//! <row 0: space-separated entries, 17 significant digits>
//! ...
//! ```
//! Cell fields have nx rows of ny entries; face-x has nx+1 rows of ny;
//! face-y has nx rows of ny+1. Vector fields are written as two files
//! with suffixes `.fx`/`.fy`. Reading back reproduces every f64 bit.
//!
//! Diagnostics CSV schema (fixed): step, time, energy, mean_u, div_inf,
//! J_track_v, J_track_u, J_reg. Targets and controls are left-indexed
//! sequences of length nt, so the J columns at step n use index
//! min(n, nt−1).
//!
//! Exit codes: 0 ok, 1 usage, 2 validation/config/file errors, 3 solver
//! failures, 4 a documented verification tolerance failed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adjoint::solve_adjoint;
use crate::control::{
    cost, gradient, preset_control_star, projected_gradient_descent, synthetic_targets,
    taylor_test, CostParams, OptConfig, ProjectionMode,
};
use crate::error::{Error, Result};
use crate::grid::{make_grid, GridSpec, ScalarField, VectorField};
use crate::linearized::solve_linearized;
use crate::linsolve::SolverConfig;
use crate::operators::{inner_cc, inner_face, mean_cc};
use crate::rng::SplitMix64;
use crate::state::{energy, solve_forward, PhysParams, TimeGrid, Trajectory};

/// Verification tolerances of the check subcommands. Fixed contract
/// values, not configuration.
pub const GRAD_CHECK_TOL: f64 = 0.02;
pub const DUALITY_TOL: f64 = 0.02;
pub const TAYLOR_MIN_ORDER: f64 = 1.8;
pub const SUPERPOSITION_TOL: f64 = 1e-10;
pub const CHECK_DIRECTIONS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum InitPreset {
    Constant,
    Random,
    Bubble,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlPreset {
    Zero,
    Constant,
    Star,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetPreset {
    Zero,
    Constant,
    Synthetic,
    FromFile,
}

/// Fully validated run configuration; every module-level precondition is
/// re-checked at parse time.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub params: PhysParams,
    pub timegrid: TimeGrid,
    pub beta: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub control_bound_k: f64,
    pub control_preset: ControlPreset,
    pub control_cx: f64,
    pub control_cy: f64,
    pub control_amplitude: f64,
    pub target_preset: TargetPreset,
    pub target_u_const: f64,
    pub target_vx_const: f64,
    pub target_vy_const: f64,
    pub target_amplitude: f64,
    pub target_dir: String,
    pub init_preset: InitPreset,
    pub init_u0_value: f64,
    pub init_u0_min: f64,
    pub init_u0_max: f64,
    pub init_bubble_radius: f64,
    pub init_bubble_width: f64,
    pub init_relax_steps: usize,
    pub solver: SolverConfig,
    pub opt: OptConfig,
    pub dump_every: usize,
    pub seed: u64,
    /// Non-fatal issues recorded during validation (e.g. mu <= lambda).
    pub warnings: Vec<String>,
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
    path: String,
}

impl RawConfig {
    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse::<T>().map_err(|_| {
                Error::Config(format!(
                    "key \"{key}\": cannot parse value {raw:?} in {}",
                    self.path
                ))
            }),
        }
    }
}

/// Parses and validates a config file; errors name the offending key.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut entries = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(k) => &line[..k],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("expected \"key = value\", found {line:?}"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::ConfigSyntax {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "empty key or value".into(),
            });
        }
        if entries.insert(key.clone(), (value, lineno + 1)).is_some() {
            return Err(Error::ConfigSyntax {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("duplicate key \"{key}\""),
            });
        }
    }
    let mut raw = RawConfig {
        entries,
        path: path.display().to_string(),
    };

    let nx: usize = raw.parse("grid.nx", 32)?;
    let ny: usize = raw.parse("grid.ny", 32)?;
    let lx: f64 = raw.parse("grid.Lx", 1.0)?;
    let ly: f64 = raw.parse("grid.Ly", 1.0)?;
    let grid = make_grid(nx, ny, lx, ly).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("grid.nx/grid.ny/grid.Lx/grid.Ly: {msg}")),
        other => other,
    })?;

    let params = PhysParams {
        mu: raw.parse("physics.mu", 0.1)?,
        lambda: raw.parse("physics.lambda", 0.01)?,
        alpha: raw.parse("physics.alpha", 0.1)?,
        stab_s: raw.parse("physics.stab_S", 2.0)?,
    };
    params.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("physics: {msg}")),
        other => other,
    })?;

    let t_final: f64 = raw.parse("time.T", 0.1)?;
    let nt: usize = raw.parse("time.nt", 100)?;
    let timegrid = TimeGrid::new(t_final, nt).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("time.T/time.nt: {msg}")),
        other => other,
    })?;

    let beta: f64 = raw.parse("control.beta", 1e-3)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!(
            "control.beta must be positive, got {beta}"
        )));
    }
    let theta_min: f64 = raw.parse("control.theta_min", -2.0)?;
    let theta_max: f64 = raw.parse("control.theta_max", 2.0)?;
    if !(theta_min <= theta_max) {
        return Err(Error::Config(format!(
            "control.theta_min = {theta_min} must not exceed control.theta_max = {theta_max}"
        )));
    }
    let control_bound_k: f64 = raw.parse("control.K", 10.0)?;
    if !(control_bound_k > 0.0) {
        return Err(Error::Config(format!(
            "control.K must be positive, got {control_bound_k}"
        )));
    }
    let control_preset = match raw.take("control.preset").as_deref().unwrap_or("zero") {
        "zero" => ControlPreset::Zero,
        "constant" => ControlPreset::Constant,
        "star" => ControlPreset::Star,
        other => {
            return Err(Error::Config(format!(
                "control.preset: unknown preset {other:?} (zero|constant|star)"
            )))
        }
    };
    let control_cx: f64 = raw.parse("control.cx", 0.0)?;
    let control_cy: f64 = raw.parse("control.cy", 0.0)?;
    let control_amplitude: f64 = raw.parse("control.amplitude", 1.0)?;

    let target_preset = match raw.take("targets.preset").as_deref().unwrap_or("zero") {
        "zero" => TargetPreset::Zero,
        "constant" => TargetPreset::Constant,
        "synthetic" | "from-synthetic-run" => TargetPreset::Synthetic,
        "from-file" => TargetPreset::FromFile,
        other => {
            return Err(Error::Config(format!(
                "targets.preset: unknown preset {other:?} (zero|constant|synthetic|from-file)"
            )))
        }
    };
    let target_u_const: f64 = raw.parse("targets.u_const", 0.0)?;
    let target_vx_const: f64 = raw.parse("targets.vx_const", 0.0)?;
    let target_vy_const: f64 = raw.parse("targets.vy_const", 0.0)?;
    let target_amplitude: f64 = raw.parse("targets.amplitude", 1.0)?;
    let target_dir: String = raw.take("targets.dir").unwrap_or_default();
    if target_preset == TargetPreset::FromFile && target_dir.is_empty() {
        return Err(Error::Config(
            "targets.dir is required for targets.preset = from-file".into(),
        ));
    }

    let init_preset = match raw.take("init.u0_preset").as_deref().unwrap_or("constant") {
        "constant" => InitPreset::Constant,
        "random" => InitPreset::Random,
        "bubble" => InitPreset::Bubble,
        other => {
            return Err(Error::Config(format!(
                "init.u0_preset: unknown preset {other:?} (constant|random|bubble)"
            )))
        }
    };
    let init_u0_value: f64 = raw.parse("init.u0_value", 0.0)?;
    let init_u0_min: f64 = raw.parse("init.u0_min", -1.0)?;
    let init_u0_max: f64 = raw.parse("init.u0_max", 1.0)?;
    if init_u0_min > init_u0_max {
        return Err(Error::Config(format!(
            "init.u0_min = {init_u0_min} must not exceed init.u0_max = {init_u0_max}"
        )));
    }
    let init_bubble_radius: f64 = raw.parse("init.bubble_radius", 0.28)?;
    let init_bubble_width: f64 = raw.parse("init.bubble_width", 0.08)?;
    if init_preset == InitPreset::Bubble && !(init_bubble_width > 0.0) {
        return Err(Error::Config(format!(
            "init.bubble_width must be positive, got {init_bubble_width}"
        )));
    }
    let init_relax_steps: usize = raw.parse("init.relax_steps", 0)?;

    let cg_tol: f64 = raw.parse("solver.cg_tol", 1e-10)?;
    if !(cg_tol > 0.0) {
        return Err(Error::Config(format!(
            "solver.cg_tol must be positive, got {cg_tol}"
        )));
    }
    let cg_maxiter_raw: usize = raw.parse("solver.cg_maxiter", 0)?;
    let solver = SolverConfig {
        cg_tol,
        cg_maxiter: if cg_maxiter_raw == 0 {
            10 * grid.cells()
        } else {
            cg_maxiter_raw
        },
    };

    let opt_max_iters: usize = raw.parse("opt.max_iters", 50)?;
    let opt_tol: f64 = raw.parse("opt.tol", 1e-4)?;
    let armijo_c1: f64 = raw.parse("opt.armijo_c1", 1e-4)?;
    let backtrack_rho: f64 = raw.parse("opt.backtrack_rho", 0.5)?;
    let s0: f64 = raw.parse("opt.s0", 1.0)?;
    if !(opt_tol > 0.0) || !(armijo_c1 > 0.0 && armijo_c1 < 1.0) {
        return Err(Error::Config(
            "opt.tol and opt.armijo_c1 must be positive (armijo_c1 < 1)".into(),
        ));
    }
    if !(backtrack_rho > 0.0 && backtrack_rho < 1.0) || !(s0 > 0.0) {
        return Err(Error::Config(
            "opt.backtrack_rho must lie in (0,1) and opt.s0 must be positive".into(),
        ));
    }
    let dykstra_sweeps: usize = raw.parse("opt.dykstra_sweeps", 20)?;
    let projection = match raw.take("opt.projection").as_deref().unwrap_or("box") {
        "box" => ProjectionMode::BoxOnly,
        "dykstra" => ProjectionMode::DykstraBoxDivFree {
            sweeps: dykstra_sweeps,
        },
        other => {
            return Err(Error::Config(format!(
                "opt.projection: unknown mode {other:?} (box|dykstra)"
            )))
        }
    };
    let opt = OptConfig {
        max_iters: opt_max_iters,
        tol: opt_tol,
        armijo_c1,
        backtrack_rho,
        s0,
        projection,
    };

    let dump_every: usize = raw.parse("output.dump_every", 0)?;
    let seed: u64 = raw.parse("seed", 42)?;

    if let Some((key, (_, line))) = raw.entries.iter().next() {
        return Err(Error::ConfigSyntax {
            path: path.display().to_string(),
            line: *line,
            msg: format!("unknown key \"{key}\""),
        });
    }

    let mut warnings = Vec::new();
    if let Some(w) = params.viscosity_warning() {
        warnings.push(w);
    }

    Ok(RunConfig {
        grid,
        params,
        timegrid,
        beta,
        theta_min,
        theta_max,
        control_bound_k,
        control_preset,
        control_cx,
        control_cy,
        control_amplitude,
        target_preset,
        target_u_const,
        target_vx_const,
        target_vy_const,
        target_amplitude,
        target_dir,
        init_preset,
        init_u0_value,
        init_u0_min,
        init_u0_max,
        init_bubble_radius,
        init_bubble_width,
        init_relax_steps,
        solver,
        opt,
        dump_every,
        seed,
        warnings,
    })
}

// ---------------------------------------------------------------------
// Field files
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Cc,
    FaceX,
    FaceY,
}

impl FieldKind {
    fn tag(self) -> &'static str {
        match self {
            FieldKind::Cc => "cc",
            FieldKind::FaceX => "face-x",
            FieldKind::FaceY => "face-y",
        }
    }

    fn rows_cols(self, g: &GridSpec) -> (usize, usize) {
        match self {
            FieldKind::Cc => (g.nx, g.ny),
            FieldKind::FaceX => (g.nx + 1, g.ny),
            FieldKind::FaceY => (g.nx, g.ny + 1),
        }
    }
}

/// Time/step metadata carried in the header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldMeta {
    pub kind: FieldKind,
    pub t: f64,
    pub step: usize,
}

const FIELD_MAGIC: &str = "SCHO-FIELD v1";

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.tmp"),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, contents).map_err(|e| Error::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    fs::rename(&tmp, path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_rows(out: &mut String, rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) {
    for i in 0..rows {
        for j in 0..cols {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", fmt17(get(i, j)));
        }
        out.push('\n');
    }
}

fn field_header(g: &GridSpec, meta: &FieldMeta) -> String {
    format!(
        "{FIELD_MAGIC}\nkind={} nx={} ny={} Lx={} Ly={} t={} step={}\n",
        meta.kind.tag(),
        g.nx,
        g.ny,
        fmt17(g.lx),
        fmt17(g.ly),
        fmt17(meta.t),
        meta.step
    )
}

/// Writes a cell field; roundtrips bit-exactly (17 significant digits).
pub fn write_scalar_field(path: &Path, field: &ScalarField, t: f64, step: usize) -> Result<()> {
    let meta = FieldMeta {
        kind: FieldKind::Cc,
        t,
        step,
    };
    let g = field.grid;
    let mut out = field_header(&g, &meta);
    write_rows(&mut out, g.nx, g.ny, |i, j| field[(i, j)]);
    atomic_write(path, &out)
}

/// Writes the two face components to `<base>.fx` / `<base>.fy`.
pub fn write_vector_field(base: &Path, field: &VectorField, t: f64, step: usize) -> Result<()> {
    let g = field.grid;
    let mut fx = field_header(
        &g,
        &FieldMeta {
            kind: FieldKind::FaceX,
            t,
            step,
        },
    );
    write_rows(&mut fx, g.nx + 1, g.ny, |i, j| field.x(i, j));
    atomic_write(&with_suffix(base, ".fx"), &fx)?;
    let mut fy = field_header(
        &g,
        &FieldMeta {
            kind: FieldKind::FaceY,
            t,
            step,
        },
    );
    write_rows(&mut fy, g.nx, g.ny + 1, |i, j| field.y(i, j));
    atomic_write(&with_suffix(base, ".fy"), &fy)
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

struct ParsedField {
    grid: GridSpec,
    meta: FieldMeta,
    rows: Vec<Vec<f64>>,
}

fn parse_field_file(path: &Path) -> Result<ParsedField> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != FIELD_MAGIC {
        return Err(Error::FieldVersion {
            path: path.display().to_string(),
            found: magic.to_string(),
        });
    }
    let header = lines.next().ok_or_else(|| Error::FieldFormat {
        path: path.display().to_string(),
        row: 0,
        msg: "missing header line".into(),
    })?;
    let mut kind = None;
    let mut nx = None;
    let mut ny = None;
    let mut lx = None;
    let mut ly = None;
    let mut t = None;
    let mut step = None;
    for tokenpair in header.split_whitespace() {
        let (k, v) = tokenpair.split_once('=').ok_or_else(|| Error::FieldFormat {
            path: path.display().to_string(),
            row: 0,
            msg: format!("bad header token {tokenpair:?}"),
        })?;
        let bad = |msg: String| Error::FieldFormat {
            path: path.display().to_string(),
            row: 0,
            msg,
        };
        match k {
            "kind" => {
                kind = Some(match v {
                    "cc" => FieldKind::Cc,
                    "face-x" => FieldKind::FaceX,
                    "face-y" => FieldKind::FaceY,
                    other => return Err(bad(format!("unknown kind {other:?}"))),
                })
            }
            "nx" => nx = Some(v.parse().map_err(|_| bad(format!("bad nx {v:?}")))?),
            "ny" => ny = Some(v.parse().map_err(|_| bad(format!("bad ny {v:?}")))?),
            "Lx" => lx = Some(v.parse().map_err(|_| bad(format!("bad Lx {v:?}")))?),
            "Ly" => ly = Some(v.parse().map_err(|_| bad(format!("bad Ly {v:?}")))?),
            "t" => t = Some(v.parse().map_err(|_| bad(format!("bad t {v:?}")))?),
            "step" => step = Some(v.parse().map_err(|_| bad(format!("bad step {v:?}")))?),
            other => return Err(bad(format!("unknown header field {other:?}"))),
        }
    }
    let missing = |what: &str| Error::FieldFormat {
        path: path.display().to_string(),
        row: 0,
        msg: format!("header lacks {what}"),
    };
    let kind = kind.ok_or_else(|| missing("kind"))?;
    let grid = make_grid(
        nx.ok_or_else(|| missing("nx"))?,
        ny.ok_or_else(|| missing("ny"))?,
        lx.ok_or_else(|| missing("Lx"))?,
        ly.ok_or_else(|| missing("Ly"))?,
    )?;
    let meta = FieldMeta {
        kind,
        t: t.ok_or_else(|| missing("t"))?,
        step: step.ok_or_else(|| missing("step"))?,
    };

    let (rows_expected, cols_expected) = kind.rows_cols(&grid);
    let mut rows = Vec::with_capacity(rows_expected);
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|v| v.parse::<f64>()).collect();
        let row = row.map_err(|_| Error::FieldFormat {
            path: path.display().to_string(),
            row: idx + 1,
            msg: "unparsable entry".into(),
        })?;
        if row.len() != cols_expected {
            return Err(Error::FieldFormat {
                path: path.display().to_string(),
                row: idx + 1,
                msg: format!("expected {cols_expected} entries, found {}", row.len()),
            });
        }
        rows.push(row);
    }
    if rows.len() != rows_expected {
        return Err(Error::FieldFormat {
            path: path.display().to_string(),
            row: rows.len(),
            msg: format!("expected {rows_expected} rows, found {}", rows.len()),
        });
    }
    Ok(ParsedField { grid, meta, rows })
}

/// Reads a cell field back; `expected` (when given) guards against grid
/// mismatch with a validation error instead of a panic.
pub fn read_scalar_field(
    path: &Path,
    expected: Option<&GridSpec>,
) -> Result<(ScalarField, FieldMeta)> {
    let parsed = parse_field_file(path)?;
    if parsed.meta.kind != FieldKind::Cc {
        return Err(Error::FieldFormat {
            path: path.display().to_string(),
            row: 0,
            msg: format!("expected kind=cc, found {}", parsed.meta.kind.tag()),
        });
    }
    if let Some(g) = expected {
        if *g != parsed.grid {
            return Err(Error::Config(format!(
                "field {} has grid {}x{}, expected {}x{}",
                path.display(),
                parsed.grid.nx,
                parsed.grid.ny,
                g.nx,
                g.ny
            )));
        }
    }
    let mut field = ScalarField::zeros(&parsed.grid);
    for (i, row) in parsed.rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            field[(i, j)] = v;
        }
    }
    Ok((field, parsed.meta))
}

/// Reads a vector field from `<base>.fx` / `<base>.fy`.
pub fn read_vector_field(
    base: &Path,
    expected: Option<&GridSpec>,
) -> Result<(VectorField, FieldMeta)> {
    let px = parse_field_file(&with_suffix(base, ".fx"))?;
    let py = parse_field_file(&with_suffix(base, ".fy"))?;
    if px.meta.kind != FieldKind::FaceX || py.meta.kind != FieldKind::FaceY {
        return Err(Error::FieldFormat {
            path: base.display().to_string(),
            row: 0,
            msg: "component files carry wrong kinds".into(),
        });
    }
    if px.grid != py.grid {
        return Err(Error::Config(format!(
            "vector components of {} disagree on the grid",
            base.display()
        )));
    }
    if let Some(g) = expected {
        if *g != px.grid {
            return Err(Error::Config(format!(
                "field {} has grid {}x{}, expected {}x{}",
                base.display(),
                px.grid.nx,
                px.grid.ny,
                g.nx,
                g.ny
            )));
        }
    }
    let mut field = VectorField::zeros(&px.grid);
    for (i, row) in px.rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            field.set_x(i, j, v);
        }
    }
    for (i, row) in py.rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            field.set_y(i, j, v);
        }
    }
    Ok((field, px.meta))
}

// ---------------------------------------------------------------------
// Problem assembly from a config
// ---------------------------------------------------------------------

/// Initial data, controls and targets assembled from a RunConfig.
pub struct Problem {
    pub cfg: RunConfig,
    pub u0: ScalarField,
    pub v0: VectorField,
    pub theta0: Vec<VectorField>,
    pub cp: CostParams,
}

fn build_u0(cfg: &RunConfig, rng: &mut SplitMix64) -> ScalarField {
    let g = &cfg.grid;
    match cfg.init_preset {
        InitPreset::Constant => ScalarField::constant(g, cfg.init_u0_value),
        InitPreset::Random => rng.scalar_field(g, cfg.init_u0_min, cfg.init_u0_max),
        InitPreset::Bubble => {
            let (cx, cy) = (0.5 * g.lx, 0.5 * g.ly);
            let r0 = cfg.init_bubble_radius;
            let w = cfg.init_bubble_width;
            ScalarField::from_fn(g, |x, y| {
                let r = ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt();
                ((r0 - r) / w).tanh()
            })
        }
    }
}

fn build_theta0(cfg: &RunConfig) -> Vec<VectorField> {
    let g = &cfg.grid;
    let nt = cfg.timegrid.nt;
    match cfg.control_preset {
        ControlPreset::Zero => vec![VectorField::zeros(g); nt],
        ControlPreset::Constant => {
            let mut f = VectorField::constant(g, cfg.control_cx, cfg.control_cy);
            f.zero_boundary_normals();
            vec![f; nt]
        }
        ControlPreset::Star => vec![preset_control_star(g, cfg.control_amplitude); nt],
    }
}

/// Builds initial data (after the optional relaxation phase), the control
/// sequence and the targets. All randomness flows from `cfg.seed`.
pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let g = cfg.grid;
    let mut rng = SplitMix64::new(cfg.seed);
    let u0_raw = build_u0(cfg, &mut rng);
    let v0_raw = VectorField::zeros(&g);

    let (u0, v0) = if cfg.init_relax_steps > 0 {
        let tg = TimeGrid::new(
            cfg.timegrid.dt * cfg.init_relax_steps as f64,
            cfg.init_relax_steps,
        )?;
        let zeros = vec![VectorField::zeros(&g); tg.nt];
        let relax = solve_forward(&u0_raw, &v0_raw, &zeros, &cfg.params, &tg, &cfg.solver)?;
        (
            relax.snapshots[tg.nt].u.clone(),
            relax.snapshots[tg.nt].v.clone(),
        )
    } else {
        (u0_raw, v0_raw)
    };

    let nt = cfg.timegrid.nt;
    let (v_d, u_d) = match cfg.target_preset {
        TargetPreset::Zero => (
            vec![VectorField::zeros(&g); nt],
            vec![ScalarField::zeros(&g); nt],
        ),
        TargetPreset::Constant => (
            vec![VectorField::constant(&g, cfg.target_vx_const, cfg.target_vy_const); nt],
            vec![ScalarField::constant(&g, cfg.target_u_const); nt],
        ),
        TargetPreset::Synthetic => {
            let star = preset_control_star(&g, cfg.target_amplitude);
            let theta_star = vec![star; nt];
            synthetic_targets(&u0, &v0, &theta_star, &cfg.params, &cfg.timegrid, &cfg.solver)?
        }
        TargetPreset::FromFile => {
            let dir = Path::new(&cfg.target_dir);
            let mut v_d = Vec::with_capacity(nt);
            let mut u_d = Vec::with_capacity(nt);
            for n in 0..nt {
                let (u, _) = read_scalar_field(&dir.join(format!("u_d_{n:05}.fld")), Some(&g))?;
                let (v, _) = read_vector_field(&dir.join(format!("v_d_{n:05}")), Some(&g))?;
                u_d.push(u);
                v_d.push(v);
            }
            (v_d, u_d)
        }
    };

    let cp = CostParams {
        beta: cfg.beta,
        v_d,
        u_d,
        theta_min: cfg.theta_min,
        theta_max: cfg.theta_max,
    };
    cp.validate()?;

    Ok(Problem {
        cfg: cfg.clone(),
        u0,
        v0,
        theta0: build_theta0(cfg),
        cp,
    })
}

/// Seeded smooth admissible direction for the verification commands:
/// a few low-frequency modes, wall-normal components vanish analytically.
pub fn seeded_direction(grid: &GridSpec, rng: &mut SplitMix64, amplitude: f64) -> VectorField {
    let (lx, ly) = (grid.lx, grid.ly);
    let mut c = [0.0; 6];
    for e in c.iter_mut() {
        *e = rng.uniform(-amplitude, amplitude);
    }
    let pi = std::f64::consts::PI;
    VectorField::from_fn(
        grid,
        |x, y| {
            c[0] * (pi * x / lx).sin() * (pi * y / ly).cos()
                + c[1] * (pi * x / lx).sin() * (2.0 * pi * y / ly).cos()
                + c[2] * (2.0 * pi * x / lx).sin() * (pi * y / ly).cos()
        },
        |x, y| {
            c[3] * (pi * y / ly).sin() * (pi * x / lx).cos()
                + c[4] * (pi * y / ly).sin() * (2.0 * pi * x / lx).cos()
                + c[5] * (2.0 * pi * y / ly).sin() * (pi * x / lx).cos()
        },
    )
}

// ---------------------------------------------------------------------
// Diagnostics and reports
// ---------------------------------------------------------------------

/// Renders the fixed-schema diagnostics CSV for a trajectory.
pub fn diagnostics_csv(traj: &Trajectory, cp: &CostParams) -> String {
    let nt = traj.timegrid.nt;
    let dt = traj.timegrid.dt;
    let mut out = String::from("step,time,energy,mean_u,div_inf,J_track_v,J_track_u,J_reg\n");
    for (n, s) in traj.snapshots.iter().enumerate() {
        let k = n.min(nt - 1);
        let mut dv = s.v.clone();
        dv.axpy(-1.0, &cp.v_d[k]);
        let mut du = s.u.clone();
        du.axpy(-1.0, &cp.u_d[k]);
        let theta = &traj.controls[k];
        let row = [
            (n as f64) * dt,
            energy(s, &traj.params),
            mean_cc(&s.u),
            s.div_inf(),
            0.5 * inner_face(&dv, &dv),
            0.5 * inner_cc(&du, &du),
            0.5 * cp.beta * inner_face(theta, theta),
        ];
        let _ = write!(out, "{n}");
        for v in row {
            let _ = write!(out, ",{}", fmt17(v));
        }
        out.push('\n');
    }
    out
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text)
}

// ---------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let traj = solve_forward(
        &problem.u0,
        &problem.v0,
        &problem.theta0,
        &cfg.params,
        &cfg.timegrid,
        &cfg.solver,
    )?;
    ensure_out_dir(out)?;
    write_text(
        &out.join("diagnostics.csv"),
        &diagnostics_csv(&traj, &problem.cp),
    )?;

    let dt = cfg.timegrid.dt;
    let nt = cfg.timegrid.nt;
    if cfg.dump_every > 0 {
        for n in (0..=nt).step_by(cfg.dump_every) {
            let s = &traj.snapshots[n];
            let t = n as f64 * dt;
            write_scalar_field(&out.join(format!("u_{n:05}.fld")), &s.u, t, n)?;
            write_vector_field(&out.join(format!("v_{n:05}")), &s.v, t, n)?;
        }
    }
    let last = &traj.snapshots[nt];
    let t_final = cfg.timegrid.t_final;
    write_scalar_field(&out.join("final_u.fld"), &last.u, t_final, nt)?;
    write_scalar_field(&out.join("final_w.fld"), &last.w, t_final, nt)?;
    write_scalar_field(&out.join("final_p.fld"), &last.p, t_final, nt)?;
    write_vector_field(&out.join("final_v"), &last.v, t_final, nt)?;
    Ok(true)
}

fn cmd_optimize(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let state = projected_gradient_descent(
        &problem.u0,
        &problem.v0,
        &problem.theta0,
        &problem.cp,
        &cfg.params,
        &cfg.timegrid,
        &cfg.opt,
        &cfg.solver,
    )?;
    ensure_out_dir(out)?;

    let mut hist = String::from("iter,J,residual\n");
    for (k, j) in state.j_history.iter().enumerate() {
        let res = state
            .residual_history
            .get(k)
            .map(|r| fmt17(*r))
            .unwrap_or_default();
        let _ = writeln!(hist, "{k},{},{res}", fmt17(*j));
    }
    let _ = writeln!(
        hist,
        "# iterations={} converged={}",
        state.iterations, state.converged
    );
    write_text(&out.join("opt_history.csv"), &hist)?;

    let ctrl_dir = out.join("control");
    ensure_out_dir(&ctrl_dir)?;
    let dt = cfg.timegrid.dt;
    for (n, theta_n) in state.theta.iter().enumerate() {
        write_vector_field(
            &ctrl_dir.join(format!("theta_{n:05}")),
            theta_n,
            n as f64 * dt,
            n,
        )?;
    }

    // final state under the optimized control, for inspection
    let traj = solve_forward(
        &problem.u0,
        &problem.v0,
        &state.theta,
        &cfg.params,
        &cfg.timegrid,
        &cfg.solver,
    )?;
    write_text(
        &out.join("diagnostics.csv"),
        &diagnostics_csv(&traj, &problem.cp),
    )?;
    Ok(true)
}

fn time_pairing(dt: f64, a: &[VectorField], b: &[VectorField]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dt * inner_face(x, y)).sum()
}

fn cmd_grad_check(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let tg = cfg.timegrid;
    let traj = solve_forward(
        &problem.u0,
        &problem.v0,
        &problem.theta0,
        &cfg.params,
        &tg,
        &cfg.solver,
    )?;
    let j0 = cost(&traj, &problem.theta0, &problem.cp)?;
    let adj = solve_adjoint(&traj, &problem.cp.v_d, &problem.cp.u_d, &cfg.solver)?;
    let grad = gradient(&adj, &problem.theta0, cfg.beta)?;

    let mut rng = SplitMix64::new(cfg.seed ^ 0x9D5F_3C1A);
    let epsilons = [1e-1, 3e-2, 1e-2, 3e-3];
    let mut csv = String::from("direction,epsilon,fd,pairing,rel_err\n");
    let mut ok = true;
    for dir in 0..CHECK_DIRECTIONS {
        let h0 = seeded_direction(&cfg.grid, &mut rng, 1.0);
        let h = vec![h0; tg.nt];
        let pairing = time_pairing(tg.dt, &grad, &h);
        let mut best = f64::INFINITY;
        for &eps in &epsilons {
            let theta_eps: Vec<_> = problem
                .theta0
                .iter()
                .zip(&h)
                .map(|(t, d)| {
                    let mut x = t.clone();
                    x.axpy(eps, d);
                    x
                })
                .collect();
            let pert = solve_forward(
                &problem.u0,
                &problem.v0,
                &theta_eps,
                &cfg.params,
                &tg,
                &cfg.solver,
            )?;
            let j_eps = cost(&pert, &theta_eps, &problem.cp)?;
            let fd = (j_eps - j0) / eps;
            let rel = (fd - pairing).abs() / fd.abs().max(1e-300);
            best = best.min(rel);
            let _ = writeln!(
                csv,
                "{dir},{},{},{},{}",
                fmt17(eps),
                fmt17(fd),
                fmt17(pairing),
                fmt17(rel)
            );
        }
        if best > GRAD_CHECK_TOL {
            ok = false;
        }
    }
    ensure_out_dir(out)?;
    write_text(&out.join("grad_check.csv"), &csv)?;
    Ok(ok)
}

fn cmd_taylor(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let mut rng = SplitMix64::new(cfg.seed ^ 0x51_7CC1_B727);
    let mut csv = String::from("direction,epsilon,remainder,order\n");
    let mut ok = true;
    for dir in 0..CHECK_DIRECTIONS {
        let h0 = seeded_direction(&cfg.grid, &mut rng, 1.0);
        let h = vec![h0; cfg.timegrid.nt];
        let rep = taylor_test(
            &problem.theta0,
            &h,
            &problem.u0,
            &problem.v0,
            &problem.cp,
            &cfg.params,
            &cfg.timegrid,
            &cfg.solver,
        )?;
        for (k, &eps) in rep.epsilons.iter().enumerate() {
            let order = if k == 0 {
                String::new()
            } else {
                fmt17(rep.orders[k - 1])
            };
            let _ = writeln!(
                csv,
                "{dir},{},{},{order}",
                fmt17(eps),
                fmt17(rep.remainders[k])
            );
        }
        if !rep.exact {
            let best = rep.orders.iter().cloned().fold(f64::MIN, f64::max);
            if !(best >= TAYLOR_MIN_ORDER) {
                ok = false;
            }
        }
    }
    ensure_out_dir(out)?;
    write_text(&out.join("taylor.csv"), &csv)?;
    Ok(ok)
}

fn cmd_linearized_check(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let tg = cfg.timegrid;
    let traj = solve_forward(
        &problem.u0,
        &problem.v0,
        &problem.theta0,
        &cfg.params,
        &tg,
        &cfg.solver,
    )?;
    let mut rng = SplitMix64::new(cfg.seed ^ 0xA3C5_9AC2);
    let mut csv = String::from("kind,direction,epsilon,value,order\n");
    let mut ok = true;

    // superposition of two seeded perturbations
    let ha0 = seeded_direction(&cfg.grid, &mut rng, 1.0);
    let hb0 = seeded_direction(&cfg.grid, &mut rng, 1.0);
    let ha = vec![ha0.clone(); tg.nt];
    let hb = vec![hb0.clone(); tg.nt];
    let hsum: Vec<_> = ha
        .iter()
        .zip(&hb)
        .map(|(a, b)| {
            let mut s = a.clone();
            s.axpy(1.0, b);
            s
        })
        .collect();
    let la = solve_linearized(&traj, &ha, &cfg.solver)?;
    let lb = solve_linearized(&traj, &hb, &cfg.solver)?;
    let ls = solve_linearized(&traj, &hsum, &cfg.solver)?;
    let mut err2 = 0.0;
    let mut norm2 = 0.0;
    for n in 0..=tg.nt {
        let mut d1 = ls.phi1[n].clone();
        d1.axpy(-1.0, &la.phi1[n]);
        d1.axpy(-1.0, &lb.phi1[n]);
        let mut d2 = ls.phi2[n].clone();
        d2.axpy(-1.0, &la.phi2[n]);
        d2.axpy(-1.0, &lb.phi2[n]);
        err2 += inner_face(&d1, &d1) + inner_cc(&d2, &d2);
        norm2 += inner_face(&ls.phi1[n], &ls.phi1[n]) + inner_cc(&ls.phi2[n], &ls.phi2[n]);
    }
    let superpos = (err2 / norm2.max(1e-300)).sqrt();
    let _ = writeln!(csv, "superposition,0,,{},", fmt17(superpos));
    if superpos > SUPERPOSITION_TOL {
        ok = false;
    }

    // state-space Taylor remainder per direction
    let epsilons = [1e-1, 3e-2, 1e-2, 3e-3];
    for dir in 0..CHECK_DIRECTIONS {
        let h0 = seeded_direction(&cfg.grid, &mut rng, 10.0);
        let h = vec![h0; tg.nt];
        let lin = solve_linearized(&traj, &h, &cfg.solver)?;
        let mut remainders = Vec::new();
        for &eps in &epsilons {
            let theta_eps: Vec<_> = problem
                .theta0
                .iter()
                .zip(&h)
                .map(|(t, d)| {
                    let mut x = t.clone();
                    x.axpy(eps, d);
                    x
                })
                .collect();
            let pert = solve_forward(
                &problem.u0,
                &problem.v0,
                &theta_eps,
                &cfg.params,
                &tg,
                &cfg.solver,
            )?;
            let mut acc = 0.0;
            for n in 1..=tg.nt {
                let mut dv = pert.snapshots[n].v.clone();
                dv.axpy(-1.0, &traj.snapshots[n].v);
                dv.axpy(-eps, &lin.phi1[n]);
                let mut du = pert.snapshots[n].u.clone();
                du.axpy(-1.0, &traj.snapshots[n].u);
                du.axpy(-eps, &lin.phi2[n]);
                acc += tg.dt * (inner_face(&dv, &dv) + inner_cc(&du, &du));
            }
            remainders.push(acc.sqrt());
        }
        let mut best = f64::MIN;
        for k in 0..epsilons.len() - 1 {
            let order = if remainders[k] > 0.0 && remainders[k + 1] > 0.0 {
                (remainders[k] / remainders[k + 1]).ln() / (epsilons[k] / epsilons[k + 1]).ln()
            } else {
                f64::NAN
            };
            best = best.max(order);
            let _ = writeln!(
                csv,
                "taylor,{dir},{},{},{}",
                fmt17(epsilons[k + 1]),
                fmt17(remainders[k + 1]),
                fmt17(order)
            );
        }
        let _ = writeln!(
            csv,
            "taylor,{dir},{},{},",
            fmt17(epsilons[0]),
            fmt17(remainders[0])
        );
        if !(best >= TAYLOR_MIN_ORDER) {
            ok = false;
        }
    }
    ensure_out_dir(out)?;
    write_text(&out.join("linearized_check.csv"), &csv)?;
    Ok(ok)
}

fn cmd_adjoint_duality(cfg: &RunConfig, out: &Path) -> Result<bool> {
    let problem = build_problem(cfg)?;
    let tg = cfg.timegrid;
    let traj = solve_forward(
        &problem.u0,
        &problem.v0,
        &problem.theta0,
        &cfg.params,
        &tg,
        &cfg.solver,
    )?;
    let adj = solve_adjoint(&traj, &problem.cp.v_d, &problem.cp.u_d, &cfg.solver)?;

    let mut rng = SplitMix64::new(cfg.seed ^ 0xD0_5EED);
    let mut csv = String::from("direction,lhs,rhs,rel_gap\n");
    let mut ok = true;
    for dir in 0..CHECK_DIRECTIONS {
        let h0 = seeded_direction(&cfg.grid, &mut rng, 1.0);
        let h = vec![h0; tg.nt];
        let lin = solve_linearized(&traj, &h, &cfg.solver)?;
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for n in 0..tg.nt {
            lhs += tg.dt * inner_face(&adj.gamma1[n], &h[n]);
            let mut tr_u = traj.snapshots[n].u.clone();
            tr_u.axpy(-1.0, &problem.cp.u_d[n]);
            let mut tr_v = traj.snapshots[n].v.clone();
            tr_v.axpy(-1.0, &problem.cp.v_d[n]);
            rhs += tg.dt * (inner_cc(&tr_u, &lin.phi2[n]) + inner_face(&tr_v, &lin.phi1[n]));
        }
        let gap = (lhs - rhs).abs() / rhs.abs().max(1e-300);
        let _ = writeln!(csv, "{dir},{},{},{}", fmt17(lhs), fmt17(rhs), fmt17(gap));
        if gap > DUALITY_TOL {
            ok = false;
        }
    }
    ensure_out_dir(out)?;
    write_text(&out.join("adjoint_duality.csv"), &csv)?;
    Ok(ok)
}

// ---------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------

const USAGE: &str =
    "usage: scho <simulate|optimize|grad-check|taylor|linearized-check|adjoint-duality> --config PATH --out DIR";

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::SolverFailure { .. } | Error::Breakdown { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Runs one subcommand; returns the process exit code.
pub fn run_cli(args: &[String]) -> i32 {
    let mut config_path: Option<PathBuf> = None;
    let mut out_dir: Option<PathBuf> = None;
    let mut subcommand: Option<String> = None;

    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => match it.next() {
                Some(p) => config_path = Some(PathBuf::from(p)),
                None => {
                    eprintln!("--config needs a path\n{USAGE}");
                    return 1;
                }
            },
            "--out" => match it.next() {
                Some(p) => out_dir = Some(PathBuf::from(p)),
                None => {
                    eprintln!("--out needs a directory\n{USAGE}");
                    return 1;
                }
            },
            "--help" | "-h" => {
                println!("{USAGE}");
                return 0;
            }
            other if subcommand.is_none() && !other.starts_with('-') => {
                subcommand = Some(other.to_string());
            }
            other => {
                eprintln!("unexpected argument {other:?}\n{USAGE}");
                return 1;
            }
        }
    }

    let (Some(sub), Some(config_path), Some(out_dir)) = (subcommand, config_path, out_dir) else {
        eprintln!("{USAGE}");
        return 1;
    };

    let cfg = match parse_config(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }

    let run = match sub.as_str() {
        "simulate" => cmd_simulate(&cfg, &out_dir),
        "optimize" => cmd_optimize(&cfg, &out_dir),
        "grad-check" => cmd_grad_check(&cfg, &out_dir),
        "taylor" => cmd_taylor(&cfg, &out_dir),
        "linearized-check" => cmd_linearized_check(&cfg, &out_dir),
        "adjoint-duality" => cmd_adjoint_duality(&cfg, &out_dir),
        other => {
            eprintln!("unknown subcommand {other:?}\n{USAGE}");
            return 1;
        }
    };

    match run {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!(
                "{sub}: documented tolerance failed; see the report in {}",
                out_dir.display()
            );
            4
        }
        Err(e) => {
            eprintln!("{sub}: {e}");
            exit_code_for(&e)
        }
    }
}
