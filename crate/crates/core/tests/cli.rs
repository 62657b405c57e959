//! End-to-end checks of the command-line surface: subcommands, exit
//! codes, the diagnostics CSV contract and run-to-run determinism.

use std::fs;
use std::path::Path;

use scho_core::cli_io::run_cli;

fn run(args: &[&str]) -> i32 {
    let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    run_cli(&owned)
}

fn write_cfg(path: &Path, body: &str) {
    fs::write(path, body).unwrap();
}

fn csv_column(path: &Path, col: usize) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn simulate_uniform_mean_decay_in_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_cfg(
        &cfg,
        "grid.nx = 16\ngrid.ny = 16\nphysics.alpha = 1.0\ntime.T = 1.0\ntime.nt = 100\n\
         init.u0_preset = constant\ninit.u0_value = 0.7\nsolver.cg_tol = 1e-12\n",
    );
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let means = csv_column(&out.join("diagnostics.csv"), 3);
    assert_eq!(means.len(), 101);
    let dt: f64 = 1.0 / 100.0;
    for (n, m) in means.iter().enumerate() {
        let expect = 0.7 / (1.0 + dt).powi(n as i32);
        assert!(
            (m - expect).abs() <= 1e-10,
            "step {n}: mean {m} vs {expect}"
        );
    }
    // final fields exist
    assert!(out.join("final_u.fld").exists());
    assert!(out.join("final_v.fx").exists());
    assert!(out.join("final_v.fy").exists());
}

#[test]
fn simulate_is_bit_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_cfg(
        &cfg,
        "grid.nx = 16\ngrid.ny = 16\ntime.T = 0.02\ntime.nt = 20\n\
         init.u0_preset = random\nseed = 99\n",
    );
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        assert_eq!(
            run(&[
                "simulate",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
    }
    let a = fs::read(out1.join("diagnostics.csv")).unwrap();
    let b = fs::read(out2.join("diagnostics.csv")).unwrap();
    assert_eq!(a, b, "diagnostics CSVs differ between identical runs");
}

#[test]
fn optimize_produces_non_increasing_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_cfg(
        &cfg,
        "grid.nx = 8\ngrid.ny = 8\nphysics.mu = 0.05\nphysics.lambda = 0.01\n\
         time.T = 1.0\ntime.nt = 50\ninit.u0_preset = bubble\ninit.bubble_width = 0.1\n\
         targets.preset = synthetic\ntargets.amplitude = 1.5\ncontrol.beta = 1e-3\n\
         opt.max_iters = 10\nseed = 7\n",
    );
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "optimize",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let js = csv_column(&out.join("opt_history.csv"), 1);
    assert!(js.len() >= 2, "expected several iterations");
    for w in js.windows(2) {
        assert!(w[1] <= w[0], "J history increased: {w:?}");
    }
    // control dump exists and loads back on the right grid
    let g = scho_core::grid::make_grid(8, 8, 1.0, 1.0).unwrap();
    let (theta0, _) =
        scho_core::cli_io::read_vector_field(&out.join("control/theta_00000"), Some(&g)).unwrap();
    assert!(theta0.max_abs() <= 2.0);
}

#[test]
fn verification_commands_pass_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    // 16² version of the shipped verify config
    write_cfg(
        &cfg,
        "grid.nx = 16\ngrid.ny = 16\ngrid.Lx = 8.0\ngrid.Ly = 8.0\n\
         physics.mu = 0.1\nphysics.lambda = 0.05\nphysics.alpha = 0.1\n\
         time.T = 0.2\ntime.nt = 200\ninit.u0_preset = bubble\n\
         init.bubble_radius = 2.2\ninit.bubble_width = 1.4\ninit.relax_steps = 200\n\
         targets.preset = synthetic\ntargets.amplitude = 2.0\n\
         solver.cg_tol = 1e-12\nseed = 42\n",
    );
    for sub in ["adjoint-duality", "grad-check", "taylor", "linearized-check"] {
        let out = dir.path().join(sub);
        let code = run(&[
            sub,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{sub} exited with {code}");
    }
}

#[test]
fn tolerance_failure_exits_4() {
    // a deliberately hostile configuration: huge dt and a raw (unrelaxed)
    // high-curvature profile make the continuous-adjoint pairing miss the
    // finite-difference answer by far more than the documented tolerance
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    write_cfg(
        &cfg,
        "grid.nx = 8\ngrid.ny = 8\nphysics.lambda = 0.05\ntime.T = 0.4\ntime.nt = 8\n\
         init.u0_preset = random\ntargets.preset = zero\nseed = 3\n",
    );
    let out = dir.path().join("out");
    let code = run(&[
        "adjoint-duality",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 4, "expected the duality gate to fail");
    assert!(out.join("adjoint_duality.csv").exists());
}
