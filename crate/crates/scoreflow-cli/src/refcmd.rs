//! Reference tabulation: writes the quadrature solution of a problem to
//! plot-ready CSV files with convergence diagnostics.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use scoreflow::oracle::{
    h_step_convergence, reference_initial_velocity, reference_terminal, GridFunction,
    QuadratureGrid,
};
use scoreflow::problems::make_double_well_default;
use scoreflow::report::fmt_float;
use scoreflow::{Error, Result};

use crate::runner::default_output_root;

/// Convergence diagnostics stored alongside the tables.
#[derive(Serialize)]
struct ReferenceManifest {
    problem: String,
    dim: usize,
    step: f64,
    /// Trapezoid mass of the tabulated terminal density (should be ~1).
    grid_mass: f64,
    /// Kernel normalizer probed at the origin with the grid step, and its
    /// absolute change when the step halves (small = converged).
    h_probe: f64,
    h_probe_halving_shift: f64,
}

fn grid_points(grid: &QuadratureGrid) -> Vec<Vec<f64>> {
    let mut points = Vec::new();
    match grid.dim() {
        1 => {
            for x in grid.outer_axis(0) {
                points.push(vec![x]);
            }
        }
        _ => {
            for x in grid.outer_axis(0) {
                for y in grid.outer_axis(1) {
                    points.push(vec![x, y]);
                }
            }
        }
    }
    points
}

/// One output column group: a name, its grid function, and whether the
/// name takes component suffixes even with one component (vector-valued
/// quantities keep `_1` in one dimension, matching the other CSV writers).
type Column<'a> = (&'a str, &'a GridFunction, bool);

fn write_table(path: &Path, points: &[Vec<f64>], columns: &[Column<'_>]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::Io { path: path.display().to_string(), source: e };
    let d = points[0].len();
    let mut header = String::new();
    for i in 1..=d {
        if i > 1 {
            header.push(',');
        }
        header.push_str(&format!("x_{i}"));
    }
    for (name, grid, vector) in columns {
        let m = grid.output_dim();
        if m == 1 && !vector {
            header.push_str(&format!(",{name}"));
        } else {
            for i in 1..=m {
                header.push_str(&format!(",{name}_{i}"));
            }
        }
    }
    writeln!(w, "{header}").map_err(io)?;
    let mut out = vec![0.0; columns.iter().map(|(_, g, _)| g.output_dim()).max().unwrap_or(1)];
    for point in points {
        let mut line = String::new();
        for (i, x) in point.iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            line.push_str(&fmt_float(*x));
        }
        for (_, grid, _) in columns {
            let m = grid.output_dim();
            grid.eval_into(point, &mut out[..m])?;
            for v in &out[..m] {
                line.push(',');
                line.push_str(&fmt_float(*v));
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Tabulates the quadrature reference for `problem` in dimension `dim`,
/// writing `rho_T.csv` (terminal density, score, and velocity) and
/// `f0.csv` (initial velocity) plus a manifest with convergence
/// diagnostics. Only the double-well problem in one or two dimensions has
/// a quadrature reference.
pub fn run_reference(
    problem: &str,
    dim: usize,
    step: Option<f64>,
    output: Option<&Path>,
) -> Result<PathBuf> {
    if problem != "double_well" {
        return Err(Error::InvalidConfig(format!(
            "no quadrature reference for {problem:?}; only double_well is tabulated"
        )));
    }
    if dim == 0 || dim > 2 {
        return Err(Error::InvalidConfig(format!(
            "quadrature references support 1 or 2 dimensions, got {dim}"
        )));
    }
    let spec = make_double_well_default(dim)?;
    let mut grid = match step {
        Some(h) => QuadratureGrid::isotropic(dim, (-6.0, 6.0), (-4.0, 4.0), h)?,
        None => QuadratureGrid::default_for_dim(dim)?,
    };
    let out_dir = match output {
        Some(dir) => dir.to_path_buf(),
        None => default_output_root().join(format!("reference_{}_{dim}d", spec.name)),
    };
    std::fs::create_dir_all(&out_dir)
        .map_err(|source| Error::Io { path: out_dir.display().to_string(), source })?;

    let (h_probe, h_probe_halving_shift) = h_step_convergence(&spec, &grid)?;
    let terminal = reference_terminal(&spec, &mut grid)?;
    let f0 = reference_initial_velocity(&spec, &mut grid)?;
    let points = grid_points(&grid);
    write_table(
        &out_dir.join("rho_T.csv"),
        &points,
        &[
            ("rho", &terminal.density, false),
            ("s", &terminal.score, true),
            ("f", &terminal.velocity, true),
        ],
    )?;
    write_table(&out_dir.join("f0.csv"), &points, &[("f0", &f0, true)])?;

    let manifest = ReferenceManifest {
        problem: spec.name.to_string(),
        dim,
        step: grid.step(0),
        grid_mass: terminal.grid_mass,
        h_probe,
        h_probe_halving_shift,
    };
    let body = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidConfig(format!("serialize reference manifest: {e}")))?;
    let path = out_dir.join("reference_manifest.json");
    std::fs::write(&path, body)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(out_dir)
}
