//! Plot-ready run artifacts: cost-curve, trajectory, scatter, and
//! velocity-slice CSVs, the per-run error summary, and the run manifest.
//! Floats are written with 17 significant digits so every file diffs
//! cleanly and parses back to the same bits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{FlowState, Rollout};
use crate::error::{Error, Result};
use crate::metrics::AggregateReport;
use crate::tensor::Tensor;
use crate::training::CostRecord;
use crate::velocity::VelocityField;

/// Shortest-unambiguous float encoding used in every CSV column: scientific
/// notation with 16 fractional digits (17 significant digits round-trips
/// any finite f64).
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file =
        File::create(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    Ok(BufWriter::new(file))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Writes the optimization trace as `iter,loss_cost,loss_hjb,loss_total`.
/// An empty curve still writes the header row.
pub fn write_cost_curve(path: &Path, curve: &[CostRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iter,loss_cost,loss_hjb,loss_total").map_err(|e| io_err(path, e))?;
    for rec in curve {
        writeln!(
            w,
            "{},{},{},{}",
            rec.iter,
            fmt_float(rec.loss_cost),
            fmt_float(rec.loss_hjb),
            fmt_float(rec.loss_total)
        )
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes per-node particle paths from a rollout that recorded them:
/// `particle,step,t,z_1..z_d,l,ltilde,s_1..s_d`, for the first
/// `max_particles` particles.
pub fn write_trajectories(path: &Path, roll: &Rollout, max_particles: usize) -> Result<()> {
    if roll.z.is_empty() {
        return Err(Error::InvalidConfig("trajectory export needs a recorded path".into()));
    }
    let d = roll.z[0].shape()[1];
    let n = roll.z[0].shape()[0].min(max_particles);
    let mut w = create(path)?;
    let mut header = String::from("particle,step,t");
    for i in 1..=d {
        header.push_str(&format!(",z_{i}"));
    }
    header.push_str(",l,ltilde");
    for i in 1..=d {
        header.push_str(&format!(",s_{i}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    for b in 0..n {
        for (k, z) in roll.z.iter().enumerate() {
            let t = roll.times[roll.node_index[k]];
            let mut line = format!("{b},{},{}", roll.node_index[k], fmt_float(t));
            for i in 0..d {
                line.push(',');
                line.push_str(&fmt_float(z.data()[b * d + i]));
            }
            line.push(',');
            line.push_str(&fmt_float(roll.l[k].data()[b]));
            line.push(',');
            line.push_str(&fmt_float(roll.lt[k].data()[b]));
            let s = &roll.s[k];
            for i in 0..d {
                line.push(',');
                line.push_str(&fmt_float(s.data()[b * d + i]));
            }
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the terminal batch as density/score scatter data:
/// `particle,z_1..z_d,ltilde,s_1..s_d`.
pub fn write_terminal_scatter(path: &Path, state: &FlowState) -> Result<()> {
    let (n, d) = (state.n(), state.dim());
    let mut w = create(path)?;
    let mut header = String::from("particle");
    for i in 1..=d {
        header.push_str(&format!(",z_{i}"));
    }
    header.push_str(",ltilde");
    for i in 1..=d {
        header.push_str(&format!(",s_{i}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    for b in 0..n {
        let mut line = format!("{b}");
        for i in 0..d {
            line.push(',');
            line.push_str(&fmt_float(state.z.data()[b * d + i]));
        }
        line.push(',');
        line.push_str(&fmt_float(state.lt.data()[b]));
        for i in 0..d {
            line.push(',');
            line.push_str(&fmt_float(state.s.data()[b * d + i]));
        }
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the learned velocity along the first axis, `f(t, (x_1, 0, ..., 0))`,
/// on the product of the given time and position grids:
/// `t,x_1,f_1..f_d`.
pub fn write_velocity_slice(
    path: &Path,
    field: &dyn VelocityField,
    times: &[f64],
    xs: &[f64],
) -> Result<()> {
    let d = field.dim();
    let mut w = create(path)?;
    let mut header = String::from("t,x_1");
    for i in 1..=d {
        header.push_str(&format!(",f_{i}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    let mut point = vec![0.0; d];
    let mut f = vec![0.0; d];
    for &t in times {
        for &x in xs {
            point[0] = x;
            field.velocity_into(t, &point, &mut f)?;
            let mut line = format!("{},{}", fmt_float(t), fmt_float(x));
            for v in &f {
                line.push(',');
                line.push_str(&fmt_float(*v));
            }
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes stochastic comparison paths (visual-comparison only):
/// `particle,step,t,z_1..z_d`. `paths[k]` holds the `[n, d]` batch at node `k`.
pub fn write_em_trajectories(
    path: &Path,
    paths: &[Tensor],
    t_start: f64,
    dt: f64,
    max_particles: usize,
) -> Result<()> {
    if paths.is_empty() {
        return Err(Error::InvalidConfig("path export needs at least one node".into()));
    }
    let d = paths[0].shape()[1];
    let n = paths[0].shape()[0].min(max_particles);
    let mut w = create(path)?;
    let mut header = String::from("particle,step,t");
    for i in 1..=d {
        header.push_str(&format!(",z_{i}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    for b in 0..n {
        for (k, z) in paths.iter().enumerate() {
            let t = t_start + k as f64 * dt;
            let mut line = format!("{b},{k},{}", fmt_float(t));
            for i in 0..d {
                line.push(',');
                line.push_str(&fmt_float(z.data()[b * d + i]));
            }
            writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// The error summary of one experiment (all runs of one config), as stored
/// in `errors.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSetRecord {
    pub problem: String,
    pub dim: usize,
    pub algorithm: String,
    /// FNV-1a 64 digest of the resolved config, hex-encoded.
    pub config_digest: String,
    pub seed: u64,
    pub aggregate: AggregateReport,
}

pub fn write_errors(path: &Path, record: &RunSetRecord) -> Result<()> {
    let body = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Checkpoint(format!("serialize error summary: {e}")))?;
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn read_errors(path: &Path) -> Result<RunSetRecord> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))
}

/// Reproducibility manifest: the digest + seed + version triple determines
/// a rerun; wall time and thread count document the recorded one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub seed: u64,
    pub version: String,
    pub threads: usize,
    pub wall_time_seconds: f64,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let body = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Checkpoint(format!("serialize manifest: {e}")))?;
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{rollout, Record};
    use crate::metrics::{aggregate, ErrorReport};
    use crate::problems::{initial_flow_state, make_rwpo};
    use crate::velocity::MlpField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("scoreflow-report-{}-{}", std::process::id(), tag))
    }

    #[test]
    fn float_format_round_trips_and_uses_scientific_notation() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 2.5e17, 0.0, 123.456789012345678] {
            let s = fmt_float(v);
            assert!(s.contains('e'), "{s}");
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s} -> {back}");
        }
    }

    #[test]
    fn cost_curve_file_has_header_and_exact_rows() {
        let path = temp_path("curve.csv");
        let curve = vec![
            CostRecord { iter: 0, loss_cost: 1.5, loss_hjb: 0.25, loss_total: 1.75 },
            CostRecord { iter: 1, loss_cost: 1.0, loss_hjb: 0.125, loss_total: 1.125 },
        ];
        write_cost_curve(&path, &curve).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "iter,loss_cost,loss_hjb,loss_total");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,1.5000000000000000e0,"));

        // Zero iterations leave only the header.
        write_cost_curve(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn trajectory_and_scatter_files_have_expected_shape() {
        let spec = make_rwpo(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = spec.init.sample(&mut rng, 7);
        let init = initial_flow_state(&spec, &z0).unwrap();
        let field = MlpField::zeros(2, 3);
        let roll = rollout(&field, 0.0, 0.2, 5, &init, Record::Path).unwrap();

        let path = temp_path("traj.csv");
        write_trajectories(&path, &roll, 3).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "particle,step,t,z_1,z_2,l,ltilde,s_1,s_2");
        // 3 particles x 6 nodes + header.
        assert_eq!(lines.len(), 1 + 3 * 6);
        std::fs::remove_file(&path).unwrap();

        let path = temp_path("scatter.csv");
        write_terminal_scatter(&path, &roll.final_state()).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().count(), 8);
        assert!(body.starts_with("particle,z_1,z_2,ltilde,s_1,s_2\n"));
        std::fs::remove_file(&path).unwrap();

        let path = temp_path("slice.csv");
        write_velocity_slice(&path, &field, &[0.0, 0.5], &[-1.0, 0.0, 1.0]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "t,x_1,f_1,f_2");
        assert_eq!(lines.len(), 7);
        // A zero network produces a zero slice.
        for line in &lines[1..] {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0);
            assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
        }
        std::fs::remove_file(&path).unwrap();

        let path = temp_path("em.csv");
        write_em_trajectories(&path, &roll.z, 0.0, 0.2, 2).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = body.lines().collect();
        assert_eq!(lines[0], "particle,step,t,z_1,z_2");
        assert_eq!(lines.len(), 1 + 2 * 6);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn error_summary_round_trips_through_json() {
        let mut report = ErrorReport::empty();
        report.err_rho = Some(0.0123);
        report.cost_gap = Some(-0.5);
        report.info_residuals = vec![(0.0, 0.001), (1.0, -0.002)];
        let record = RunSetRecord {
            problem: "rwpo".into(),
            dim: 1,
            algorithm: "standard".into(),
            config_digest: format!("{:016x}", 0xdeadbeefu64),
            seed: 7,
            aggregate: aggregate(vec![report]),
        };
        let path = temp_path("errors.json");
        write_errors(&path, &record).unwrap();
        let back = read_errors(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(back.problem, "rwpo");
        assert_eq!(back.aggregate.n_runs, 1);
        assert_eq!(back.aggregate.err_rho.unwrap().mean, 0.0123);
        assert_eq!(back.aggregate.runs[0].info_residuals.len(), 2);
        assert!(back.aggregate.err_f.is_none());
    }
}
