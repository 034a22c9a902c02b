//! Result aggregation: merges `errors.json` files across run sets and
//! prints one summary row per (problem, dimension, algorithm).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scoreflow::metrics::{aggregate, MetricSummary};
use scoreflow::report::{read_errors, RunSetRecord};
use scoreflow::{Error, Result};

fn collect_error_files(path: &Path, into: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let entries = std::fs::read_dir(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let mut children: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let entry =
                entry.map_err(|source| Error::Io { path: path.display().to_string(), source })?;
            children.push(entry.path());
        }
        children.sort();
        for child in children {
            if child.is_dir() || child.file_name().is_some_and(|n| n == "errors.json") {
                collect_error_files(&child, into)?;
            }
        }
    } else {
        into.push(path.to_path_buf());
    }
    Ok(())
}

fn cell(summary: &Option<MetricSummary>) -> String {
    match summary {
        Some(s) => format!("{:.3e}±{:.1e}", s.mean, s.std),
        None => "-".to_string(),
    }
}

/// Reads every `errors.json` under `paths`, merges records that share a
/// (problem, dim, algorithm) key, and prints the metric table.
pub fn run_report(paths: &[PathBuf]) -> Result<()> {
    let mut files = Vec::new();
    for path in paths {
        collect_error_files(path, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::InvalidConfig("no errors.json files found under the given paths".into()));
    }
    let mut groups: BTreeMap<(String, usize, String), Vec<RunSetRecord>> = BTreeMap::new();
    for file in &files {
        let record = read_errors(file)?;
        groups
            .entry((record.problem.clone(), record.dim, record.algorithm.clone()))
            .or_default()
            .push(record);
    }

    let header = format!(
        "{:<16} {:>3} {:<14} {:>4}  {:<18} {:<18} {:<18} {:<18} {:<18} {:<18} {:<18} {:<18}",
        "problem",
        "dim",
        "algorithm",
        "runs",
        "err_rho",
        "err_f",
        "err_s",
        "err_f0",
        "err_fend",
        "err_A",
        "err_B",
        "cost_gap"
    );
    println!("{header}");
    println!("{}", "-".repeat(header.len()));
    for ((problem, dim, algorithm), records) in &groups {
        let mut runs = Vec::new();
        for record in records {
            runs.extend(record.aggregate.runs.iter().cloned());
        }
        let merged = aggregate(runs);
        println!(
            "{:<16} {:>3} {:<14} {:>4}  {:<18} {:<18} {:<18} {:<18} {:<18} {:<18} {:<18} {:<18}",
            problem,
            dim,
            algorithm,
            merged.n_runs,
            cell(&merged.err_rho),
            cell(&merged.err_f),
            cell(&merged.err_s),
            cell(&merged.err_f0),
            cell(&merged.err_fend),
            cell(&merged.err_a),
            cell(&merged.err_b),
            cell(&merged.cost_gap),
        );
    }
    Ok(())
}
