//! Experiment orchestration: trains every run of a config, evaluates the
//! metrics the problem's references support, and writes the artifact set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scoreflow::checkpoint::Checkpoint;
use scoreflow::dynamics::{rollout, Record};
use scoreflow::metrics::{aggregate, evaluate, EndpointReferences, ErrorReport, EvalConfig};
use scoreflow::oracle::{
    euler_maruyama, reference_initial_velocity, reference_terminal, GridFunction, QuadratureGrid,
    TerminalReference,
};
use scoreflow::problems::{initial_flow_state, ProblemSpec};
use scoreflow::report::{
    write_cost_curve, write_em_trajectories, write_errors, write_manifest, write_terminal_scatter,
    write_trajectories, write_velocity_slice, Manifest, RunSetRecord,
};
use scoreflow::training::{
    train, train_multistage, train_regularized, CostRecord, HjbForm, RunReport, StageOutcome,
    TrainConfig,
};
use scoreflow::velocity::{MlpField, QuadraticPsiField, VelocityField};
use scoreflow::{Error, Result, Tensor};

use crate::config::{Algorithm, ExperimentConfig};

/// Particle cap for plot-ready path exports.
const MAX_EXPORT_PARTICLES: usize = 100;

/// Root directory for outputs when neither the config nor the CLI names
/// one: `$SCOREFLOW_OUT_DIR`, falling back to `runs`.
pub fn default_output_root() -> PathBuf {
    match std::env::var_os("SCOREFLOW_OUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("runs"),
    }
}

/// The trained object of one run, behind one velocity-field view.
enum TrainedField {
    Mlp(MlpField),
    Quad(QuadraticPsiField),
}

impl TrainedField {
    fn as_velocity(&self) -> &dyn VelocityField {
        match self {
            TrainedField::Mlp(f) => f,
            TrainedField::Quad(f) => f,
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            TrainedField::Mlp(f) => f.params(),
            TrainedField::Quad(f) => f.params(),
        }
    }
}

/// Outcome of one run: the trained field, the training report with the
/// combined cost curve, and the per-stage outcomes for multistage runs.
struct RunOutcome {
    field: TrainedField,
    report: RunReport,
    stages: Vec<StageOutcome>,
}

fn train_one_run(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
    train_cfg: &TrainConfig,
) -> Result<RunOutcome> {
    // Stream 0 of the run seed initializes parameters; the training loop
    // samples on stream 1 and evaluation reads stream 2.
    let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    init_rng.set_stream(0);
    match cfg.algorithm {
        Algorithm::Standard => {
            let mut field = MlpField::init(spec.dim, cfg.hidden_width(), &mut init_rng);
            let report = train(spec, &mut field, train_cfg)?;
            Ok(RunOutcome { field: TrainedField::Mlp(field), report, stages: Vec::new() })
        }
        Algorithm::Multistage => {
            let mut field = MlpField::init(spec.dim, cfg.hidden_width(), &mut init_rng);
            let stages = train_multistage(spec, &mut field, train_cfg)?;
            let mut curve: Vec<CostRecord> = Vec::with_capacity(cfg.iters * stages.len());
            for (k, stage) in stages.iter().enumerate() {
                for rec in &stage.report.cost_curve {
                    curve.push(CostRecord { iter: k * cfg.iters + rec.iter, ..*rec });
                }
            }
            let last = stages.last().expect("multistage produces at least one stage");
            let report = RunReport {
                cost_curve: curve,
                err_a: None,
                err_b: None,
                adam: last.report.adam.clone(),
                sampler: last.report.sampler.clone(),
            };
            Ok(RunOutcome { field: TrainedField::Mlp(field), report, stages })
        }
        Algorithm::RegularizedLq | Algorithm::RegularizedFm => {
            let form = match cfg.algorithm {
                Algorithm::RegularizedLq => HjbForm::Kinetic,
                _ => HjbForm::DriftMatched,
            };
            let dt = spec.t_end / cfg.n_t as f64;
            let mut field = QuadraticPsiField::zeros(spec.dim, cfg.n_t, 0.0, dt);
            let report = train_regularized(spec, &mut field, train_cfg, form)?;
            Ok(RunOutcome { field: TrainedField::Quad(field), report, stages: Vec::new() })
        }
    }
}

/// Quadrature references for problems without closed-form solutions;
/// built once and shared by every run of the set.
struct GridReferences {
    terminal: TerminalReference,
    initial_velocity: GridFunction,
}

fn build_grid_references(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
) -> Result<Option<GridReferences>> {
    if spec.analytic.is_some() || spec.name != "double_well" || spec.dim > 2 {
        return Ok(None);
    }
    let mut grid = match cfg.reference.step {
        Some(step) => QuadratureGrid::isotropic(spec.dim, (-6.0, 6.0), (-4.0, 4.0), step)?,
        None => QuadratureGrid::default_for_dim(spec.dim)?,
    };
    let terminal = reference_terminal(spec, &mut grid)?;
    let initial_velocity = reference_initial_velocity(spec, &mut grid)?;
    Ok(Some(GridReferences { terminal, initial_velocity }))
}

/// Stochastic comparison paths (visual-comparison only): the problem's own
/// drift when it has one, otherwise the closed-form optimal control.
fn emit_em_comparison(
    dir: &Path,
    spec: &ProblemSpec,
    seed: u64,
    dt: f64,
    n_steps: usize,
) -> Result<()> {
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let z0 = spec.init.sample(&mut rng, MAX_EXPORT_PARTICLES);
    let paths = if spec.drift.is_some() {
        euler_maruyama(
            |t, x, out| spec.drift_into(t, x, out).expect("drift evaluates"),
            &z0,
            0.0,
            dt,
            n_steps,
            spec.gamma,
            &mut rng,
        )?
    } else if let Some(analytic) = spec.analytic.as_ref() {
        let gamma = spec.gamma;
        let mut score = vec![0.0; d];
        euler_maruyama(
            move |t, x, out| {
                (analytic.field)(t, x, out);
                (analytic.score)(t, x, &mut score);
                for i in 0..d {
                    out[i] += gamma * score[i];
                }
            },
            &z0,
            0.0,
            dt,
            n_steps,
            spec.gamma,
            &mut rng,
        )?
    } else {
        return Ok(());
    };
    write_em_trajectories(&dir.join("em_trajectories.csv"), &paths, 0.0, dt, MAX_EXPORT_PARTICLES)
}

/// Plot-ready exports for the first run: recorded trajectories, the
/// terminal scatter, velocity slices, per-stage handoff scatters, and the
/// stochastic comparison paths.
fn emit_plot_artifacts(
    dir: &Path,
    spec: &ProblemSpec,
    outcome: &RunOutcome,
    seed: u64,
    eval_n_t: usize,
) -> Result<()> {
    let dt = spec.t_end / eval_n_t as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let z0 = spec.init.sample(&mut rng, MAX_EXPORT_PARTICLES);
    let mut init = initial_flow_state(spec, &z0)?;
    init.h = None;
    let roll = rollout(outcome.field.as_velocity(), 0.0, dt, eval_n_t, &init, Record::Path)?;
    write_trajectories(&dir.join("trajectories.csv"), &roll, MAX_EXPORT_PARTICLES)?;
    write_terminal_scatter(&dir.join("terminal_scatter.csv"), &roll.final_state())?;

    // Midpoint snapped onto the rollout grid: time-grid fields (the
    // quadratic potential) are undefined between their nodes.
    let times = [0.0, (eval_n_t / 2) as f64 * dt, spec.t_end];
    let xs: Vec<f64> = (0..=120).map(|i| -3.0 + 0.05 * i as f64).collect();
    write_velocity_slice(&dir.join("velocity_slice.csv"), outcome.field.as_velocity(), &times, &xs)?;

    for (k, stage) in outcome.stages.iter().enumerate() {
        write_terminal_scatter(&dir.join(format!("stage{k}_terminal_scatter.csv")), &stage.terminal)?;
    }
    emit_em_comparison(dir, spec, seed, dt, eval_n_t)
}

/// Runs every seed of the experiment and writes the artifact tree. Returns
/// the output directory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    cli_output: Option<&Path>,
    threads: usize,
) -> Result<PathBuf> {
    cfg.validate()?;
    let spec = cfg.build_problem()?;
    let out_dir = match (cli_output, cfg.output.as_ref()) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => default_output_root().join(format!(
            "{}_{}d_{}",
            spec.name,
            spec.dim,
            cfg.algorithm.as_str()
        )),
    };
    std::fs::create_dir_all(&out_dir)
        .map_err(|source| Error::Io { path: out_dir.display().to_string(), source })?;

    let started = Instant::now();
    let digest = cfg.digest();
    let references = build_grid_references(cfg, &spec)?;
    let endpoints = references.as_ref().map(|r| EndpointReferences {
        initial_velocity: &r.initial_velocity,
        terminal: &r.terminal,
    });
    let optimal_cost = spec.analytic.as_ref().and_then(|a| a.optimal_cost);
    let n_stages = if cfg.algorithm == Algorithm::Multistage { spec.stages.len() } else { 1 };
    let eval_n_t = cfg.eval.n_t.unwrap_or(cfg.n_t * n_stages);

    let mut reports: Vec<ErrorReport> = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let train_cfg = cfg.train_config(r);
        let outcome = train_one_run(cfg, &spec, &train_cfg)?;
        let run_dir = out_dir.join(format!("run{r}"));
        std::fs::create_dir_all(&run_dir)
            .map_err(|source| Error::Io { path: run_dir.display().to_string(), source })?;
        write_cost_curve(&run_dir.join("cost_curve.csv"), &outcome.report.cost_curve)?;

        // The sampler position is meaningful only while the loop redraws
        // its batch; multistage runs end on a fixed handed-off batch.
        let sampler = (cfg.resample && cfg.algorithm != Algorithm::Multistage)
            .then(|| outcome.report.sampler.clone());
        let iterations = cfg.iters * n_stages;
        Checkpoint::capture(
            spec.name,
            cfg.algorithm.as_str(),
            iterations,
            &outcome.field.params(),
            &outcome.report.adam,
            sampler,
        )
        .save(&run_dir.join("checkpoint.json"))?;

        let eval_cfg = EvalConfig {
            n_eval: cfg.eval.n_eval,
            n_t: eval_n_t,
            seed: train_cfg.seed,
            with_info: cfg.eval.with_info,
        };
        let mut report =
            evaluate(&spec, outcome.field.as_velocity(), &eval_cfg, optimal_cost, endpoints.as_ref())?;
        report.err_a = outcome.report.err_a;
        report.err_b = outcome.report.err_b;
        reports.push(report);

        if r == 0 {
            emit_plot_artifacts(&run_dir, &spec, &outcome, train_cfg.seed, eval_n_t)?;
        }
    }

    let record = RunSetRecord {
        problem: spec.name.to_string(),
        dim: spec.dim,
        algorithm: cfg.algorithm.as_str().to_string(),
        config_digest: digest.clone(),
        seed: cfg.seed,
        aggregate: aggregate(reports),
    };
    write_errors(&out_dir.join("errors.json"), &record)?;
    write_manifest(
        &out_dir.join("manifest.json"),
        &Manifest {
            config_digest: digest,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        },
    )?;
    Ok(out_dir)
}
