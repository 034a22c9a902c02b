//! Experiment configuration: the JSON schema, its validation rules, and the
//! digest that fingerprints a run set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use scoreflow::oracle::fnv1a64;
use scoreflow::problems::{
    make_double_moon, make_double_well, make_lq_entropy, make_ou_flow_matching_default, make_rwpo,
    ProblemSpec,
};
use scoreflow::training::TrainConfig;
use scoreflow::{Error, Result};

/// Which training loop a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Cost descent on a network velocity field.
    Standard,
    /// Interior-residual regularization of a quadratic potential,
    /// kinetic-energy form.
    RegularizedLq,
    /// Same with the drift-matched residual form.
    RegularizedFm,
    /// Stagewise cost descent with particle handoff between stages.
    Multistage,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Standard => "standard",
            Algorithm::RegularizedLq => "regularized_lq",
            Algorithm::RegularizedFm => "regularized_fm",
            Algorithm::Multistage => "multistage",
        }
    }
}

/// Evaluation settings for the post-training metric pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Evaluation batch size.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    /// Euler steps for the evaluation rollout; defaults to the training
    /// grid over the full horizon.
    #[serde(default)]
    pub n_t: Option<usize>,
    /// Transport score Jacobians and report information residuals.
    #[serde(default = "default_true")]
    pub with_info: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_eval: default_n_eval(), n_t: None, with_info: true }
    }
}

/// Quadrature settings for problems whose references come from grids.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSettings {
    /// Grid step; defaults to 0.01 (1-d) / 0.05 (2-d).
    #[serde(default)]
    pub step: Option<f64>,
}

/// One experiment: a problem, an algorithm, its hyperparameters, and the
/// run-set bookkeeping. Unknown keys are rejected at parse time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `rwpo`, `ou_flow_matching`, `lq_entropy`, `double_well`, or
    /// `double_moon`.
    pub problem: String,
    pub dim: usize,
    /// Diffusion coefficient override; each problem has its own default.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Entropy weight (`lq_entropy` only).
    #[serde(default)]
    pub beta: Option<f64>,
    /// Hidden width of the network field (network algorithms only);
    /// defaults to 20 / 50 / 200 for d = 1 / 2 / larger.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Euler steps per training window (per stage for multistage runs).
    pub n_t: usize,
    /// Training batch size.
    pub n_z: usize,
    /// Optimizer iterations (per stage for multistage runs).
    pub iters: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Interior-residual weight (regularized algorithms only).
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub l2_weight: f64,
    pub algorithm: Algorithm,
    /// Stage partition override of `[0, t_end]` for multistage runs.
    #[serde(default)]
    pub stages: Option<Vec<(f64, f64)>>,
    /// Independent runs; run `r` uses seed `seed + r`.
    pub runs: usize,
    pub seed: u64,
    /// Redraw the training batch every iteration.
    #[serde(default = "default_true")]
    pub resample: bool,
    /// Output directory; falls back to the CLI flag, then to
    /// `$SCOREFLOW_OUT_DIR`, then to `runs/<problem>_<dim>d_<algorithm>`.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub reference: ReferenceSettings,
}

fn default_n_eval() -> usize {
    10_000
}

fn default_lr() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Parses a config file, pointing at the offending line on failure.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        let cfg: ExperimentConfig = serde_json::from_str(&body)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema-level validation beyond what parsing enforces; runs before
    /// any compute.
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        self.train_config(0).validate()?;
        match self.algorithm {
            Algorithm::RegularizedLq | Algorithm::RegularizedFm => {
                if self.hidden.is_some() {
                    return Err(Error::InvalidConfig(
                        "hidden applies to network algorithms; regularized runs train a quadratic potential".into(),
                    ));
                }
                // The quadratic potential lives on the training time grid;
                // evaluation can only coarsen that grid, never leave it.
                if let Some(eval_n_t) = self.eval.n_t {
                    if eval_n_t == 0 || self.n_t % eval_n_t != 0 {
                        return Err(Error::InvalidConfig(format!(
                            "eval.n_t must divide n_t={} for regularized runs, got {eval_n_t}",
                            self.n_t
                        )));
                    }
                }
            }
            Algorithm::Standard | Algorithm::Multistage => {
                if self.lambda != 0.0 {
                    return Err(Error::InvalidConfig(
                        "lambda applies to regularized algorithms only".into(),
                    ));
                }
            }
        }
        if self.algorithm == Algorithm::RegularizedFm && self.problem != "ou_flow_matching" {
            return Err(Error::InvalidConfig(format!(
                "the drift-matched regularized algorithm needs a linear-drift problem, got {}",
                self.problem
            )));
        }
        if self.algorithm == Algorithm::RegularizedLq
            && !matches!(self.problem.as_str(), "rwpo" | "lq_entropy" | "double_well")
        {
            return Err(Error::InvalidConfig(format!(
                "the kinetic regularized algorithm needs a kinetic-energy problem, got {}",
                self.problem
            )));
        }
        if self.stages.is_some() && self.algorithm != Algorithm::Multistage {
            return Err(Error::InvalidConfig("stages apply to multistage runs only".into()));
        }
        if let Some(step) = self.reference.step {
            if !(step > 0.0) || !step.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "reference step must be positive, got {step}"
                )));
            }
        }
        // Surface problem-construction errors (unknown name, bad dim)
        // before any training starts.
        self.build_problem()?;
        Ok(())
    }

    /// Builds the problem with every override applied.
    pub fn build_problem(&self) -> Result<ProblemSpec> {
        if self.beta.is_some() && self.problem != "lq_entropy" {
            return Err(Error::InvalidConfig("beta applies to lq_entropy only".into()));
        }
        let mut spec = match self.problem.as_str() {
            "rwpo" => make_rwpo(self.dim, self.gamma.unwrap_or(1.0))?,
            "ou_flow_matching" => {
                make_ou_flow_matching_default(self.dim, self.gamma.unwrap_or(1.0))?
            }
            "lq_entropy" => {
                if self.gamma.is_some() {
                    return Err(Error::InvalidConfig(
                        "lq_entropy fixes gamma = 1; drop the override".into(),
                    ));
                }
                make_lq_entropy(self.dim, self.beta.unwrap_or(0.1))?
            }
            "double_well" => make_double_well(
                self.dim,
                self.gamma.unwrap_or(0.1),
                0.25,
                vec![-1.0; self.dim],
                vec![1.0; self.dim],
            )?,
            "double_moon" => {
                if self.dim != 2 {
                    return Err(Error::InvalidConfig(format!(
                        "double_moon is two-dimensional, got dim {}",
                        self.dim
                    )));
                }
                make_double_moon(self.gamma.unwrap_or(1.0))?
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown problem {other:?}; expected rwpo, ou_flow_matching, lq_entropy, double_well, or double_moon"
                )))
            }
        };
        if let Some(stages) = &self.stages {
            validate_stages(stages, spec.t_end)?;
            spec.stages = stages.clone();
        }
        Ok(spec)
    }

    /// Training settings for run `r` of the set.
    pub fn train_config(&self, run: usize) -> TrainConfig {
        TrainConfig {
            n_t: self.n_t,
            n_z: self.n_z,
            iters: self.iters,
            lr: self.lr,
            lambda: self.lambda,
            l2_weight: self.l2_weight,
            seed: self.seed + run as u64,
            resample: self.resample,
        }
    }

    /// Hidden width for network fields, defaulted by dimension.
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(match self.dim {
            1 => 20,
            2 => 50,
            _ => 200,
        })
    }

    /// Fingerprint of the full config, stable across reruns.
    pub fn digest(&self) -> String {
        let body = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(body.as_bytes()))
    }
}

fn validate_stages(stages: &[(f64, f64)], t_end: f64) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::InvalidConfig("stages must not be empty".into()));
    }
    let tol = 1e-9 * t_end;
    if stages[0].0.abs() > tol {
        return Err(Error::InvalidConfig(format!(
            "stages must start at 0, got {}",
            stages[0].0
        )));
    }
    for w in stages.windows(2) {
        if (w[0].1 - w[1].0).abs() > tol {
            return Err(Error::InvalidConfig(format!(
                "stages must be contiguous; {} ends at {} but {} starts at {}",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    for &(a, b) in stages {
        if !(b > a) {
            return Err(Error::InvalidConfig(format!("stage [{a}, {b}] is empty")));
        }
    }
    let last = stages[stages.len() - 1].1;
    if (last - t_end).abs() > tol {
        return Err(Error::InvalidConfig(format!(
            "stages must end at the horizon {t_end}, got {last}"
        )));
    }
    Ok(())
}
