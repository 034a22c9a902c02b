//! Error metrics for trained velocity fields: density, field, and score
//! errors against analytic solutions or quadrature references, the cost gap
//! against a known optimum, the score-information residual, and mean/std
//! aggregation over independent runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout, FlowState, Record, Rollout};
use crate::error::{Error, Result};
use crate::oracle::{GridFunction, TerminalReference};
use crate::problems::{initial_flow_state, ProblemSpec};
use crate::tensor::Tensor;
use crate::training::evaluate_cost;
use crate::velocity::VelocityField;

/// All error metrics of one evaluation run. Metrics a problem has no
/// reference for stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean |transported density - true density| at the terminal particles.
    pub err_rho: Option<f64>,
    /// Time-and-particle mean of |f_theta - f*| along the evaluation path.
    pub err_f: Option<f64>,
    /// Mean |s - s*| at the terminal particles.
    pub err_s: Option<f64>,
    /// Mean |f_theta(0, .) - f*(0, .)| over the initial particles.
    pub err_f0: Option<f64>,
    /// Mean |f_theta(t_end, .) - f*(t_end, .)| over the terminal particles.
    pub err_fend: Option<f64>,
    /// Node-averaged Frobenius error of the quadratic coefficients
    /// (filled by callers that trained a quadratic potential).
    pub err_a: Option<f64>,
    /// Same for the linear coefficients.
    pub err_b: Option<f64>,
    /// Evaluated rollout cost minus the known optimal cost (signed).
    pub cost_gap: Option<f64>,
    /// `(t_j, mean tr H + mean |s|^2)` at every node, when the evaluation
    /// rollout transported score Jacobians. Zero for an exact density flow.
    pub info_residuals: Vec<(f64, f64)>,
}

impl ErrorReport {
    pub fn empty() -> Self {
        ErrorReport {
            err_rho: None,
            err_f: None,
            err_s: None,
            err_f0: None,
            err_fend: None,
            err_a: None,
            err_b: None,
            cost_gap: None,
            info_residuals: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Individual metrics
// ---------------------------------------------------------------------------

/// Mean |transported density - truth| over the batch. `truth` returns the
/// true density at a terminal particle, or `None` to leave that particle
/// out (a reference grid that does not cover it).
pub fn err_rho<F: Fn(&[f64]) -> Option<f64>>(state: &FlowState, truth: F) -> Result<f64> {
    let (n, d) = (state.n(), state.dim());
    let mut acc = 0.0;
    let mut kept = 0usize;
    for b in 0..n {
        let zb = &state.z.data()[b * d..(b + 1) * d];
        if let Some(rho) = truth(zb) {
            acc += (state.lt.data()[b] - rho).abs();
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::InvalidConfig(
            "density error: no particle could be evaluated against the reference".into(),
        ));
    }
    Ok(acc / kept as f64)
}

/// Mean Euclidean norm of `s - truth(z)` over the batch; `None` skips.
pub fn err_s<F: Fn(&[f64]) -> Option<Vec<f64>>>(state: &FlowState, truth: F) -> Result<f64> {
    let (n, d) = (state.n(), state.dim());
    let mut acc = 0.0;
    let mut kept = 0usize;
    for b in 0..n {
        let zb = &state.z.data()[b * d..(b + 1) * d];
        let Some(want) = truth(zb) else { continue };
        if want.len() != d {
            return Err(Error::shape(
                "score error",
                format!("reference returned {} entries for dimension {}", want.len(), d),
            ));
        }
        let sb = &state.s.data()[b * d..(b + 1) * d];
        let mut sq = 0.0;
        for i in 0..d {
            let diff = sb[i] - want[i];
            sq += diff * diff;
        }
        acc += sq.sqrt();
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::InvalidConfig(
            "score error: no particle could be evaluated against the reference".into(),
        ));
    }
    Ok(acc / kept as f64)
}

/// Mean Euclidean norm of `f_theta(t, z) - truth(t, z)` over all recorded
/// nodes and particles of the evaluation rollout.
pub fn err_f<F>(roll: &Rollout, field: &dyn VelocityField, truth: F) -> Result<f64>
where
    F: Fn(f64, &[f64]) -> Option<Vec<f64>>,
{
    let d = field.dim();
    let mut fbuf = vec![0.0; d];
    let mut acc = 0.0;
    let mut kept = 0usize;
    for (k, z) in roll.z.iter().enumerate() {
        let t = roll.times[roll.node_index[k]];
        let n = z.shape()[0];
        for b in 0..n {
            let zb = &z.data()[b * d..(b + 1) * d];
            let Some(want) = truth(t, zb) else { continue };
            if want.len() != d {
                return Err(Error::shape(
                    "field error",
                    format!("reference returned {} entries for dimension {}", want.len(), d),
                ));
            }
            field.velocity_into(t, zb, &mut fbuf)?;
            let mut sq = 0.0;
            for i in 0..d {
                let diff = fbuf[i] - want[i];
                sq += diff * diff;
            }
            acc += sq.sqrt();
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Error::InvalidConfig(
            "field error: no sample could be evaluated against the reference".into(),
        ));
    }
    Ok(acc / kept as f64)
}

/// Mean Euclidean norm of `f_theta(t, z) - truth(z)` over one batch of
/// positions (endpoint field error).
pub fn err_f_at<F>(field: &dyn VelocityField, t: f64, z: &Tensor, truth: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let d = field.dim();
    if z.shape().len() != 2 || z.shape()[1] != d {
        return Err(Error::shape("endpoint field error", format!("positions {:?}", z.shape())));
    }
    let n = z.shape()[0];
    let mut fbuf = vec![0.0; d];
    let mut acc = 0.0;
    let mut kept = 0usize;
    for b in 0..n {
        let zb = &z.data()[b * d..(b + 1) * d];
        let Some(want) = truth(zb) else { continue };
        field.velocity_into(t, zb, &mut fbuf)?;
        let mut sq = 0.0;
        for i in 0..d {
            let diff = fbuf[i] - want[i];
            sq += diff * diff;
        }
        acc += sq.sqrt();
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::InvalidConfig(
            "endpoint field error: no particle could be evaluated against the reference".into(),
        ));
    }
    Ok(acc / kept as f64)
}

/// `mean(trace H) + mean(|s|^2)` over the batch: zero in expectation when
/// the scores are those of the true density.
pub fn info_residual(trh: &Tensor, s: &Tensor) -> Result<f64> {
    if trh.shape().len() != 1 || s.shape().len() != 2 || trh.shape()[0] != s.shape()[0] {
        return Err(Error::shape(
            "information residual",
            format!("trace {:?} vs score {:?}", trh.shape(), s.shape()),
        ));
    }
    let n = trh.shape()[0];
    let mean_tr = trh.data().iter().sum::<f64>() / n as f64;
    let mean_sq = s.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    Ok(mean_tr + mean_sq)
}

/// The per-node information residuals of a rollout that transported score
/// Jacobians, as `(t, residual)` pairs.
pub fn info_residuals(roll: &Rollout) -> Result<Vec<(f64, f64)>> {
    let trh = roll.trh.as_ref().ok_or_else(|| {
        Error::InvalidConfig("information residuals need transported score Jacobians".into())
    })?;
    let mut out = Vec::with_capacity(trh.len());
    for (k, tr) in trh.iter().enumerate() {
        let t = roll.times[roll.node_index[k]];
        out.push((t, info_residual(tr, &roll.s[k])?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation orchestration
// ---------------------------------------------------------------------------

/// How an evaluation rollout is drawn. The sample stream is independent of
/// the training streams (stream 2 of the seed).
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Evaluation batch size.
    pub n_eval: usize,
    /// Euler steps over the problem horizon.
    pub n_t: usize,
    pub seed: u64,
    /// Transport score Jacobians and report information residuals
    /// (quadratic cost in the dimension; worth disabling for wide problems).
    pub with_info: bool,
}

impl EvalConfig {
    pub fn new(n_t: usize, seed: u64) -> Self {
        EvalConfig { n_eval: 10_000, n_t, seed, with_info: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_eval == 0 || self.n_t == 0 {
            return Err(Error::InvalidConfig(format!(
                "evaluation needs n_eval >= 1 and n_t >= 1, got {} and {}",
                self.n_eval, self.n_t
            )));
        }
        Ok(())
    }
}

/// Quadrature references for problems without closed-form solutions:
/// the initial velocity on the sampling grid and the terminal
/// density/score/velocity bundle.
pub struct EndpointReferences<'a> {
    pub initial_velocity: &'a GridFunction,
    pub terminal: &'a TerminalReference,
}

fn grid_vec(grid: &GridFunction, x: &[f64]) -> Option<Vec<f64>> {
    let mut out = vec![0.0; grid.output_dim()];
    match grid.eval_into(x, &mut out) {
        Ok(()) => Some(out),
        Err(_) => None,
    }
}

/// Runs one deterministic evaluation rollout of `field` on `spec` and
/// computes every metric the available references support. `optimal_cost`
/// enables the cost gap; `endpoints` enables the density/score/endpoint
/// comparisons for problems whose references come from quadrature.
/// Coefficient errors are left for the caller, which knows the trained
/// parameterization.
pub fn evaluate(
    spec: &ProblemSpec,
    field: &dyn VelocityField,
    cfg: &EvalConfig,
    optimal_cost: Option<f64>,
    endpoints: Option<&EndpointReferences<'_>>,
) -> Result<ErrorReport> {
    cfg.validate()?;
    if field.dim() != spec.dim {
        return Err(Error::shape(
            "evaluation",
            format!("field dimension {} vs problem dimension {}", field.dim(), spec.dim),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let z0 = spec.init.sample(&mut rng, cfg.n_eval);
    let mut init = initial_flow_state(spec, &z0)?;
    if !cfg.with_info {
        init.h = None;
    }
    let dt = spec.t_end / cfg.n_t as f64;
    let roll = rollout(field, 0.0, dt, cfg.n_t, &init, Record::Path)?;
    let terminal = roll.final_state();
    let t_end = spec.t_end;

    let mut report = ErrorReport::empty();

    if let Some(analytic) = spec.analytic.as_ref() {
        report.err_rho = Some(err_rho(&terminal, |x| Some(analytic.density(t_end, x)))?);
        report.err_f = Some(err_f(&roll, field, |t, x| {
            let mut out = vec![0.0; spec.dim];
            (analytic.field)(t, x, &mut out);
            Some(out)
        })?);
        report.err_s = Some(err_s(&terminal, |x| {
            let mut out = vec![0.0; spec.dim];
            (analytic.score)(t_end, x, &mut out);
            Some(out)
        })?);
    } else if let Some(refs) = endpoints {
        report.err_rho =
            Some(err_rho(&terminal, |x| refs.terminal.density.eval_scalar(x).ok())?);
        report.err_s = Some(err_s(&terminal, |x| grid_vec(&refs.terminal.score, x))?);
    }

    if let Some(refs) = endpoints {
        report.err_f0 =
            Some(err_f_at(field, 0.0, &init.z, |x| grid_vec(refs.initial_velocity, x))?);
        report.err_fend =
            Some(err_f_at(field, t_end, &terminal.z, |x| grid_vec(&refs.terminal.velocity, x))?);
    }

    if let Some(opt) = optimal_cost {
        let cost = evaluate_cost(spec, field, &init, 0.0, dt, cfg.n_t)?;
        report.cost_gap = Some(cost - opt);
    }

    if cfg.with_info && roll.trh.is_some() {
        report.info_residuals = info_residuals(&roll)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation of a slice.
pub fn mean_std(values: &[f64]) -> MetricSummary {
    let n = values.len();
    if n == 0 {
        return MetricSummary { mean: f64::NAN, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return MetricSummary { mean, std: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    MetricSummary { mean, std: var.sqrt() }
}

/// Per-metric mean/std over independent runs, with the per-run reports kept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_runs: usize,
    pub runs: Vec<ErrorReport>,
    pub err_rho: Option<MetricSummary>,
    pub err_f: Option<MetricSummary>,
    pub err_s: Option<MetricSummary>,
    pub err_f0: Option<MetricSummary>,
    pub err_fend: Option<MetricSummary>,
    pub err_a: Option<MetricSummary>,
    pub err_b: Option<MetricSummary>,
    pub cost_gap: Option<MetricSummary>,
    /// Summary of the terminal-time information residual.
    pub info_terminal: Option<MetricSummary>,
}

fn summarize<F: Fn(&ErrorReport) -> Option<f64>>(
    runs: &[ErrorReport],
    get: F,
) -> Option<MetricSummary> {
    let values: Vec<f64> = runs.iter().filter_map(&get).collect();
    if values.is_empty() {
        None
    } else {
        Some(mean_std(&values))
    }
}

/// Aggregates per-run reports into mean/std summaries per metric. Metrics
/// absent from every run stay `None`.
pub fn aggregate(runs: Vec<ErrorReport>) -> AggregateReport {
    let n_runs = runs.len();
    AggregateReport {
        err_rho: summarize(&runs, |r| r.err_rho),
        err_f: summarize(&runs, |r| r.err_f),
        err_s: summarize(&runs, |r| r.err_s),
        err_f0: summarize(&runs, |r| r.err_f0),
        err_fend: summarize(&runs, |r| r.err_fend),
        err_a: summarize(&runs, |r| r.err_a),
        err_b: summarize(&runs, |r| r.err_b),
        cost_gap: summarize(&runs, |r| r.cost_gap),
        info_terminal: summarize(&runs, |r| r.info_residuals.last().map(|&(_, v)| v)),
        n_runs,
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{reference_initial_velocity, reference_terminal, QuadratureGrid};
    use crate::problems::{make_double_well_default, make_rwpo};
    use crate::velocity::{LinearTimeVarying, MlpField};

    fn two_particle_state() -> FlowState {
        FlowState::new(
            Tensor::matrix(2, 1, vec![-2.0, 2.0]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
            Tensor::vector(vec![0.3, 0.3]),
            Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap(),
            Some(Tensor::new(vec![2, 1], vec![-0.25, -0.25]).unwrap()),
        )
        .unwrap()
    }

    #[test]
    fn density_error_is_exact_on_hand_values() {
        let state = two_particle_state();
        // Exact match -> 0.
        assert_eq!(err_rho(&state, |_| Some(0.3)).unwrap(), 0.0);
        // Transported 0.3 vs true 0.25 -> 0.05.
        let e = err_rho(&state, |_| Some(0.25)).unwrap();
        assert!((e - 0.05).abs() < 1e-15);
        // A skipped particle drops out of the average.
        let e = err_rho(&state, |x| if x[0] < 0.0 { None } else { Some(0.2) }).unwrap();
        assert!((e - 0.1).abs() < 1e-15);
        // All skipped -> error.
        assert!(err_rho(&state, |_| None).is_err());
    }

    #[test]
    fn score_error_is_exact_on_hand_values() {
        let state = two_particle_state();
        assert_eq!(err_s(&state, |x| Some(vec![0.5 * -x[0].signum()])).unwrap(), 0.0);
        // Constant offset of norm 0.2.
        let e = err_s(&state, |x| Some(vec![0.5 * -x[0].signum() + 0.2])).unwrap();
        assert!((e - 0.2).abs() < 1e-12);
    }

    #[test]
    fn field_error_calibrates_against_constant_offset() {
        let spec = make_rwpo(2, 1.0).unwrap();
        let field = LinearTimeVarying::new(
            2,
            |t| {
                let a = -1.0 / (2.0 * (2.0 - t));
                Tensor::matrix(2, 2, vec![a, 0.0, 0.0, a]).unwrap()
            },
            |_| Tensor::vector(vec![0.0, 0.0]),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = spec.init.sample(&mut rng, 50);
        let init = initial_flow_state(&spec, &z0).unwrap();
        let roll = rollout(&field, 0.0, 0.1, 10, &init, Record::Path).unwrap();

        // Truth = the field itself -> 0 up to evaluation roundoff.
        let exact = err_f(&roll, &field, |t, x| {
            let mut out = vec![0.0; 2];
            field.velocity_into(t, x, &mut out).unwrap();
            Some(out)
        })
        .unwrap();
        assert!(exact == 0.0, "self-comparison should be exact, got {exact}");

        // Truth = field + delta with |delta| = 0.1 -> 0.1.
        let offset = err_f(&roll, &field, |t, x| {
            let mut out = vec![0.0; 2];
            field.velocity_into(t, x, &mut out).unwrap();
            out[0] += 0.06;
            out[1] += 0.08;
            Some(out)
        })
        .unwrap();
        assert!((offset - 0.1).abs() < 1e-12, "got {offset}");

        // Endpoint variant calibrates the same way.
        let e0 = err_f_at(&field, 0.0, &init.z, |x| {
            let mut out = vec![0.0; 2];
            field.velocity_into(0.0, x, &mut out).unwrap();
            out[1] += 0.1;
            Some(out)
        })
        .unwrap();
        assert!((e0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn information_residual_vanishes_for_exact_gaussian_scores() {
        // Two particles at +-2 under N(0, 4): s = -z/4, tr H = -1/4, and
        // the empirical second moment is exactly 4, so the residual is 0.
        let s = Tensor::matrix(2, 1, vec![0.5, -0.5]).unwrap();
        let trh = Tensor::vector(vec![-0.25, -0.25]);
        assert_eq!(info_residual(&trh, &s).unwrap(), 0.0);

        // Standard normal at +-1: s = -z, tr H = -1: -1 + 1 = 0.
        let s = Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap();
        let trh = Tensor::vector(vec![-1.0, -1.0]);
        assert_eq!(info_residual(&trh, &s).unwrap(), 0.0);

        let trh_bad = Tensor::vector(vec![-1.0]);
        assert!(info_residual(&trh_bad, &s).is_err());
    }

    #[test]
    fn evaluation_of_the_exact_field_reports_small_errors() {
        // The optimal linear steering field evaluated against its own
        // analytic solution: the field error is pure roundoff, the density
        // and score errors are first-order transport error, the cost gap is
        // within the Monte-Carlo + discretization budget, and the
        // information residual stays near zero at every node.
        let spec = make_rwpo(1, 1.0).unwrap();
        let field = LinearTimeVarying::new(
            1,
            |t| Tensor::matrix(1, 1, vec![-1.0 / (2.0 * (2.0 - t))]).unwrap(),
            |_| Tensor::vector(vec![0.0]),
        );
        let cfg = EvalConfig { n_eval: 4000, n_t: 100, seed: 5, with_info: true };
        let opt = spec.analytic.as_ref().unwrap().optimal_cost.unwrap();
        let report = evaluate(&spec, &field, &cfg, Some(opt), None).unwrap();
        assert!(report.err_f.unwrap() < 1e-13, "err_f {:?}", report.err_f);
        assert!(report.err_rho.unwrap() < 1e-2, "err_rho {:?}", report.err_rho);
        assert!(report.err_s.unwrap() < 1e-2, "err_s {:?}", report.err_s);
        assert!(report.cost_gap.unwrap().abs() < 0.06, "cost_gap {:?}", report.cost_gap);
        assert_eq!(report.info_residuals.len(), 101);
        let max_info =
            report.info_residuals.iter().map(|&(_, v)| v.abs()).fold(0.0, f64::max);
        assert!(max_info < 0.3, "information residual drifted to {max_info}");
        assert!(report.err_f0.is_none() && report.err_a.is_none());

        // Same seed, same report (bitwise).
        let again = evaluate(&spec, &field, &cfg, Some(opt), None).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn evaluation_uses_quadrature_references_when_no_analytic_solution() {
        let spec = make_double_well_default(1).unwrap();
        let mut grid = QuadratureGrid::default_for_dim(1).unwrap();
        let terminal = reference_terminal(&spec, &mut grid).unwrap();
        let initial_velocity = reference_initial_velocity(&spec, &mut grid).unwrap();
        let refs = EndpointReferences { initial_velocity: &initial_velocity, terminal: &terminal };
        let field = MlpField::zeros(1, 4);
        let cfg = EvalConfig { n_eval: 500, n_t: 50, seed: 9, with_info: false };
        let report = evaluate(&spec, &field, &cfg, None, Some(&refs)).unwrap();
        // A zero field moves nothing, so every reference comparison is
        // present, finite, and nonzero.
        for (name, v) in [
            ("err_rho", report.err_rho),
            ("err_s", report.err_s),
            ("err_f0", report.err_f0),
            ("err_fend", report.err_fend),
        ] {
            let v = v.unwrap_or_else(|| panic!("{name} missing"));
            assert!(v.is_finite() && v > 0.0, "{name} = {v}");
        }
        assert!(report.err_f.is_none(), "no path reference exists for this problem");
        assert!(report.cost_gap.is_none());
        assert!(report.info_residuals.is_empty());
    }

    #[test]
    fn aggregation_reports_mean_and_sample_std() {
        let s = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]).std, 0.0);

        let mut a = ErrorReport::empty();
        a.err_rho = Some(0.1);
        a.cost_gap = Some(0.02);
        a.info_residuals = vec![(0.0, 0.0), (1.0, 0.01)];
        let mut b = ErrorReport::empty();
        b.err_rho = Some(0.3);
        b.cost_gap = Some(-0.02);
        b.info_residuals = vec![(0.0, 0.0), (1.0, 0.03)];
        let agg = aggregate(vec![a, b]);
        assert_eq!(agg.n_runs, 2);
        let rho = agg.err_rho.unwrap();
        assert!((rho.mean - 0.2).abs() < 1e-15);
        assert!((rho.std - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(agg.cost_gap.unwrap().mean, 0.0);
        let info = agg.info_terminal.unwrap();
        assert!((info.mean - 0.02).abs() < 1e-15);
        assert!(agg.err_f.is_none());
        assert_eq!(agg.runs.len(), 2);
    }
}
