//! Catalog of mean-field control problem instances.
//!
//! A [`ProblemSpec`] bundles everything a solver run needs: the diffusion
//! coefficient `gamma`, the horizon, the three cost components (running,
//! mean-field, terminal), an optional reference drift for drift-matching
//! problems, a Gaussian initial distribution, and — where one exists — the
//! closed-form optimal solution used by error metrics and cost oracles.
//!
//! Cost components are small enums rather than closures so that both the
//! plain evaluators here and the taped training losses can match on them
//! and assemble exactly the same arithmetic.

use crate::dynamics::FlowState;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

/// Running cost `L(t, x, v)` on the control velocity `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunningCost {
    /// `L = |v|^2 / 2`.
    KineticEnergy,
    /// `L = |v - b(t, x)|^2 / 2` against the problem drift.
    DriftMatching,
}

/// Mean-field coupling `F`. The density enters either as `rho` or as
/// `log rho`; [`MeanFieldCost::uses_log_density`] says which.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanFieldCost {
    None,
    /// `F = |x|^2 / 2 + beta * log rho` (consumes the log-density).
    QuadraticConfinementEntropy { beta: f64 },
}

impl MeanFieldCost {
    /// Whether `F` consumes `log rho` (true) or `rho` itself (false).
    pub fn uses_log_density(&self) -> bool {
        matches!(self, MeanFieldCost::QuadraticConfinementEntropy { .. })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, MeanFieldCost::None)
    }

    /// `F(t, x, rho-input)`; `rho_input` is `log rho` when
    /// [`Self::uses_log_density`] and `rho` otherwise.
    pub fn value(&self, x: &[f64], rho_input: f64) -> f64 {
        match self {
            MeanFieldCost::None => 0.0,
            MeanFieldCost::QuadraticConfinementEntropy { beta } => {
                0.5 * sum_sq(x) + beta * rho_input
            }
        }
    }
}

/// Terminal cost `G(x, rho)`. No catalog entry reads the density argument;
/// it stays in the signature so density-coupled terminal costs remain a
/// local extension.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCost {
    None,
    /// `G = w |x|^2`.
    Quadratic { weight: f64 },
    /// `G = c |x - c1|^2 |x - c2|^2`.
    DoubleWell { c: f64, c1: Vec<f64>, c2: Vec<f64> },
}

impl TerminalCost {
    pub fn is_zero(&self) -> bool {
        matches!(self, TerminalCost::None)
    }

    pub fn value(&self, x: &[f64], _rho: f64) -> f64 {
        match self {
            TerminalCost::None => 0.0,
            TerminalCost::Quadratic { weight } => weight * sum_sq(x),
            TerminalCost::DoubleWell { c, c1, c2 } => {
                let mut q1 = 0.0;
                let mut q2 = 0.0;
                for i in 0..x.len() {
                    q1 += (x[i] - c1[i]) * (x[i] - c1[i]);
                    q2 += (x[i] - c2[i]) * (x[i] - c2[i]);
                }
                c * q1 * q2
            }
        }
    }

    /// `grad G(x)`, needed by the kernel-formula reference (terminal velocity
    /// `f_T = -grad G - gamma * score_T`).
    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            TerminalCost::None => out.fill(0.0),
            TerminalCost::Quadratic { weight } => {
                for i in 0..x.len() {
                    out[i] = 2.0 * weight * x[i];
                }
            }
            TerminalCost::DoubleWell { c, c1, c2 } => {
                let mut q1 = 0.0;
                let mut q2 = 0.0;
                for i in 0..x.len() {
                    q1 += (x[i] - c1[i]) * (x[i] - c1[i]);
                    q2 += (x[i] - c2[i]) * (x[i] - c2[i]);
                }
                for i in 0..x.len() {
                    out[i] = c * (2.0 * (x[i] - c1[i]) * q2 + q1 * 2.0 * (x[i] - c2[i]));
                }
            }
        }
    }
}

/// Reference drift `b(t, x)` for drift-matching problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drift {
    /// `b = -a x`.
    Linear { a: f64 },
    /// `b = -grad V` for the two-well potential [`double_moon_potential`].
    DoubleMoon,
}

impl Drift {
    pub fn eval_into(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Linear { a } => {
                for i in 0..x.len() {
                    out[i] = -a * x[i];
                }
            }
            Drift::DoubleMoon => double_moon_drift_into(x, out),
        }
    }

    /// `div b(t, x)`; enters the drift-matching HJB residual as `-gamma div b`.
    pub fn divergence(&self, _t: f64, x: &[f64]) -> f64 {
        match self {
            Drift::Linear { a } => -a * x.len() as f64,
            Drift::DoubleMoon => -double_moon_laplacian(x),
        }
    }
}

/// Two-well potential `V(x) = 2(|x| - 3)^2
/// - 2 log[exp(-2(x_1 - 3)^2) + exp(-2(x_1 + 3)^2)]`: a ring of radius 3
/// carved into two wells around `(±3, 0)`.
pub fn double_moon_potential(x: &[f64]) -> f64 {
    let r = sum_sq(x).sqrt();
    let (lse, _, _) = moon_log_sum_exp(x[0]);
    2.0 * (r - 3.0) * (r - 3.0) - 2.0 * lse
}

/// `log(exp(a+) + exp(a-))` for the two moon exponents at `x1`, max-shifted
/// so neither term underflows, plus the normalized weights `(p+, p-)`.
fn moon_log_sum_exp(x1: f64) -> (f64, f64, f64) {
    let a_pos = -2.0 * (x1 - 3.0) * (x1 - 3.0);
    let a_neg = -2.0 * (x1 + 3.0) * (x1 + 3.0);
    let m = a_pos.max(a_neg);
    let e_pos = (a_pos - m).exp();
    let e_neg = (a_neg - m).exp();
    let sum = e_pos + e_neg;
    (m + sum.ln(), e_pos / sum, e_neg / sum)
}

/// `-grad V` for [`double_moon_potential`], in closed form. The radial term
/// uses `|x|` regularized away from zero so the drift stays finite at the
/// origin (where the true gradient is a subdifferential anyway).
pub fn double_moon_drift_into(x: &[f64], out: &mut [f64]) {
    let r = (sum_sq(x) + 1e-300).sqrt();
    let radial = 4.0 * (r - 3.0) / r;
    let (_, p_pos, p_neg) = moon_log_sum_exp(x[0]);
    for i in 0..x.len() {
        out[i] = -radial * x[i];
    }
    out[0] -= 8.0 * ((x[0] - 3.0) * p_pos + (x[0] + 3.0) * p_neg);
}

/// `Delta V` for [`double_moon_potential`] (so `div b = -Delta V`).
fn double_moon_laplacian(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let r = (sum_sq(x) + 1e-300).sqrt();
    let (_, p_pos, p_neg) = moon_log_sum_exp(x[0]);
    4.0 * d - 12.0 * (d - 1.0) / r + 8.0 - 1152.0 * p_pos * p_neg
}

/// Gaussian initial distribution `N(mean, cov)` with the exact quantities a
/// flow rollout starts from: sampler, log-density, score, and score Hessian.
#[derive(Debug, Clone)]
pub struct GaussianInit {
    mean: Tensor,
    cov: Tensor,
    /// Lower Cholesky factor of `cov`.
    chol: Tensor,
    /// `cov^{-1}`.
    inv: Tensor,
    /// `log((2 pi)^d det cov)`.
    log_norm: f64,
}

impl GaussianInit {
    pub fn new(mean: Tensor, cov: Tensor) -> Result<Self> {
        let d = mean.numel();
        if mean.shape() != [d] || cov.shape() != [d, d] {
            return Err(Error::shape(
                "gaussian init",
                format!("mean {:?} vs cov {:?}", mean.shape(), cov.shape()),
            ));
        }
        let mut scale = 1.0_f64;
        for i in 0..d {
            scale = scale.max(cov.at(i, i).abs());
        }
        for i in 0..d {
            for j in 0..i {
                if (cov.at(i, j) - cov.at(j, i)).abs() > 1e-12 * scale {
                    return Err(Error::InvalidProblem(format!(
                        "initial covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = tensor::cholesky(&cov).map_err(|_| Error::SingularMatrix {
            context: "initial covariance is not positive definite",
        })?;
        let inv = tensor::spd_inverse(&cov)?;
        let mut log_det = 0.0;
        for i in 0..d {
            log_det += 2.0 * chol.at(i, i).ln();
        }
        let log_norm = d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det;
        Ok(GaussianInit { mean, cov, chol, inv, log_norm })
    }

    /// Isotropic `N(mean_value * 1, variance * I)`.
    pub fn isotropic(d: usize, mean_value: f64, variance: f64) -> Result<Self> {
        let mut cov = Tensor::zeros(&[d, d]);
        for i in 0..d {
            *cov.at_mut(i, i) = variance;
        }
        GaussianInit::new(Tensor::vector(vec![mean_value; d]), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    /// Draws `n` samples as an `[n, d]` matrix: `z = mean + L xi` with `xi`
    /// standard normal, drawn row-major so the stream layout is stable.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Tensor {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        let mut xi = vec![0.0; d];
        for row in 0..n {
            for x in xi.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            for i in 0..d {
                let mut acc = self.mean.data()[i];
                for j in 0..=i {
                    acc += self.chol.at(i, j) * xi[j];
                }
                out[row * d + i] = acc;
            }
        }
        Tensor::new(vec![n, d], out).expect("sample shape is consistent")
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut quad = 0.0;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.inv.at(i, j) * (x[j] - self.mean.data()[j]);
            }
            quad += (x[i] - self.mean.data()[i]) * acc;
        }
        -0.5 * (quad + self.log_norm)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Score `grad log rho_0(x) = -cov^{-1}(x - mean)`.
    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.inv.at(i, j) * (x[j] - self.mean.data()[j]);
            }
            out[i] = -acc;
        }
    }

    /// Score Hessian `hess log rho_0 = -cov^{-1}` (constant in `x`).
    pub fn score_hessian(&self) -> Tensor {
        let mut h = self.inv.clone();
        h.scale_in_place(-1.0);
        h
    }
}

/// Time-dependent Gaussian reference: `rho*(t) = N(mean(t), cov(t))`.
pub struct GaussianAnalytic {
    pub mean: Box<dyn Fn(f64) -> Tensor + Send + Sync>,
    pub cov: Box<dyn Fn(f64) -> Tensor + Send + Sync>,
}

/// Closed-form optimal solution attached to a [`ProblemSpec`].
///
/// `field` is the transport field `f*` of the continuity equation, `score`
/// is `grad log rho*`, and the optimal control velocity is their
/// composition `v* = f* + gamma s*`. `psi_a`/`psi_b` give the target
/// coefficients for the quadratic-potential parameterization
/// (`grad psi*(t, x) = A(t) x + B(t)`), where that parameterization applies.
pub struct AnalyticSolution {
    pub log_density: Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    pub field: Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
    pub score: Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
    pub gaussian: Option<GaussianAnalytic>,
    pub psi_a: Option<Box<dyn Fn(f64) -> Tensor + Send + Sync>>,
    pub psi_b: Option<Box<dyn Fn(f64) -> Tensor + Send + Sync>>,
    /// Optimal objective value where it has a closed form.
    pub optimal_cost: Option<f64>,
}

impl AnalyticSolution {
    pub fn density(&self, t: f64, x: &[f64]) -> f64 {
        (self.log_density)(t, x).exp()
    }
}

/// One mean-field control problem instance. Immutable once built; shared
/// read-only across particles and threads.
pub struct ProblemSpec {
    /// Config-facing identifier (`rwpo`, `ou_flow_matching`, ...).
    pub name: &'static str,
    pub dim: usize,
    /// Diffusion coefficient `gamma > 0`.
    pub gamma: f64,
    /// Horizon `t_end > 0`.
    pub t_end: f64,
    /// Training-stage partition of `[0, t_end]`; a single full-span stage
    /// except for the multi-stage double moon.
    pub stages: Vec<(f64, f64)>,
    pub running_cost: RunningCost,
    pub mf_cost: MeanFieldCost,
    pub terminal_cost: TerminalCost,
    pub drift: Option<Drift>,
    pub init: GaussianInit,
    pub analytic: Option<AnalyticSolution>,
}

impl ProblemSpec {
    /// `L(t, x, v)` with the problem's drift resolved for drift matching.
    pub fn running_cost_value(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        match self.running_cost {
            RunningCost::KineticEnergy => 0.5 * sum_sq(v),
            RunningCost::DriftMatching => {
                let drift = self.drift.as_ref().expect("drift-matching spec carries a drift");
                let mut b = vec![0.0; x.len()];
                drift.eval_into(t, x, &mut b);
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += (v[i] - b[i]) * (v[i] - b[i]);
                }
                0.5 * acc
            }
        }
    }

    /// `F(t, x, rho-input)`; see [`MeanFieldCost::value`].
    pub fn mf_cost_value(&self, x: &[f64], rho_input: f64) -> f64 {
        self.mf_cost.value(x, rho_input)
    }

    /// `G(x, rho)`.
    pub fn terminal_cost_value(&self, x: &[f64], rho: f64) -> f64 {
        self.terminal_cost.value(x, rho)
    }

    pub fn drift_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.drift {
            Some(b) => {
                b.eval_into(t, x, out);
                Ok(())
            }
            None => Err(Error::InvalidProblem(format!("problem {} has no drift", self.name))),
        }
    }
}

/// Exact Gaussian flow state at `t = 0` for a batch `z0` (`[n, d]`):
/// `l = log rho_0(z)`, `ltilde = rho_0(z)`, `s = -cov^{-1}(z - mean)`, and
/// `H = -cov^{-1}` for every particle. Callers that do not transport the
/// score Hessian drop the `h` component.
pub fn initial_flow_state(spec: &ProblemSpec, z0: &Tensor) -> Result<FlowState> {
    let d = spec.dim;
    if z0.shape().len() != 2 || z0.shape()[1] != d {
        return Err(Error::shape(
            "initial flow state",
            format!("z0 {:?} for dim {}", z0.shape(), d),
        ));
    }
    let n = z0.shape()[0];
    let mut l = vec![0.0; n];
    let mut lt = vec![0.0; n];
    let mut s = vec![0.0; n * d];
    for b in 0..n {
        let x = &z0.data()[b * d..(b + 1) * d];
        l[b] = spec.init.log_density(x);
        lt[b] = l[b].exp();
        spec.init.score_into(x, &mut s[b * d..(b + 1) * d]);
    }
    let neg_inv = spec.init.score_hessian();
    let mut h = vec![0.0; n * d * d];
    for b in 0..n {
        h[b * d * d..(b + 1) * d * d].copy_from_slice(neg_inv.data());
    }
    FlowState::new(
        z0.clone(),
        Tensor::vector(l),
        Tensor::vector(lt),
        Tensor::new(vec![n, d], s)?,
        Some(Tensor::new(vec![n * d, d], h)?),
    )
}

fn sum_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn isotropic_log_density(x: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * (sum_sq(x) / variance + d * (2.0 * std::f64::consts::PI * variance).ln())
}

/// Benamou-Brenier transport toward a quadratic terminal cost with entropic
/// regularization: `L = |v|^2/2`, `G = |x|^2/2`, `rho_0 = N(0, 4 gamma I)`
/// over `[0, 1]`. The optimum stays Gaussian: `rho*(t) = N(0, 2 gamma (2-t) I)`
/// with transport field `f* = -x / (2(2-t))`.
pub fn make_rwpo(d: usize, gamma: f64) -> Result<ProblemSpec> {
    if d == 0 || gamma <= 0.0 {
        return Err(Error::InvalidProblem(format!("rwpo needs d >= 1, gamma > 0; got {d}, {gamma}")));
    }
    let init = GaussianInit::isotropic(d, 0.0, 4.0 * gamma)?;
    let analytic = AnalyticSolution {
        log_density: Box::new(move |t, x| isotropic_log_density(x, 2.0 * gamma * (2.0 - t))),
        field: Box::new(move |t, x, out| {
            let c = -1.0 / (2.0 * (2.0 - t));
            for i in 0..x.len() {
                out[i] = c * x[i];
            }
        }),
        score: Box::new(move |t, x, out| {
            let c = -1.0 / (2.0 * gamma * (2.0 - t));
            for i in 0..x.len() {
                out[i] = c * x[i];
            }
        }),
        gaussian: Some(GaussianAnalytic {
            mean: Box::new(move |_t| Tensor::vector(vec![0.0; d])),
            cov: Box::new(move |t| {
                let mut cov = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    *cov.at_mut(i, i) = 2.0 * gamma * (2.0 - t);
                }
                cov
            }),
        }),
        psi_a: Some(Box::new(move |t| {
            let mut a = Tensor::zeros(&[d, d]);
            for i in 0..d {
                *a.at_mut(i, i) = -1.0 / (2.0 * (2.0 - t));
            }
            a
        })),
        psi_b: Some(Box::new(move |_t| Tensor::vector(vec![0.0; d]))),
        optimal_cost: Some(gamma * d as f64 * (1.0 + std::f64::consts::LN_2)),
    };
    Ok(ProblemSpec {
        name: "rwpo",
        dim: d,
        gamma,
        t_end: 1.0,
        stages: vec![(0.0, 1.0)],
        running_cost: RunningCost::KineticEnergy,
        mf_cost: MeanFieldCost::None,
        terminal_cost: TerminalCost::Quadratic { weight: 0.5 },
        drift: None,
        init,
        analytic: Some(analytic),
    })
}

/// Drift matching for an Ornstein-Uhlenbeck process `dX = -aX dt
/// + sqrt(2 gamma) dW`: `L = |v + a x|^2 / 2`, no mean-field or terminal
/// cost, horizon 1. The optimal value is 0 (the control reproduces the
/// drift exactly) and the marginals stay Gaussian with
/// `mean(t) = e^{-at} mu_0` and
/// `cov(t) = (gamma/a) I + (cov_0 - (gamma/a) I) e^{-2at}`.
pub fn make_ou_flow_matching(
    d: usize,
    gamma: f64,
    a: f64,
    mu0: Tensor,
    sigma0: Tensor,
) -> Result<ProblemSpec> {
    if d == 0 || gamma <= 0.0 || a <= 0.0 {
        return Err(Error::InvalidProblem(format!(
            "ou flow matching needs d >= 1, gamma > 0, a > 0; got {d}, {gamma}, {a}"
        )));
    }
    let init = GaussianInit::new(mu0.clone(), sigma0.clone())?;
    let mean_at = move |t: f64, mu0: &Tensor| {
        let mut m = mu0.clone();
        m.scale_in_place((-a * t).exp());
        m
    };
    let cov_at = move |t: f64, sigma0: &Tensor| {
        let decay = (-2.0 * a * t).exp();
        let stat = gamma / a;
        let mut cov = sigma0.clone();
        for i in 0..d {
            for j in 0..d {
                let s0 = sigma0.at(i, j);
                let limit = if i == j { stat } else { 0.0 };
                *cov.at_mut(i, j) = limit + (s0 - limit) * decay;
            }
        }
        cov
    };
    let (mu_f, sig_f) = (mu0.clone(), sigma0.clone());
    let log_density = Box::new(move |t: f64, x: &[f64]| {
        let mean = mean_at(t, &mu_f);
        let cov = cov_at(t, &sig_f);
        gaussian_log_density(x, &mean, &cov)
    });
    let (mu_s, sig_s) = (mu0.clone(), sigma0.clone());
    let score = Box::new(move |t: f64, x: &[f64], out: &mut [f64]| {
        let mean = mean_at(t, &mu_s);
        let cov = cov_at(t, &sig_s);
        gaussian_score_into(x, &mean, &cov, out);
    });
    // f* = b + gamma cov(t)^{-1} (x - mean(t)) = b - gamma s*.
    let (mu_v, sig_v) = (mu0.clone(), sigma0.clone());
    let field = Box::new(move |t: f64, x: &[f64], out: &mut [f64]| {
        let mean = mean_at(t, &mu_v);
        let cov = cov_at(t, &sig_v);
        gaussian_score_into(x, &mean, &cov, out);
        for i in 0..x.len() {
            out[i] = -a * x[i] - gamma * out[i];
        }
    });
    let (mu_g, sig_g) = (mu0.clone(), sigma0.clone());
    let (mu_g2, sig_g2) = (mu0.clone(), sigma0.clone());
    let gaussian = GaussianAnalytic {
        mean: Box::new(move |t| mean_at(t, &mu_g)),
        cov: Box::new(move |t| cov_at(t, &sig_g)),
    };
    // grad psi* = f* - b = gamma cov^{-1} (x - mean), so A = gamma cov^{-1}
    // and B = -gamma cov^{-1} mean.
    let sig_a = sigma0.clone();
    let psi_a = Box::new(move |t: f64| {
        let cov = cov_at(t, &sig_a);
        let mut inv = tensor::spd_inverse(&cov).expect("analytic OU covariance is SPD");
        inv.scale_in_place(gamma);
        inv
    });
    let psi_b = Box::new(move |t: f64| {
        let mean = mean_at(t, &mu_g2);
        let cov = cov_at(t, &sig_g2);
        let inv = tensor::spd_inverse(&cov).expect("analytic OU covariance is SPD");
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += inv.at(i, j) * mean.data()[j];
            }
            out[i] = -gamma * acc;
        }
        Tensor::vector(out)
    });
    Ok(ProblemSpec {
        name: "ou_flow_matching",
        dim: d,
        gamma,
        t_end: 1.0,
        stages: vec![(0.0, 1.0)],
        running_cost: RunningCost::DriftMatching,
        mf_cost: MeanFieldCost::None,
        terminal_cost: TerminalCost::None,
        drift: Some(Drift::Linear { a }),
        init,
        analytic: Some(AnalyticSolution {
            log_density,
            field,
            score,
            gaussian: Some(gaussian),
            psi_a: Some(psi_a),
            psi_b: Some(psi_b),
            optimal_cost: Some(0.0),
        }),
    })
}

/// [`make_ou_flow_matching`] at the reference setting: `a = 1`,
/// `mu_0 = (1, ..., 1)`, `cov_0 = 4 I`.
pub fn make_ou_flow_matching_default(d: usize, gamma: f64) -> Result<ProblemSpec> {
    let mut sigma0 = Tensor::zeros(&[d, d]);
    for i in 0..d {
        *sigma0.at_mut(i, i) = 4.0;
    }
    make_ou_flow_matching(d, gamma, 1.0, Tensor::vector(vec![1.0; d]), sigma0)
}

/// Two-dimensional drift matching toward the double-moon potential:
/// `b = -grad V` with `V` from [`double_moon_potential`], `rho_0 = N(0, I_2)`
/// (the source states the scalar `N(0, 1)`; this reads it as the standard
/// 2-d Gaussian), horizon 0.4 trained in two stages `[0, 0.2]`, `[0.2, 0.4]`.
/// No closed-form solution.
pub fn make_double_moon(gamma: f64) -> Result<ProblemSpec> {
    if gamma <= 0.0 {
        return Err(Error::InvalidProblem(format!("double moon needs gamma > 0; got {gamma}")));
    }
    Ok(ProblemSpec {
        name: "double_moon",
        dim: 2,
        gamma,
        t_end: 0.4,
        stages: vec![(0.0, 0.2), (0.2, 0.4)],
        running_cost: RunningCost::DriftMatching,
        mf_cost: MeanFieldCost::None,
        terminal_cost: TerminalCost::None,
        drift: Some(Drift::DoubleMoon),
        init: GaussianInit::isotropic(2, 0.0, 1.0)?,
        analytic: None,
    })
}

/// Linear-quadratic control with an entropy penalty:
/// `L = |v|^2/2`, `F = |x|^2/2 + beta log rho`, `G = (alpha/2)|x|^2` with
/// `alpha = (sqrt(beta^2 + 4) - beta)/2`, `gamma = 1`, horizon 1, and
/// `rho_0 = N(0, I/alpha)`. The optimum is stationary: `rho*(t) = rho_0`,
/// `f* = 0`, `s* = -alpha x`.
pub fn make_lq_entropy(d: usize, beta: f64) -> Result<ProblemSpec> {
    if d == 0 || beta < 0.0 {
        return Err(Error::InvalidProblem(format!(
            "lq entropy needs d >= 1, beta >= 0; got {d}, {beta}"
        )));
    }
    let alpha = ((beta * beta + 4.0).sqrt() - beta) / 2.0;
    let init = GaussianInit::isotropic(d, 0.0, 1.0 / alpha)?;
    let df = d as f64;
    // J* = E[|v*|^2/2 + |x|^2/2 + beta log rho*] + (alpha/2) E|x|^2 with all
    // expectations under the stationary N(0, I/alpha).
    let e_log_rho = -0.5 * df * (1.0 + (2.0 * std::f64::consts::PI / alpha).ln());
    let optimal_cost =
        0.5 * alpha * df + 0.5 * df / alpha + beta * e_log_rho + 0.5 * df;
    let analytic = AnalyticSolution {
        log_density: Box::new(move |_t, x| isotropic_log_density(x, 1.0 / alpha)),
        field: Box::new(move |_t, _x, out| out.fill(0.0)),
        score: Box::new(move |_t, x, out| {
            for i in 0..x.len() {
                out[i] = -alpha * x[i];
            }
        }),
        gaussian: Some(GaussianAnalytic {
            mean: Box::new(move |_t| Tensor::vector(vec![0.0; d])),
            cov: Box::new(move |_t| {
                let mut cov = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    *cov.at_mut(i, i) = 1.0 / alpha;
                }
                cov
            }),
        }),
        psi_a: Some(Box::new(move |_t| Tensor::zeros(&[d, d]))),
        psi_b: Some(Box::new(move |_t| Tensor::vector(vec![0.0; d]))),
        optimal_cost: Some(optimal_cost),
    };
    Ok(ProblemSpec {
        name: "lq_entropy",
        dim: d,
        gamma: 1.0,
        t_end: 1.0,
        stages: vec![(0.0, 1.0)],
        running_cost: RunningCost::KineticEnergy,
        mf_cost: MeanFieldCost::QuadraticConfinementEntropy { beta },
        terminal_cost: TerminalCost::Quadratic { weight: 0.5 * alpha },
        drift: None,
        init,
        analytic: Some(analytic),
    })
}

/// `alpha(beta)` of the LQ-entropy problem, exposed for tests and docs.
pub fn lq_entropy_alpha(beta: f64) -> f64 {
    ((beta * beta + 4.0).sqrt() - beta) / 2.0
}

/// Kinetic transport into a double-well terminal cost
/// `G = c |x - c1|^2 |x - c2|^2`, `rho_0 = N(0, I)`, horizon 1. No
/// closed-form solution; references come from the quadrature oracle.
pub fn make_double_well(
    d: usize,
    gamma: f64,
    c: f64,
    c1: Vec<f64>,
    c2: Vec<f64>,
) -> Result<ProblemSpec> {
    // `c = 0` collapses the wells to a flat potential; the quadrature
    // references use that degenerate case as a Gaussian self-test.
    if d == 0 || gamma <= 0.0 || c < 0.0 {
        return Err(Error::InvalidProblem(format!(
            "double well needs d >= 1, gamma > 0, c >= 0; got {d}, {gamma}, {c}"
        )));
    }
    if c1.len() != d || c2.len() != d {
        return Err(Error::InvalidProblem(format!(
            "double well centers must have length {d}; got {} and {}",
            c1.len(),
            c2.len()
        )));
    }
    Ok(ProblemSpec {
        name: "double_well",
        dim: d,
        gamma,
        t_end: 1.0,
        stages: vec![(0.0, 1.0)],
        running_cost: RunningCost::KineticEnergy,
        mf_cost: MeanFieldCost::None,
        terminal_cost: TerminalCost::DoubleWell { c, c1, c2 },
        drift: None,
        init: GaussianInit::isotropic(d, 0.0, 1.0)?,
        analytic: None,
    })
}

/// [`make_double_well`] at the reference setting: `c = 1/4`, `c1 = -1`,
/// `c2 = +1`, `gamma = 0.1`.
pub fn make_double_well_default(d: usize) -> Result<ProblemSpec> {
    make_double_well(d, 0.1, 0.25, vec![-1.0; d], vec![1.0; d])
}

fn gaussian_log_density(x: &[f64], mean: &Tensor, cov: &Tensor) -> f64 {
    let d = x.len();
    let chol = tensor::cholesky(cov).expect("analytic covariance is SPD");
    let mut log_det = 0.0;
    for i in 0..d {
        log_det += 2.0 * chol.at(i, i).ln();
    }
    // Solve L y = (x - mean); quad = |y|^2.
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = x[i] - mean.data()[i];
        for j in 0..i {
            acc -= chol.at(i, j) * y[j];
        }
        y[i] = acc / chol.at(i, i);
    }
    -0.5 * (sum_sq(&y) + d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det)
}

fn gaussian_score_into(x: &[f64], mean: &Tensor, cov: &Tensor, out: &mut [f64]) {
    let d = x.len();
    let inv = tensor::spd_inverse(cov).expect("analytic covariance is SPD");
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += inv.at(i, j) * (x[j] - mean.data()[j]);
        }
        out[i] = -acc;
    }
}
