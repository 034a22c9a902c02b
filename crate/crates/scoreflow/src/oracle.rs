//! Ground-truth reference generators.
//!
//! Problems whose terminal cost is a density-independent potential `G` admit
//! a heat-kernel representation of the optimal flow (a Cole–Hopf transform of
//! the underlying HJB equation). This module evaluates that representation by
//! Riemann-sum quadrature on regular grids in one and two dimensions,
//! producing reference terminal densities, scores, and velocity fields that
//! trained models are compared against. It also provides a fine-grid
//! integrator for the covariance ODE `dΣ/dt = AΣ + ΣAᵀ`, a Monte-Carlo
//! estimator of the optimal objective value for problems with a closed-form
//! solution, and an Euler–Maruyama sampler used for visualization output.
//!
//! The kernel formulas evaluated here, for horizon `T = t_end` and diffusion
//! `γ`, are built from
//!
//! ```text
//! h(y)      = ∫ exp[-(G(z) + |z-y|²/(2T)) / (2γ)] dz
//! ρ_T(x)    = ∫ K(x,y) / h(y) · ρ_0(y) dy,   K(x,y) = exp[-(G(x) + |x-y|²/(2T)) / (2γ)]
//! score_T   = ∇ρ_T / ρ_T  with  ∇ₓK = K · (-1/(2γ)) (∇G(x) + (x-y)/T)
//! f_T(x)    = -∇G(x) - γ score_T(x)
//! f_0(x)    = [∫ ((y-x)/T) exp[-(G(y) + |x-y|²/(2T)) / (2γ)] dy] / h(x) - γ ∇log ρ_0(x)
//! ```
//!
//! The sign in `f_0` follows from `f(0,·) = ∇φ(0,·) - γ∇log ρ_0` with
//! `φ(t,x) = 2γ log[(4πγ(T-t))^{-d/2} ∫ exp(-(G(y)+|x-y|²/(2(T-t)))/(2γ)) dy]`,
//! whose gradient at `t = 0` equals `2γ ∇h/h = ⟨y-x⟩/T` under the kernel
//! weight; [`hjb_potential`] exposes `φ` so tests can verify this identity
//! directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problems::ProblemSpec;
use crate::tensor::{matmul_acc, Tensor};

/// Stable 64-bit FNV-1a hash; used for cache fingerprints and config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Regular tensor-product quadrature grid.
///
/// Integration variables run over the *inner* box while reference functions
/// are tabulated on the *outer* box; the inner box must contain the outer box
/// so that cached kernel values are valid at every tabulation point. The
/// default boxes are `[-6, 6]` (inner) and `[-4, 4]` (outer) with step `0.01`
/// in one dimension and `0.05` in two (the two-dimensional step is relaxed
/// because step `0.01` would cost on the order of 10⁹ integrand evaluations;
/// it remains configurable down to `0.01`).
pub struct QuadratureGrid {
    dim: usize,
    inner: Vec<(f64, f64)>,
    outer: Vec<(f64, f64)>,
    step: Vec<f64>,
    /// Cached `h(y)` on the outer grid, keyed by a fingerprint of the
    /// problem fields it depends on (`G`, `γ`, `T`).
    h_cache: Option<(u64, Vec<f64>)>,
}

impl QuadratureGrid {
    /// Grid with the same bounds and step in every dimension.
    pub fn isotropic(dim: usize, inner: (f64, f64), outer: (f64, f64), step: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("quadrature grid needs dim >= 1".into()));
        }
        if !(step > 0.0) {
            return Err(Error::InvalidConfig(format!("quadrature step must be positive, got {step}")));
        }
        for &(lo, hi) in [&inner, &outer] {
            if !(hi > lo) {
                return Err(Error::InvalidConfig(format!("quadrature bounds must satisfy lo < hi, got [{lo}, {hi}]")));
            }
            let cells = (hi - lo) / step;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "span [{lo}, {hi}] is not an integer multiple of step {step}"
                )));
            }
        }
        if inner.0 > outer.0 || inner.1 < outer.1 {
            return Err(Error::InvalidConfig(format!(
                "inner box [{}, {}] must contain outer box [{}, {}]",
                inner.0, inner.1, outer.0, outer.1
            )));
        }
        Ok(QuadratureGrid {
            dim,
            inner: vec![inner; dim],
            outer: vec![outer; dim],
            step: vec![step; dim],
            h_cache: None,
        })
    }

    /// Default reference grid for dimension 1 or 2.
    pub fn default_for_dim(dim: usize) -> Result<Self> {
        let step = match dim {
            1 => 0.01,
            2 => 0.05,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "kernel-formula references support 1 or 2 dimensions, got {dim}"
                )))
            }
        };
        QuadratureGrid::isotropic(dim, (-6.0, 6.0), (-4.0, 4.0), step)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self, axis: usize) -> f64 {
        self.step[axis]
    }

    pub fn inner_bounds(&self, axis: usize) -> (f64, f64) {
        self.inner[axis]
    }

    pub fn outer_bounds(&self, axis: usize) -> (f64, f64) {
        self.outer[axis]
    }

    /// Quadrature nodes along one axis of the inner box.
    pub fn inner_axis(&self, axis: usize) -> Vec<f64> {
        axis_nodes(self.inner[axis], self.step[axis])
    }

    /// Tabulation nodes along one axis of the outer box.
    pub fn outer_axis(&self, axis: usize) -> Vec<f64> {
        axis_nodes(self.outer[axis], self.step[axis])
    }

    fn inner_axes(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|k| self.inner_axis(k)).collect()
    }

    fn outer_axes(&self) -> Vec<Vec<f64>> {
        (0..self.dim).map(|k| self.outer_axis(k)).collect()
    }

    /// Builds (or reuses) the cached `h` values on the outer grid.
    fn ensure_h_cache(&mut self, spec: &ProblemSpec) -> Result<()> {
        let key = kernel_fingerprint(spec);
        if let Some((cached, _)) = &self.h_cache {
            if *cached == key {
                return Ok(());
            }
        }
        let (points, _) = flat_nodes(&self.outer_axes());
        let d = self.dim;
        let g = |z: &[f64]| spec.terminal_cost_value(z, 0.0);
        let values: Vec<f64> = points
            .par_chunks(d)
            .map(|y| kernel_h(y, &g, spec.gamma, spec.t_end, self))
            .collect();
        self.h_cache = Some((key, values));
        Ok(())
    }

    fn cached_h(&self) -> &[f64] {
        &self.h_cache.as_ref().expect("h cache built before use").1
    }
}

fn axis_nodes((lo, hi): (f64, f64), step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Flattens a tensor-product grid into row-major points and trapezoid
/// weights (step at interior nodes, half-step at boundary nodes, multiplied
/// across axes).
fn flat_nodes(axes: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = axes.len();
    let axis_weights: Vec<Vec<f64>> = axes
        .iter()
        .map(|nodes| {
            let n = nodes.len();
            let step = if n > 1 { nodes[1] - nodes[0] } else { 1.0 };
            (0..n)
                .map(|i| if i == 0 || i + 1 == n { 0.5 * step } else { step })
                .collect()
        })
        .collect();
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut points = Vec::with_capacity(total * d);
    let mut weights = Vec::with_capacity(total);
    match d {
        1 => {
            for (i, &x) in axes[0].iter().enumerate() {
                points.push(x);
                weights.push(axis_weights[0][i]);
            }
        }
        2 => {
            for (i0, &x0) in axes[0].iter().enumerate() {
                for (i1, &x1) in axes[1].iter().enumerate() {
                    points.push(x0);
                    points.push(x1);
                    weights.push(axis_weights[0][i0] * axis_weights[1][i1]);
                }
            }
        }
        _ => unreachable!("grids are validated to 1 or 2 dimensions"),
    }
    (points, weights)
}

/// Fingerprint of the problem fields the `h` cache depends on.
fn kernel_fingerprint(spec: &ProblemSpec) -> u64 {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(spec.name.as_bytes());
    bytes.extend_from_slice(&(spec.dim as u64).to_le_bytes());
    bytes.extend_from_slice(&spec.gamma.to_le_bytes());
    bytes.extend_from_slice(&spec.t_end.to_le_bytes());
    match &spec.terminal_cost {
        crate::problems::TerminalCost::None => bytes.push(0),
        crate::problems::TerminalCost::Quadratic { weight } => {
            bytes.push(1);
            bytes.extend_from_slice(&weight.to_le_bytes());
        }
        crate::problems::TerminalCost::DoubleWell { c, c1, c2 } => {
            bytes.push(2);
            bytes.extend_from_slice(&c.to_le_bytes());
            for v in c1.iter().chain(c2.iter()) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fnv1a64(&bytes)
}

/// Kernel normalizer `h(y) = ∫ exp[-(G(z) + |z-y|²/(2T)) / (2γ)] dz`
/// evaluated by trapezoid quadrature over the inner box.
pub fn kernel_h(
    y: &[f64],
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    gamma: f64,
    t_end: f64,
    grid: &QuadratureGrid,
) -> f64 {
    debug_assert_eq!(y.len(), grid.dim());
    let inv = 1.0 / (2.0 * gamma);
    let inv_2t = 1.0 / (2.0 * t_end);
    let mut acc = 0.0;
    match grid.dim() {
        1 => {
            let nodes = grid.inner_axis(0);
            let n = nodes.len();
            let step = grid.step(0);
            for (i, &z) in nodes.iter().enumerate() {
                let w = if i == 0 || i + 1 == n { 0.5 * step } else { step };
                let dz = z - y[0];
                acc += w * (-(g(&[z]) + dz * dz * inv_2t) * inv).exp();
            }
        }
        2 => {
            let a0 = grid.inner_axis(0);
            let a1 = grid.inner_axis(1);
            let (n0, n1) = (a0.len(), a1.len());
            let (s0, s1) = (grid.step(0), grid.step(1));
            let mut z = [0.0f64; 2];
            for (i0, &x0) in a0.iter().enumerate() {
                let w0 = if i0 == 0 || i0 + 1 == n0 { 0.5 * s0 } else { s0 };
                let d0 = x0 - y[0];
                let d0sq = d0 * d0;
                z[0] = x0;
                for (i1, &x1) in a1.iter().enumerate() {
                    let w1 = if i1 == 0 || i1 + 1 == n1 { 0.5 * s1 } else { s1 };
                    let d1 = x1 - y[1];
                    z[1] = x1;
                    acc += w0 * w1 * (-(g(&z) + (d0sq + d1 * d1) * inv_2t) * inv).exp();
                }
            }
        }
        _ => unreachable!("grids are validated to 1 or 2 dimensions"),
    }
    acc
}

/// `h(0)` at the grid's step and the change under halving that step; the
/// pair is recorded as a convergence diagnostic next to reference output.
pub fn h_step_convergence(spec: &ProblemSpec, grid: &QuadratureGrid) -> Result<(f64, f64)> {
    let d = grid.dim();
    let halved = QuadratureGrid::isotropic(d, grid.inner_bounds(0), grid.outer_bounds(0), grid.step(0) / 2.0)?;
    let g = |z: &[f64]| spec.terminal_cost_value(z, 0.0);
    let origin = vec![0.0; d];
    let coarse = kernel_h(&origin, &g, spec.gamma, spec.t_end, grid);
    let fine = kernel_h(&origin, &g, spec.gamma, spec.t_end, &halved);
    Ok((coarse, (coarse - fine).abs()))
}

/// A function tabulated on a regular 1- or 2-dimensional grid, evaluated
/// between nodes by linear/bilinear interpolation. Queries outside the grid
/// bounds are refused rather than extrapolated.
pub struct GridFunction {
    axes: Vec<Vec<f64>>,
    step: Vec<f64>,
    /// `[n_points, m]` values, points in row-major axis order.
    values: Tensor,
}

impl GridFunction {
    pub fn new(axes: Vec<Vec<f64>>, values: Tensor) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "grid functions support 1 or 2 dimensions, got {}",
                axes.len()
            )));
        }
        let mut step = Vec::with_capacity(axes.len());
        for nodes in &axes {
            if nodes.len() < 2 {
                return Err(Error::InvalidConfig("grid axis needs at least two nodes".into()));
            }
            let h = nodes[1] - nodes[0];
            if !(h > 0.0) {
                return Err(Error::InvalidConfig("grid axis must be strictly increasing".into()));
            }
            for w in nodes.windows(2) {
                if ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0) {
                    return Err(Error::InvalidConfig("grid axis must be uniform".into()));
                }
            }
            step.push(h);
        }
        let n_points: usize = axes.iter().map(|a| a.len()).product();
        if values.shape().len() != 2 || values.shape()[0] != n_points {
            return Err(Error::shape(
                "grid_function",
                format!("expected [{n_points}, m] values, got {:?}", values.shape()),
            ));
        }
        Ok(GridFunction { axes, step, values })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Number of output components per grid point.
    pub fn output_dim(&self) -> usize {
        self.values.shape()[1]
    }

    /// Cell index and in-cell fraction along one axis; out-of-bounds queries
    /// (beyond a relative tolerance at the boundary) are errors.
    fn locate(&self, axis: usize, x: &[f64]) -> Result<(usize, f64)> {
        let nodes = &self.axes[axis];
        let (lo, hi) = (nodes[0], nodes[nodes.len() - 1]);
        let tol = 1e-9 * (hi - lo);
        let q = x[axis];
        if q < lo - tol || q > hi + tol {
            return Err(Error::OutOfBounds { point: x.to_vec(), lo, hi });
        }
        let u = (q - lo) / self.step[axis];
        let max_cell = nodes.len() - 2;
        let cell = (u.floor() as isize).clamp(0, max_cell as isize) as usize;
        Ok((cell, u - cell as f64))
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.axes.len();
        let m = self.output_dim();
        if x.len() != d || out.len() != m {
            return Err(Error::shape(
                "grid_eval",
                format!("query dim {} / output {} vs grid dim {d} / components {m}", x.len(), out.len()),
            ));
        }
        let vals = self.values.data();
        match d {
            1 => {
                let (i, f) = self.locate(0, x)?;
                for c in 0..m {
                    out[c] = (1.0 - f) * vals[i * m + c] + f * vals[(i + 1) * m + c];
                }
            }
            2 => {
                let (i0, f0) = self.locate(0, x)?;
                let (i1, f1) = self.locate(1, x)?;
                let n1 = self.axes[1].len();
                let base = |a: usize, b: usize| (a * n1 + b) * m;
                let (p00, p01, p10, p11) =
                    (base(i0, i1), base(i0, i1 + 1), base(i0 + 1, i1), base(i0 + 1, i1 + 1));
                for c in 0..m {
                    let lo = (1.0 - f1) * vals[p00 + c] + f1 * vals[p01 + c];
                    let hi = (1.0 - f1) * vals[p10 + c] + f1 * vals[p11 + c];
                    out[c] = (1.0 - f0) * lo + f0 * hi;
                }
            }
            _ => unreachable!(),
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Convenience for single-component functions.
    pub fn eval_scalar(&self, x: &[f64]) -> Result<f64> {
        let mut out = [0.0];
        if self.output_dim() != 1 {
            return Err(Error::shape("grid_eval", "eval_scalar on multi-component grid function"));
        }
        self.eval_into(x, &mut out)?;
        Ok(out[0])
    }
}

/// Terminal-time reference produced by the kernel formulas.
pub struct TerminalReference {
    /// `ρ_T` tabulated on the outer grid (`[n, 1]`).
    pub density: GridFunction,
    /// `∇log ρ_T` (`[n, d]`).
    pub score: GridFunction,
    /// Terminal transport field `f_T = -∇G - γ score_T` (`[n, d]`).
    pub velocity: GridFunction,
    /// Trapezoid integral of `ρ_T` over the outer box; should be close to 1
    /// when the boxes capture the mass.
    pub grid_mass: f64,
}

fn check_reference_dims(spec: &ProblemSpec, grid: &QuadratureGrid) -> Result<()> {
    if spec.dim > 2 {
        return Err(Error::InvalidProblem(format!(
            "kernel-formula references support 1 or 2 dimensions, got {}",
            spec.dim
        )));
    }
    if grid.dim() != spec.dim {
        return Err(Error::shape(
            "reference_grid",
            format!("grid dim {} vs problem dim {}", grid.dim(), spec.dim),
        ));
    }
    Ok(())
}

/// Tabulates `ρ_T`, `score_T`, and `f_T` on the outer grid.
pub fn reference_terminal(spec: &ProblemSpec, grid: &mut QuadratureGrid) -> Result<TerminalReference> {
    check_reference_dims(spec, grid)?;
    grid.ensure_h_cache(spec)?;
    let d = spec.dim;
    let (gamma, t_end) = (spec.gamma, spec.t_end);
    let inv = 1.0 / (2.0 * gamma);
    let inv_2t = 1.0 / (2.0 * t_end);
    let axes = grid.outer_axes();
    let (points, weights) = flat_nodes(&axes);
    let n = weights.len();
    let h = grid.cached_h();

    // Initial-density factors of the y-integrand, precomputed per node.
    let mut base_weight = vec![0.0; n];
    for p in 0..n {
        let y = &points[p * d..(p + 1) * d];
        base_weight[p] = weights[p] * spec.init.density(y) / h[p];
    }

    let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ix| {
            let x = &points[ix * d..(ix + 1) * d];
            let gx = spec.terminal_cost_value(x, 0.0);
            let mut ggrad = vec![0.0; d];
            spec.terminal_cost.grad_into(x, &mut ggrad);
            let mut rho = 0.0;
            let mut num = vec![0.0; d];
            for p in 0..n {
                let y = &points[p * d..(p + 1) * d];
                let mut dist2 = 0.0;
                for k in 0..d {
                    let diff = x[k] - y[k];
                    dist2 += diff * diff;
                }
                let kernel = (-(gx + dist2 * inv_2t) * inv).exp();
                let contrib = kernel * base_weight[p];
                rho += contrib;
                for k in 0..d {
                    num[k] -= contrib * inv * (ggrad[k] + (x[k] - y[k]) / t_end);
                }
            }
            let mut score = vec![0.0; d];
            let mut vel = vec![0.0; d];
            for k in 0..d {
                score[k] = num[k] / rho;
                vel[k] = -ggrad[k] - gamma * score[k];
            }
            (rho, score, vel)
        })
        .collect();

    let mut rho_vals = Vec::with_capacity(n);
    let mut score_vals = Vec::with_capacity(n * d);
    let mut vel_vals = Vec::with_capacity(n * d);
    let mut mass = 0.0;
    for (p, (rho, score, vel)) in rows.into_iter().enumerate() {
        mass += weights[p] * rho;
        rho_vals.push(rho);
        score_vals.extend_from_slice(&score);
        vel_vals.extend_from_slice(&vel);
    }
    Ok(TerminalReference {
        density: GridFunction::new(axes.clone(), Tensor::new(vec![n, 1], rho_vals)?)?,
        score: GridFunction::new(axes.clone(), Tensor::new(vec![n, d], score_vals)?)?,
        velocity: GridFunction::new(axes, Tensor::new(vec![n, d], vel_vals)?)?,
        grid_mass: mass,
    })
}

/// Tabulates the initial transport field `f_0` on the outer grid.
pub fn reference_initial_velocity(spec: &ProblemSpec, grid: &mut QuadratureGrid) -> Result<GridFunction> {
    check_reference_dims(spec, grid)?;
    grid.ensure_h_cache(spec)?;
    let d = spec.dim;
    let (gamma, t_end) = (spec.gamma, spec.t_end);
    let inv = 1.0 / (2.0 * gamma);
    let inv_2t = 1.0 / (2.0 * t_end);
    let axes = grid.outer_axes();
    let (points, _) = flat_nodes(&axes);
    let n = points.len() / d;
    let h = grid.cached_h();
    let (inner_points, inner_weights) = flat_nodes(&grid.inner_axes());
    let n_inner = inner_weights.len();

    // G on the inner nodes is shared across all tabulation points.
    let g_inner: Vec<f64> = inner_points
        .par_chunks(d)
        .map(|y| spec.terminal_cost_value(y, 0.0))
        .collect();

    let vals: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|ix| {
            let x = &points[ix * d..(ix + 1) * d];
            let mut num = vec![0.0; d];
            for p in 0..n_inner {
                let y = &inner_points[p * d..(p + 1) * d];
                let mut dist2 = 0.0;
                for k in 0..d {
                    let diff = x[k] - y[k];
                    dist2 += diff * diff;
                }
                let kernel = inner_weights[p] * (-(g_inner[p] + dist2 * inv_2t) * inv).exp();
                for k in 0..d {
                    num[k] += kernel * (y[k] - x[k]) / t_end;
                }
            }
            let mut s0 = vec![0.0; d];
            spec.init.score_into(x, &mut s0);
            (0..d).map(move |k| num[k] / h[ix] - gamma * s0[k]).collect::<Vec<f64>>()
        })
        .collect();
    GridFunction::new(axes, Tensor::new(vec![n, d], vals)?)
}

/// Interior-time density via the full kernel representation. The double
/// integral factorizes for fixed `x`, so the cost per tabulation point is one
/// sweep over the inner grid plus one over the outer grid — still expensive;
/// terminal/initial references are preferred and this is exposed for
/// spot-check diagnostics only.
pub fn interior_density(spec: &ProblemSpec, grid: &mut QuadratureGrid, t: f64) -> Result<GridFunction> {
    check_reference_dims(spec, grid)?;
    if !(t > 0.0 && t < spec.t_end) {
        return Err(Error::InvalidConfig(format!(
            "interior density requires 0 < t < {}, got {t}",
            spec.t_end
        )));
    }
    grid.ensure_h_cache(spec)?;
    let d = spec.dim;
    let (gamma, t_end) = (spec.gamma, spec.t_end);
    let inv = 1.0 / (2.0 * gamma);
    let tau = t_end - t;
    let axes = grid.outer_axes();
    let (points, weights) = flat_nodes(&axes);
    let n = weights.len();
    let h = grid.cached_h();
    let (inner_points, inner_weights) = flat_nodes(&grid.inner_axes());
    let n_inner = inner_weights.len();
    let g_inner: Vec<f64> = inner_points
        .par_chunks(d)
        .map(|z| spec.terminal_cost_value(z, 0.0))
        .collect();
    let mut init_weight = vec![0.0; n];
    for p in 0..n {
        let y = &points[p * d..(p + 1) * d];
        init_weight[p] = weights[p] * spec.init.density(y) / h[p];
    }
    let norm = (4.0 * std::f64::consts::PI * gamma * t * tau / t_end).powf(-(d as f64) / 2.0);

    let vals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|ix| {
            let x = &points[ix * d..(ix + 1) * d];
            // Terminal-side sweep: ∫ exp[-(G(z) + |x-z|²/(2(T-t))) / (2γ)] dz.
            let mut s_term = 0.0;
            for p in 0..n_inner {
                let z = &inner_points[p * d..(p + 1) * d];
                let mut dist2 = 0.0;
                for k in 0..d {
                    let diff = x[k] - z[k];
                    dist2 += diff * diff;
                }
                s_term += inner_weights[p] * (-(g_inner[p] + dist2 / (2.0 * tau)) * inv).exp();
            }
            // Initial-side sweep: ∫ exp[-|x-y|²/(4γt)] ρ_0(y)/h(y) dy.
            let mut s_init = 0.0;
            for p in 0..n {
                let y = &points[p * d..(p + 1) * d];
                let mut dist2 = 0.0;
                for k in 0..d {
                    let diff = x[k] - y[k];
                    dist2 += diff * diff;
                }
                s_init += init_weight[p] * (-dist2 / (4.0 * gamma * t)).exp();
            }
            norm * s_term * s_init
        })
        .collect();
    GridFunction::new(axes, Tensor::new(vec![n, 1], vals)?)
}

/// HJB potential `φ(t,x) = 2γ log[(4πγ(T-t))^{-d/2} ∫ exp(-(G(y)+|x-y|²/(2(T-t)))/(2γ)) dy]`;
/// its gradient is the optimal control, and `f = ∇φ - γ∇log ρ` ties it to the
/// transport field. Exposed for consistency tests and diagnostics.
pub fn hjb_potential(spec: &ProblemSpec, grid: &QuadratureGrid, t: f64, x: &[f64]) -> Result<f64> {
    check_reference_dims(spec, grid)?;
    if !(t < spec.t_end) {
        return Err(Error::InvalidConfig(format!(
            "HJB potential requires t < {}, got {t}",
            spec.t_end
        )));
    }
    let d = spec.dim;
    let gamma = spec.gamma;
    let tau = spec.t_end - t;
    let inv = 1.0 / (2.0 * gamma);
    let (inner_points, inner_weights) = flat_nodes(&grid.inner_axes());
    let mut acc = 0.0;
    for (p, w) in inner_weights.iter().enumerate() {
        let y = &inner_points[p * d..(p + 1) * d];
        let mut dist2 = 0.0;
        for k in 0..d {
            let diff = x[k] - y[k];
            dist2 += diff * diff;
        }
        acc += w * (-(spec.terminal_cost_value(y, 0.0) + dist2 / (2.0 * tau)) * inv).exp();
    }
    let norm = (4.0 * std::f64::consts::PI * gamma * tau).powf(-(d as f64) / 2.0);
    Ok(2.0 * gamma * (norm * acc).ln())
}

/// Integrates `dΣ/dt = A(t)Σ + ΣA(t)ᵀ` with forward Euler on a fine grid and
/// returns `Σ` at the coarse nodes `t_start + j·dt_coarse`, `j = 0..=n_steps`.
/// The fine step must be at most a tenth of the coarse step.
pub fn covariance_ode_integrate(
    a_of_t: &dyn Fn(f64) -> Tensor,
    sigma0: &Tensor,
    t_start: f64,
    dt_coarse: f64,
    n_steps: usize,
    dt_fine: f64,
) -> Result<Vec<Tensor>> {
    let shape = sigma0.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("covariance_ode", format!("Sigma0 must be square, got {shape:?}")));
    }
    let d = shape[0];
    if !(dt_coarse > 0.0) || !(dt_fine > 0.0) {
        return Err(Error::InvalidConfig("covariance ODE steps must be positive".into()));
    }
    if dt_fine > dt_coarse / 10.0 + 1e-15 {
        return Err(Error::InvalidConfig(format!(
            "fine step {dt_fine} must be at most a tenth of the coarse step {dt_coarse}"
        )));
    }
    let substeps = (dt_coarse / dt_fine).ceil() as usize;
    let h = dt_coarse / substeps as f64;
    let mut sigma = sigma0.clone();
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(sigma.clone());
    let mut rhs = vec![0.0; d * d];
    for j in 0..n_steps {
        let t_j = t_start + j as f64 * dt_coarse;
        for sub in 0..substeps {
            let t = t_j + sub as f64 * h;
            let a = a_of_t(t);
            if a.shape() != shape {
                return Err(Error::shape(
                    "covariance_ode",
                    format!("A(t) shape {:?} vs Sigma {shape:?}", a.shape()),
                ));
            }
            rhs.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(&mut rhs, a.data(), sigma.data(), d, d, d);
            let sdata = sigma.data_mut();
            for r in 0..d {
                for c in 0..d {
                    sdata[r * d + c] += h * (rhs[r * d + c] + rhs[c * d + r]);
                }
            }
        }
        out.push(sigma.clone());
        if !sigma.is_finite() {
            return Err(Error::NonFinite { context: "covariance ODE state", step: j + 1, particle: 0 });
        }
    }
    Ok(out)
}

/// Monte-Carlo estimate of an optimal objective value.
#[derive(Debug, Clone, Copy)]
pub struct McCost {
    pub value: f64,
    /// Standard error of the mean over samples.
    pub stderr: f64,
    pub n_samples: usize,
    pub dt: f64,
}

/// Evaluates the objective along the closed-form optimal flow by Monte-Carlo:
/// samples `z_0 ~ ρ_0`, integrates `dz/dt = f*(t,z)` with forward Euler, and
/// accumulates the left-endpoint quadrature of the running costs (with the
/// control `v* = f* + γ s*`) plus the terminal cost. Sampling is chunked with
/// one deterministic RNG stream per chunk and reduced in chunk order, so the
/// result is independent of thread count.
pub fn mc_optimal_cost(spec: &ProblemSpec, n_samples: usize, dt: f64, seed: u64) -> Result<McCost> {
    let ana = spec.analytic.as_ref().ok_or_else(|| {
        Error::InvalidProblem(format!("problem {} has no closed-form optimal flow", spec.name))
    })?;
    if n_samples == 0 {
        return Err(Error::InvalidConfig("optimal-cost estimate needs at least one sample".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let n_steps_f = spec.t_end / dt;
    if (n_steps_f - n_steps_f.round()).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "time step {dt} must divide the horizon {}",
            spec.t_end
        )));
    }
    let n_steps = n_steps_f.round() as usize;
    let d = spec.dim;
    let gamma = spec.gamma;
    let needs_mf = !spec.mf_cost.is_zero();
    let uses_log = spec.mf_cost.uses_log_density();
    let needs_terminal = !spec.terminal_cost.is_zero();
    const CHUNK: usize = 8192;
    let n_chunks = n_samples.div_ceil(CHUNK);

    let partials: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64 + 1);
            let n_c = CHUNK.min(n_samples - chunk * CHUNK);
            let mut z = spec.init.sample(&mut rng, n_c);
            let zdata = z.data_mut();
            let mut f = vec![0.0; d];
            let mut s = vec![0.0; d];
            let mut v = vec![0.0; d];
            let (mut sum, mut sumsq) = (0.0, 0.0);
            for p in 0..n_c {
                let row = &mut zdata[p * d..(p + 1) * d];
                let mut cost = 0.0;
                for j in 0..n_steps {
                    let t = j as f64 * dt;
                    (ana.field)(t, row, &mut f);
                    (ana.score)(t, row, &mut s);
                    for k in 0..d {
                        v[k] = f[k] + gamma * s[k];
                    }
                    let mut stage = spec.running_cost_value(t, row, &v);
                    if needs_mf {
                        let log_rho = (ana.log_density)(t, row);
                        let rho_in = if uses_log { log_rho } else { log_rho.exp() };
                        stage += spec.mf_cost_value(row, rho_in);
                    }
                    cost += stage * dt;
                    for k in 0..d {
                        row[k] += dt * f[k];
                    }
                }
                if needs_terminal {
                    let rho_t = ana.density(spec.t_end, row);
                    cost += spec.terminal_cost_value(row, rho_t);
                }
                sum += cost;
                sumsq += cost * cost;
            }
            (sum, sumsq)
        })
        .collect();

    let (mut sum, mut sumsq) = (0.0, 0.0);
    for (a, b) in partials {
        sum += a;
        sumsq += b;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    if !mean.is_finite() {
        return Err(Error::InvalidProblem(format!(
            "optimal-cost Monte-Carlo for {} produced non-finite values",
            spec.name
        )));
    }
    let var = if n_samples > 1 { ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(McCost { value: mean, stderr: (var / n).sqrt(), n_samples, dt })
}

/// Euler–Maruyama sampler for `dX = b(t,X) dt + √(2γ) dW`, returning the
/// state after every step (including the initial state). Used only to emit
/// visualization trajectories; noise is drawn row-major per step.
pub fn euler_maruyama<R: Rng>(
    mut drift: impl FnMut(f64, &[f64], &mut [f64]),
    z0: &Tensor,
    t_start: f64,
    dt: f64,
    n_steps: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let shape = z0.shape();
    if shape.len() != 2 {
        return Err(Error::shape("euler_maruyama", format!("expected [n, d] initial states, got {shape:?}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    if gamma < 0.0 {
        return Err(Error::InvalidConfig(format!("diffusion coefficient must be nonnegative, got {gamma}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let noise_scale = (2.0 * gamma * dt).sqrt();
    let mut path = Vec::with_capacity(n_steps + 1);
    path.push(z0.clone());
    let mut state = z0.clone();
    let mut b = vec![0.0; d];
    for j in 0..n_steps {
        let t = t_start + j as f64 * dt;
        let data = state.data_mut();
        for p in 0..n {
            let row = &mut data[p * d..(p + 1) * d];
            drift(t, row, &mut b);
            for k in 0..d {
                let xi: f64 = rng.sample(StandardNormal);
                row[k] += dt * b[k] + noise_scale * xi;
            }
        }
        if !state.is_finite() {
            return Err(Error::NonFinite { context: "Euler-Maruyama state", step: j + 1, particle: 0 });
        }
        path.push(state.clone());
    }
    Ok(path)
}
