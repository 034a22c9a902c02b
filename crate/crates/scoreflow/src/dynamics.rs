//! The coupled transport system and its forward-Euler rollout.
//!
//! Along each particle trajectory the solver integrates position `z`,
//! log-density `l`, density `lt`, score `s`, and score Jacobian `h`:
//!
//! ```text
//! dz = f            dl  = -div f         dlt = -(div f) lt
//! ds = -(grad f)^T s - grad(div f)
//! dh = -sum_i s_i hess(f_i) - hess(div f) - h (grad f) - (grad f)^T h
//! ```
//!
//! All spatial derivatives are evaluated at the step start (explicit Euler).
//! The score Jacobian is optional: transporting it costs two `d x d`
//! products per particle step and is only needed by consumers of second-order
//! information (residual penalties, the trace identity checks).
//!
//! [`score_via_sensitivity`] recomputes the terminal score from flow-map
//! sensitivities instead of the score ODE — an independent path used as an
//! oracle: exact for affine fields (where the divergence gradient vanishes)
//! and first-order accurate otherwise.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, Tensor};
use crate::velocity::{FieldDerivs, VelocityField};

/// Batched particle state: `n` particles in dimension `d`.
#[derive(Debug, Clone)]
pub struct FlowState {
    /// Positions, `[n, d]`.
    pub z: Tensor,
    /// Log-densities `log rho(t, z)`, `[n]`.
    pub l: Tensor,
    /// Densities `rho(t, z)`, `[n]`.
    pub lt: Tensor,
    /// Scores `grad log rho(t, z)`, `[n, d]`.
    pub s: Tensor,
    /// Score Jacobians as stacked blocks, `[n*d, d]`; `None` when the
    /// second-order state is not transported.
    pub h: Option<Tensor>,
}

impl FlowState {
    pub fn new(z: Tensor, l: Tensor, lt: Tensor, s: Tensor, h: Option<Tensor>) -> Result<Self> {
        let shape = z.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("flow state", format!("z must be [n, d], got {:?}", shape)));
        }
        let (n, d) = (shape[0], shape[1]);
        if l.shape() != [n] || lt.shape() != [n] || s.shape() != [n, d] {
            return Err(Error::shape(
                "flow state",
                format!(
                    "l {:?}, lt {:?}, s {:?} inconsistent with z [{}, {}]",
                    l.shape(),
                    lt.shape(),
                    s.shape(),
                    n,
                    d
                ),
            ));
        }
        if let Some(h) = &h {
            if h.shape() != [n * d, d] {
                return Err(Error::shape(
                    "flow state",
                    format!("h {:?} must be [{}, {}]", h.shape(), n * d, d),
                ));
            }
        }
        Ok(FlowState { z, l, lt, s, h })
    }

    pub fn n(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    /// Index of the first particle holding a non-finite value, if any.
    fn first_non_finite(&self) -> Option<usize> {
        let (n, d) = (self.n(), self.dim());
        for b in 0..n {
            let z_ok = self.z.data()[b * d..(b + 1) * d].iter().all(|v| v.is_finite());
            let s_ok = self.s.data()[b * d..(b + 1) * d].iter().all(|v| v.is_finite());
            let scalars_ok = self.l.data()[b].is_finite() && self.lt.data()[b].is_finite();
            let h_ok = match &self.h {
                None => true,
                Some(h) => h.data()[b * d * d..(b + 1) * d * d].iter().all(|v| v.is_finite()),
            };
            if !(z_ok && s_ok && scalars_ok && h_ok) {
                return Some(b);
            }
        }
        None
    }

    /// Per-particle traces of the score Jacobian, `[n]`.
    pub fn trace_h(&self) -> Option<Tensor> {
        let h = self.h.as_ref()?;
        let (n, d) = (self.n(), self.dim());
        Some(Tensor::vector(
            (0..n)
                .map(|b| (0..d).map(|i| h.data()[(b * d + i) * d + i]).sum())
                .collect(),
        ))
    }
}

/// Time derivative of one particle's state at given spatial derivatives.
#[derive(Debug, Clone)]
pub struct Increment {
    pub dz: Tensor,
    pub dl: f64,
    pub dlt: f64,
    pub ds: Tensor,
    pub dh: Option<Tensor>,
}

/// Right-hand side of the transport system for a single particle, given the
/// field's spatial derivatives at the particle's position (with the Hessian
/// contractions filled when `h` is supplied).
pub fn rhs(derivs: &FieldDerivs, lt: f64, s: &[f64], h: Option<&Tensor>) -> Increment {
    let d = s.len();
    let dz = derivs.f.clone();
    let dl = -derivs.div;
    let dlt = -derivs.div * lt;
    let mut ds = vec![0.0; d];
    for i in 0..d {
        let mut acc = derivs.grad_div.data()[i];
        for a in 0..d {
            acc += derivs.jac.at(a, i) * s[a];
        }
        ds[i] = -acc;
    }
    let dh = h.map(|h| {
        let mut out = Tensor::zeros(&[d, d]);
        // -(score_hess + hess_div + h jac + jac^T h)
        for i in 0..d {
            for j in 0..d {
                let mut acc = derivs.score_hess.at(i, j) + derivs.hess_div.at(i, j);
                for m in 0..d {
                    acc += h.at(i, m) * derivs.jac.at(m, j);
                    acc += derivs.jac.at(m, i) * h.at(m, j);
                }
                *out.at_mut(i, j) = -acc;
            }
        }
        out
    });
    Increment { dz, dl, dlt, ds: Tensor::vector(ds), dh }
}

/// Reusable per-particle buffers for [`euler_step`].
pub struct StepScratch {
    derivs: FieldDerivs,
    jac_t_s: Vec<f64>,
    s_new: Vec<f64>,
    h_new: Vec<f64>,
}

impl StepScratch {
    pub fn new(d: usize) -> Self {
        StepScratch {
            derivs: FieldDerivs::new(d),
            jac_t_s: vec![0.0; d],
            s_new: vec![0.0; d],
            h_new: vec![0.0; d * d],
        }
    }
}

/// Per-step stability diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    /// Particles whose `|dt * div|` exceeded 0.5 (the multiplicative density
    /// update can cross zero there).
    pub warned_particles: usize,
    pub max_abs_dt_div: f64,
}

/// Advances the whole batch by one explicit Euler step at time `t`.
/// `step` only labels error diagnostics.
pub fn euler_step(
    field: &dyn VelocityField,
    t: f64,
    dt: f64,
    state: &mut FlowState,
    scratch: &mut StepScratch,
    step: usize,
) -> Result<StepReport> {
    let (n, d) = (state.n(), state.dim());
    let with_h = state.h.is_some();
    let mut report = StepReport::default();
    for b in 0..n {
        let zb_start = b * d;
        {
            let zb = &state.z.data()[zb_start..zb_start + d];
            let sb = &state.s.data()[zb_start..zb_start + d];
            if with_h {
                field.derivatives(t, zb, Some(sb), &mut scratch.derivs)?;
                // ds = -(jac^T s + grad_div); the dense Jacobian is in hand
                // anyway for the H update below.
                for i in 0..d {
                    let mut acc = scratch.derivs.grad_div.data()[i];
                    for a in 0..d {
                        acc += scratch.derivs.jac.at(a, i) * sb[a];
                    }
                    scratch.s_new[i] = sb[i] - dt * acc;
                }
            } else {
                field.score_derivs_into(t, zb, sb, &mut scratch.derivs, &mut scratch.jac_t_s)?;
                for i in 0..d {
                    scratch.s_new[i] =
                        sb[i] - dt * (scratch.jac_t_s[i] + scratch.derivs.grad_div.data()[i]);
                }
            }
        }
        let derivs = &scratch.derivs;
        let dt_div = dt * derivs.div;
        if dt_div.abs() > 0.5 {
            report.warned_particles += 1;
        }
        report.max_abs_dt_div = report.max_abs_dt_div.max(dt_div.abs());

        if let Some(h) = &mut state.h {
            let hb = &h.data()[b * d * d..(b + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut acc = derivs.score_hess.at(i, j) + derivs.hess_div.at(i, j);
                    for m in 0..d {
                        acc += hb[i * d + m] * derivs.jac.at(m, j);
                        acc += derivs.jac.at(m, i) * hb[m * d + j];
                    }
                    scratch.h_new[i * d + j] = hb[i * d + j] - dt * acc;
                }
            }
            h.data_mut()[b * d * d..(b + 1) * d * d].copy_from_slice(&scratch.h_new);
        }
        for i in 0..d {
            state.z.data_mut()[zb_start + i] += dt * derivs.f.data()[i];
        }
        state.l.data_mut()[b] -= dt * derivs.div;
        let lt_b = state.lt.data()[b];
        state.lt.data_mut()[b] = lt_b - dt * derivs.div * lt_b;
        state.s.data_mut()[zb_start..zb_start + d].copy_from_slice(&scratch.s_new);
    }
    if let Some(particle) = state.first_non_finite() {
        return Err(Error::NonFinite {
            context: "euler step produced a non-finite state",
            step,
            particle,
        });
    }
    Ok(report)
}

/// What a rollout retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Initial and final snapshots only.
    Endpoints,
    /// `z`, `l`, `lt`, `s` (and `trace h` when transported) at every node;
    /// full score Jacobians only at the endpoints.
    Path,
    /// Everything at every node, including score Jacobians. Test-scale only.
    Full,
}

/// Result of [`rollout`]: snapshots on the time grid plus stability
/// diagnostics. `node_index[k]` maps snapshot `k` to its grid node.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub node_index: Vec<usize>,
    pub z: Vec<Tensor>,
    pub l: Vec<Tensor>,
    pub lt: Vec<Tensor>,
    pub s: Vec<Tensor>,
    /// Per-particle `trace h` at each recorded node (when transported).
    pub trh: Option<Vec<Tensor>>,
    /// Score Jacobian at the first and last node (when transported).
    pub h_first: Option<Tensor>,
    pub h_last: Option<Tensor>,
    /// Score Jacobian at every recorded node ([`Record::Full`] only).
    pub h_path: Option<Vec<Tensor>>,
    /// Count of `(step, particle)` events with `|dt * div| > 0.5`.
    pub divergence_warnings: usize,
    pub max_abs_dt_div: f64,
}

impl Rollout {
    /// The terminal state (used for stage handoff and terminal metrics).
    pub fn final_state(&self) -> FlowState {
        FlowState {
            z: self.z.last().expect("rollout records >= 1 node").clone(),
            l: self.l.last().unwrap().clone(),
            lt: self.lt.last().unwrap().clone(),
            s: self.s.last().unwrap().clone(),
            h: self.h_last.clone(),
        }
    }
}

/// Integrates the batch for `n_steps` Euler steps of size `dt` from `t0`.
pub fn rollout(
    field: &dyn VelocityField,
    t0: f64,
    dt: f64,
    n_steps: usize,
    init: &FlowState,
    record: Record,
) -> Result<Rollout> {
    if dt <= 0.0 {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {}", dt)));
    }
    let mut state = init.clone();
    if let Some(particle) = state.first_non_finite() {
        return Err(Error::NonFinite {
            context: "initial state is non-finite",
            step: 0,
            particle,
        });
    }
    let d = state.dim();
    let times: Vec<f64> = (0..=n_steps).map(|j| t0 + j as f64 * dt).collect();
    let keep_path = record != Record::Endpoints;
    let mut out = Rollout {
        times,
        node_index: Vec::new(),
        z: Vec::new(),
        l: Vec::new(),
        lt: Vec::new(),
        s: Vec::new(),
        trh: if keep_path && state.h.is_some() { Some(Vec::new()) } else { None },
        h_first: state.h.clone(),
        h_last: None,
        h_path: if record == Record::Full && state.h.is_some() { Some(Vec::new()) } else { None },
        divergence_warnings: 0,
        max_abs_dt_div: 0.0,
    };
    let mut scratch = StepScratch::new(d);
    let snapshot = |out: &mut Rollout, state: &FlowState, node: usize| {
        out.node_index.push(node);
        out.z.push(state.z.clone());
        out.l.push(state.l.clone());
        out.lt.push(state.lt.clone());
        out.s.push(state.s.clone());
        if let Some(trh) = &mut out.trh {
            trh.push(state.trace_h().expect("trh recorded only when h transported"));
        }
        if let Some(hp) = &mut out.h_path {
            hp.push(state.h.clone().unwrap());
        }
    };
    snapshot(&mut out, &state, 0);
    for j in 0..n_steps {
        let t = t0 + j as f64 * dt;
        let report = euler_step(field, t, dt, &mut state, &mut scratch, j)?;
        out.divergence_warnings += report.warned_particles;
        out.max_abs_dt_div = out.max_abs_dt_div.max(report.max_abs_dt_div);
        if keep_path || j + 1 == n_steps {
            snapshot(&mut out, &state, j + 1);
        }
    }
    if n_steps == 0 && record == Record::Endpoints {
        // Single-node grid: the initial snapshot doubles as the final one.
        snapshot(&mut out, &state, 0);
    } else if record == Record::Endpoints {
        // Initial snapshot was taken before the loop; final inside it.
    }
    out.h_last = state.h.clone();
    Ok(out)
}

/// Terminal positions and scores reconstructed from flow-map sensitivities.
#[derive(Debug, Clone)]
pub struct SensitivityScore {
    /// Terminal positions, `[n, d]` (identical Euler path as [`rollout`]).
    pub z: Tensor,
    /// Terminal score estimate, `[n, d]`.
    pub s: Tensor,
}

/// Recomputes the terminal score as `(dz_T/dz_0)^{-T} dl_T/dz_0`, chaining
/// per-step position sensitivities `I + dt jac` and accumulating the
/// log-density gradient `dl_T/dz_0 = s_0 - dt sum_j (dz_j/dz_0)^T grad_div_j`.
/// The inverse transpose is chained step-by-step to first order,
/// `m <- (I - dt jac^T) m`, which reproduces the score transport exactly
/// whenever the divergence gradient vanishes (every affine field) and to
/// `O(dt)` otherwise. Cost per particle: `O(n_steps d^3)`.
///
/// Errors with [`Error::SingularStepJacobian`] if `dt |jac|_inf >= 1`, where
/// the first-order inverse stops being a contraction.
pub fn score_via_sensitivity(
    field: &dyn VelocityField,
    t0: f64,
    dt: f64,
    n_steps: usize,
    z0: &Tensor,
    s0: &Tensor,
) -> Result<SensitivityScore> {
    let shape = z0.shape().to_vec();
    if shape.len() != 2 || s0.shape() != shape.as_slice() {
        return Err(Error::shape(
            "score_via_sensitivity",
            format!("z0 {:?} vs s0 {:?}", z0.shape(), s0.shape()),
        ));
    }
    let (n, d) = (shape[0], shape[1]);
    let mut z_out = z0.clone();
    let mut s_out = Tensor::zeros(&[n, d]);
    let mut derivs = FieldDerivs::new(d);
    let mut jz = vec![0.0; d * d];
    let mut m = vec![0.0; d * d];
    let mut step_mat = vec![0.0; d * d];
    let mut tmp = vec![0.0; d * d];
    let mut jl = vec![0.0; d];

    for b in 0..n {
        // Reset per-particle sensitivities: jz = m = I, jl = s_0.
        jz.fill(0.0);
        m.fill(0.0);
        for i in 0..d {
            jz[i * d + i] = 1.0;
            m[i * d + i] = 1.0;
        }
        jl.copy_from_slice(&s0.data()[b * d..(b + 1) * d]);

        for j in 0..n_steps {
            let t = t0 + j as f64 * dt;
            {
                let zb = &z_out.data()[b * d..(b + 1) * d];
                field.derivatives(t, zb, None, &mut derivs)?;
            }
            // Operator infinity norm of dt * jac.
            let norm = (0..d)
                .map(|i| (0..d).map(|c| (dt * derivs.jac.at(i, c)).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            if norm >= 1.0 {
                return Err(Error::SingularStepJacobian { step: j, norm });
            }
            // jl -= dt * jz^T grad_div (sensitivity of z_j taken at step start).
            for i in 0..d {
                let mut acc = 0.0;
                for a in 0..d {
                    acc += jz[a * d + i] * derivs.grad_div.data()[a];
                }
                jl[i] -= dt * acc;
            }
            // m <- (I - dt jac^T) m
            for i in 0..d {
                for c in 0..d {
                    let delta = if i == c { 1.0 } else { 0.0 };
                    step_mat[i * d + c] = delta - dt * derivs.jac.at(c, i);
                }
            }
            tmp.fill(0.0);
            matmul_acc(&mut tmp, &step_mat, &m, d, d, d);
            m.copy_from_slice(&tmp);
            // jz <- (I + dt jac) jz
            for i in 0..d {
                for c in 0..d {
                    let delta = if i == c { 1.0 } else { 0.0 };
                    step_mat[i * d + c] = delta + dt * derivs.jac.at(i, c);
                }
            }
            tmp.fill(0.0);
            matmul_acc(&mut tmp, &step_mat, &jz, d, d, d);
            jz.copy_from_slice(&tmp);
            // Advance the particle with the same update the rollout applies.
            for i in 0..d {
                z_out.data_mut()[b * d + i] += dt * derivs.f.data()[i];
            }
        }
        // s_T = m jl
        for i in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += m[i * d + c] * jl[c];
            }
            s_out.data_mut()[b * d + i] = acc;
        }
    }
    if !z_out.is_finite() || !s_out.is_finite() {
        return Err(Error::NonFinite {
            context: "sensitivity score produced a non-finite value",
            step: n_steps,
            particle: 0,
        });
    }
    Ok(SensitivityScore { z: z_out, s: s_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::{LinearTimeVarying, MlpField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn constant_field(d: usize, value: Vec<f64>) -> LinearTimeVarying {
        LinearTimeVarying::new(
            d,
            move |_| Tensor::zeros(&[d, d]),
            move |_| Tensor::vector(value.clone()),
        )
    }

    fn linear_field(a: Tensor) -> LinearTimeVarying {
        let d = a.shape()[0];
        LinearTimeVarying::new(d, move |_| a.clone(), move |_| Tensor::zeros(&[d]))
    }

    /// Standard-normal particle cloud with exact log-density, score, and
    /// score Jacobian.
    fn standard_normal_state(n: usize, d: usize, seed: u64, with_h: bool) -> FlowState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Tensor::zeros(&[n, d]);
        for v in z.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut l = Tensor::zeros(&[n]);
        let mut s = Tensor::zeros(&[n, d]);
        for b in 0..n {
            let zb = &z.data()[b * d..(b + 1) * d];
            let q: f64 = zb.iter().map(|v| v * v).sum();
            l.data_mut()[b] = log_norm - 0.5 * q;
            for i in 0..d {
                s.data_mut()[b * d + i] = -zb[i];
            }
        }
        let lt = Tensor::vector(l.data().iter().map(|v| v.exp()).collect());
        let h = with_h.then(|| {
            let mut h = Tensor::zeros(&[n * d, d]);
            for b in 0..n {
                for i in 0..d {
                    h.data_mut()[(b * d + i) * d + i] = -1.0;
                }
            }
            h
        });
        FlowState::new(z, l, lt, s, h).unwrap()
    }

    #[test]
    fn rhs_matches_hand_example() {
        // d = 1 linear field with jac = div = 1 at state
        // (z, l, lt, s, h) = (1, 0, 0.5, -1, -1).
        let field = linear_field(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let mut derivs = FieldDerivs::new(1);
        field.derivatives(0.0, &[1.0], Some(&[-1.0]), &mut derivs).unwrap();
        let h = Tensor::matrix(1, 1, vec![-1.0]).unwrap();
        let inc = rhs(&derivs, 0.5, &[-1.0], Some(&h));
        assert_eq!(inc.dz.data()[0], 1.0);
        assert_eq!(inc.dl, -1.0);
        assert_eq!(inc.dlt, -0.5);
        assert_eq!(inc.ds.data()[0], 1.0);
        assert_eq!(inc.dh.unwrap().at(0, 0), 2.0);
    }

    #[test]
    fn rhs_of_zero_field_is_zero() {
        let field = constant_field(2, vec![0.0, 0.0]);
        let mut derivs = FieldDerivs::new(2);
        field.derivatives(0.3, &[0.5, -0.2], Some(&[1.0, 2.0]), &mut derivs).unwrap();
        let h = Tensor::matrix(2, 2, vec![-1.0, 0.2, 0.2, -0.7]).unwrap();
        let inc = rhs(&derivs, 0.4, &[1.0, 2.0], Some(&h));
        assert!(inc.dz.data().iter().all(|&v| v == 0.0));
        assert_eq!(inc.dl, 0.0);
        assert_eq!(inc.dlt, 0.0);
        assert!(inc.ds.data().iter().all(|&v| v == 0.0));
        assert!(inc.dh.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rhs_keeps_h_increment_symmetric() {
        let a = Tensor::matrix(2, 2, vec![0.4, -0.9, 1.3, 0.2]).unwrap();
        let field = linear_field(a);
        let mut derivs = FieldDerivs::new(2);
        field.derivatives(0.0, &[0.1, 0.2], Some(&[0.5, -0.5]), &mut derivs).unwrap();
        let h = Tensor::matrix(2, 2, vec![-1.0, 0.3, 0.3, -2.0]).unwrap();
        let inc = rhs(&derivs, 1.0, &[0.5, -0.5], Some(&h)).dh.unwrap();
        assert_eq!(inc.at(0, 1), inc.at(1, 0));
    }

    #[test]
    fn euler_step_matches_hand_examples() {
        // Constant field f = 2 moves z = 1 to 1.02 at dt = 0.01.
        let field = constant_field(1, vec![2.0]);
        let mut state = FlowState::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            Tensor::vector(vec![1.0]),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            None,
        )
        .unwrap();
        let mut scratch = StepScratch::new(1);
        euler_step(&field, 0.0, 0.01, &mut state, &mut scratch, 0).unwrap();
        assert!((state.z.data()[0] - 1.02).abs() < 1e-15);

        // Linear field jac = 1, grad_div = 0: s = -1 -> -0.99, h = -1 -> -0.98.
        let field = linear_field(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let mut state = FlowState::new(
            Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            Tensor::vector(vec![0.0]),
            Tensor::vector(vec![1.0]),
            Tensor::matrix(1, 1, vec![-1.0]).unwrap(),
            Some(Tensor::matrix(1, 1, vec![-1.0]).unwrap()),
        )
        .unwrap();
        euler_step(&field, 0.0, 0.01, &mut state, &mut scratch, 0).unwrap();
        assert!((state.s.data()[0] - (-0.99)).abs() < 1e-15);
        assert!((state.h.as_ref().unwrap().data()[0] - (-0.98)).abs() < 1e-15);
    }

    #[test]
    fn rollout_of_zero_field_is_identity() {
        let field = constant_field(2, vec![0.0, 0.0]);
        let init = standard_normal_state(10, 2, 1, true);
        let roll = rollout(&field, 0.0, 0.01, 50, &init, Record::Endpoints).unwrap();
        let last = roll.final_state();
        assert_eq!(last.z.data(), init.z.data());
        assert_eq!(last.l.data(), init.l.data());
        assert_eq!(last.s.data(), init.s.data());
        assert_eq!(last.h.unwrap().data(), init.h.as_ref().unwrap().data());
        assert_eq!(roll.divergence_warnings, 0);
    }

    #[test]
    fn rollout_compounds_like_discrete_euler() {
        // f(z) = z: each step multiplies z by 1.01; 100 steps give 1.01^100.
        let field = linear_field(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let mut init = standard_normal_state(1, 1, 2, false);
        init.z.data_mut()[0] = 1.0;
        let roll = rollout(&field, 0.0, 0.01, 100, &init, Record::Endpoints).unwrap();
        let z_end = roll.final_state().z.data()[0];
        assert!((z_end - 1.01f64.powi(100)).abs() < 1e-12);
        assert!((z_end - 2.7048).abs() < 1e-3);
    }

    #[test]
    fn h_stays_exactly_symmetric_along_mlp_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = MlpField::init(2, 8, &mut rng);
        let init = standard_normal_state(6, 2, 4, true);
        let roll = rollout(&field, 0.0, 0.01, 50, &init, Record::Endpoints).unwrap();
        let h = roll.final_state().h.unwrap();
        for b in 0..6 {
            for i in 0..2 {
                for j in 0..2 {
                    let (x, y) = (h.at(b * 2 + i, j), h.at(b * 2 + j, i));
                    // Symmetric up to accumulated rounding of the product sums.
                    assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "particle {}", b);
                }
            }
        }
    }

    #[test]
    fn log_density_and_density_stay_consistent_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let field = MlpField::init(1, 6, &mut rng);
        let measure = |dt: f64, n_steps: usize| -> f64 {
            let init = standard_normal_state(20, 1, 6, false);
            let roll = rollout(&field, 0.0, dt, n_steps, &init, Record::Path).unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..roll.z.len() {
                for b in 0..20 {
                    worst = worst.max((roll.l[k].data()[b].exp() - roll.lt[k].data()[b]).abs());
                }
            }
            worst
        };
        let coarse = measure(0.01, 100);
        let fine = measure(0.005, 200);
        assert!(coarse < 0.05, "drift too large: {}", coarse);
        let ratio = coarse / fine;
        assert!((1.5..=2.6).contains(&ratio), "expected first order, got ratio {}", ratio);
    }

    #[test]
    fn position_error_converges_first_order_on_analytic_shrinking_flow() {
        // f(t, x) = -x / (2 (2 - t)) has exact solution x(t) = x0 sqrt((2-t)/2).
        let field = LinearTimeVarying::new(
            1,
            |t| Tensor::matrix(1, 1, vec![-1.0 / (2.0 * (2.0 - t))]).unwrap(),
            |_| Tensor::zeros(&[1]),
        );
        let exact = 1.5 * (0.5f64).sqrt();
        let err_at = |dt: f64, n_steps: usize| -> f64 {
            let mut init = standard_normal_state(1, 1, 7, false);
            init.z.data_mut()[0] = 1.5;
            let roll = rollout(&field, 0.0, dt, n_steps, &init, Record::Endpoints).unwrap();
            (roll.final_state().z.data()[0] - exact).abs()
        };
        let coarse = err_at(0.01, 100);
        let fine = err_at(0.005, 200);
        let ratio = coarse / fine;
        assert!((1.7..=2.3).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn standard_normal_at_rest_balances_trace_and_score_norm() {
        let n = 10_000;
        let field = constant_field(1, vec![0.0]);
        let init = standard_normal_state(n, 1, 8, true);
        let roll = rollout(&field, 0.0, 0.01, 10, &init, Record::Endpoints).unwrap();
        let last = roll.final_state();
        let trh = last.trace_h().unwrap();
        let mean_trh: f64 = trh.data().iter().sum::<f64>() / n as f64;
        let sq: Vec<f64> = (0..n)
            .map(|b| last.s.data()[b] * last.s.data()[b])
            .collect();
        let mean_sq: f64 = sq.iter().sum::<f64>() / n as f64;
        let var_sq: f64 =
            sq.iter().map(|v| (v - mean_sq) * (v - mean_sq)).sum::<f64>() / (n as f64 - 1.0);
        let stderr = (var_sq / n as f64).sqrt();
        assert_eq!(mean_trh, -1.0);
        assert!((mean_trh + mean_sq).abs() <= 5.0 * stderr, "imbalance beyond MC error");
    }

    #[test]
    fn terminal_h_tracks_covariance_ode_inverse() {
        // Gaussian initial data under a constant linear field stays Gaussian
        // with covariance following dSigma = A Sigma + Sigma A^T; the score
        // Jacobian must track -Sigma^{-1} to first order in dt.
        let a = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.1, -0.4]).unwrap();
        let field = linear_field(a.clone());
        let h_err = |dt: f64, n_steps: usize| -> f64 {
            let init = standard_normal_state(3, 2, 9, true);
            let roll = rollout(&field, 0.0, dt, n_steps, &init, Record::Endpoints).unwrap();
            // Fine-grid covariance ODE (dt / 100).
            let fine = dt / 100.0;
            let mut sigma = Tensor::eye(2);
            for _ in 0..n_steps * 100 {
                let mut ds = Tensor::zeros(&[2, 2]);
                matmul_acc(ds.data_mut(), a.data(), sigma.data(), 2, 2, 2);
                let mut ds2 = Tensor::zeros(&[2, 2]);
                crate::tensor::matmul_a_bt_acc(ds2.data_mut(), sigma.data(), a.data(), 2, 2, 2);
                for i in 0..4 {
                    sigma.data_mut()[i] += fine * (ds.data()[i] + ds2.data()[i]);
                }
            }
            let inv = crate::tensor::spd_inverse(&sigma).unwrap();
            let h = roll.final_state().h.unwrap();
            let mut worst: f64 = 0.0;
            for b in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        worst = worst.max((h.at(b * 2 + i, j) + inv.at(i, j)).abs());
                    }
                }
            }
            worst
        };
        let coarse = h_err(0.01, 100);
        let fine = h_err(0.005, 200);
        assert!(coarse < 0.05, "coarse error {}", coarse);
        let ratio = coarse / fine;
        assert!((1.6..=2.4).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn sensitivity_score_is_identity_for_zero_field() {
        let field = constant_field(2, vec![0.0, 0.0]);
        let init = standard_normal_state(5, 2, 10, false);
        let got = score_via_sensitivity(&field, 0.0, 0.01, 30, &init.z, &init.s).unwrap();
        assert_eq!(got.s.data(), init.s.data());
        assert_eq!(got.z.data(), init.z.data());
    }

    #[test]
    fn sensitivity_score_matches_rollout_exactly_for_affine_fields() {
        // Time-varying affine field (the shrinking flow): the divergence
        // gradient vanishes, so both recursions coincide.
        let field = LinearTimeVarying::new(
            1,
            |t| Tensor::matrix(1, 1, vec![-1.0 / (2.0 * (2.0 - t))]).unwrap(),
            |_| Tensor::zeros(&[1]),
        );
        let init = standard_normal_state(50, 1, 11, false);
        let roll = rollout(&field, 0.0, 0.01, 100, &init, Record::Endpoints).unwrap();
        let got = score_via_sensitivity(&field, 0.0, 0.01, 100, &init.z, &init.s).unwrap();
        let rolled = roll.final_state();
        for b in 0..50 {
            assert!((got.s.data()[b] - rolled.s.data()[b]).abs() < 1e-10, "particle {}", b);
            assert!((got.z.data()[b] - rolled.z.data()[b]).abs() < 1e-14);
        }
    }

    #[test]
    fn sensitivity_score_discrepancy_halves_with_dt_on_mlp_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let field = MlpField::init(2, 8, &mut rng);
        let discrepancy = |dt: f64, n_steps: usize| -> f64 {
            let init = standard_normal_state(20, 2, 13, false);
            let roll = rollout(&field, 0.0, dt, n_steps, &init, Record::Endpoints).unwrap();
            let got = score_via_sensitivity(&field, 0.0, dt, n_steps, &init.z, &init.s).unwrap();
            let rolled = roll.final_state();
            got.s
                .data()
                .iter()
                .zip(rolled.s.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let coarse = discrepancy(0.01, 100);
        let fine = discrepancy(0.005, 200);
        assert!(coarse > 0.0, "MLP field should show a discretization gap");
        let ratio = coarse / fine;
        assert!((1.7..=2.3).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn sensitivity_score_flags_too_large_step_jacobian() {
        let field = linear_field(Tensor::matrix(1, 1, vec![200.0]).unwrap());
        let init = standard_normal_state(2, 1, 14, false);
        let err = score_via_sensitivity(&field, 0.0, 0.01, 10, &init.z, &init.s).unwrap_err();
        assert!(matches!(err, Error::SingularStepJacobian { .. }));
    }

    #[test]
    fn rollout_aborts_on_overflow_with_diagnostics() {
        let field = linear_field(Tensor::matrix(1, 1, vec![1e300]).unwrap());
        let init = standard_normal_state(3, 1, 15, false);
        let err = rollout(&field, 0.0, 0.01, 10, &init, Record::Endpoints).unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert!(step <= 2),
            other => panic!("expected NonFinite, got {:?}", other),
        }
    }

    #[test]
    fn rollout_counts_divergence_warnings() {
        let field = linear_field(Tensor::matrix(1, 1, vec![60.0]).unwrap());
        let init = standard_normal_state(4, 1, 16, false);
        let roll = rollout(&field, 0.0, 0.01, 1, &init, Record::Endpoints).unwrap();
        assert_eq!(roll.divergence_warnings, 4);
        assert!((roll.max_abs_dt_div - 0.6).abs() < 1e-12);
    }
}
