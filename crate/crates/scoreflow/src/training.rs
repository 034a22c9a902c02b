//! Loss assembly and training loops: cost descent on MLP velocity fields,
//! HJB-residual-regularized training of quadratic-potential fields, and
//! stagewise training over a partitioned horizon with exact particle handoff.
//!
//! All losses are built on a [`Tape`] so one reverse sweep yields exact
//! gradients of the discrete objective, including the paths through the
//! particle positions, transported log-densities, scores, and score
//! Jacobians.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{self, FlowState, Record, StepScratch};
use crate::checkpoint::RngRecord;
use crate::error::{Error, Result};
use crate::problems::{initial_flow_state, Drift, MeanFieldCost, ProblemSpec, RunningCost, TerminalCost};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::velocity::{MlpField, QuadraticPsiField, StagedMlp, StagedQuad, StagedStep, VelocityField};

/// L2 penalty weight applied to every stage after the first in
/// [`train_multistage`]: later stages refine a warm-started field, and the
/// penalty keeps the refinement from drifting far from it.
pub const LATER_STAGE_L2: f64 = 0.1;

/// Hyperparameters shared by all training loops.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Euler steps per stage; the node grid has `n_t + 1` points.
    pub n_t: usize,
    /// Particles per batch.
    pub n_z: usize,
    /// Optimizer iterations (per stage for stagewise training).
    pub iters: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Weight of the interior-residual penalty (regularized training only).
    pub lambda: f64,
    /// Weight of the squared-parameter penalty.
    pub l2_weight: f64,
    /// Seeds both the parameter stream (stream 0, used by callers that draw
    /// initial parameters) and the sample stream (stream 1, used here).
    pub seed: u64,
    /// Redraw the initial batch every iteration; otherwise one batch is
    /// drawn up front and reused.
    pub resample: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(Error::InvalidConfig("n_t must be at least 1".into()));
        }
        if self.n_z == 0 {
            return Err(Error::InvalidConfig("n_z must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.l2_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "l2_weight must be >= 0, got {}",
                self.l2_weight
            )));
        }
        Ok(())
    }
}

/// The sampling stream for a training seed. Parameter initialization draws
/// from stream 0 of the same seed, so the two never overlap.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Draws `n` particles from the problem's initial law and attaches the exact
/// initial log-density, density, and score; the score Jacobian is kept only
/// when the caller transports it.
pub fn sample_state(
    spec: &ProblemSpec,
    rng: &mut ChaCha8Rng,
    n: usize,
    with_h: bool,
) -> Result<FlowState> {
    let z0 = spec.init.sample(rng, n);
    let mut state = initial_flow_state(spec, &z0)?;
    if !with_h {
        state.h = None;
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second-moment accumulators for Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment tensors and step count, in parameter order (for checkpoints).
    pub fn parts(&self) -> (&[Tensor], &[Tensor], u64) {
        (&self.m, &self.v, self.step)
    }

    /// Rebuilds optimizer state from checkpointed parts.
    pub fn from_parts(m: Vec<Tensor>, v: Vec<Tensor>, step: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::shape(
                "adam state",
                format!("{} first moments vs {} second moments", m.len(), v.len()),
            ));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "adam state",
                    format!("moment shapes {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(AdamState { m, v, step })
    }
}

/// One bias-corrected Adam update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
/// A zero gradient leaves its parameter bitwise unchanged.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    state.step += 1;
    let bc1 = 1.0 - AdamState::BETA1.powi(state.step as i32);
    let bc2 = 1.0 - AdamState::BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        if params[i].shape() != grads[i].shape() {
            return Err(Error::shape(
                "adam step",
                format!("param {:?} vs grad {:?}", params[i].shape(), grads[i].shape()),
            ));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = AdamState::BETA1 * m[j] + (1.0 - AdamState::BETA1) * g[j];
            v[j] = AdamState::BETA2 * v[j] + (1.0 - AdamState::BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + AdamState::EPS);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Staged rollout on the tape
// ---------------------------------------------------------------------------

/// A staged velocity field: either kind can drive a taped rollout.
pub enum StagedField<'a> {
    Mlp(&'a StagedMlp),
    Quad(&'a StagedQuad),
}

impl StagedField<'_> {
    fn step(
        &self,
        tape: &mut Tape,
        j: usize,
        t: f64,
        z: Var,
        s: Var,
        h: Option<Var>,
    ) -> Result<StagedStep> {
        match self {
            StagedField::Mlp(m) => m.step(tape, t, z, s, h),
            StagedField::Quad(q) => q.step(tape, j, z, s, h),
        }
    }

    pub fn leaves(&self) -> Vec<Var> {
        match self {
            StagedField::Mlp(m) => m.leaves(),
            StagedField::Quad(q) => q.leaves(),
        }
    }
}

/// Forward-Euler transport of the batch on the tape. Node `j` holds the
/// state at `t0 + j dt`; `f[j]`/`div[j]` are the field and its divergence
/// at the start of step `j`, which is where every per-step cost term is
/// evaluated.
pub struct StagedRollout {
    pub t0: f64,
    pub dt: f64,
    /// Positions per node, `[n, d]`.
    pub z: Vec<Var>,
    /// Transported log-density per node, `[n]`.
    pub l: Vec<Var>,
    /// Transported score per node, `[n, d]`.
    pub s: Vec<Var>,
    /// Transported score Jacobian per node, `[n d, d]`, when requested.
    pub h: Option<Vec<Var>>,
    /// Field values per step, `[n, d]`.
    pub f: Vec<Var>,
    /// Field divergence per step, `[n]`.
    pub div: Vec<Var>,
}

impl StagedRollout {
    pub fn n_steps(&self) -> usize {
        self.z.len() - 1
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }
}

/// Unrolls `n_steps` Euler steps of the staged field starting from `init`.
/// The score Jacobian is transported exactly when `init.h` is present.
pub fn rollout_on_tape(
    tape: &mut Tape,
    field: &StagedField<'_>,
    init: &FlowState,
    t0: f64,
    dt: f64,
    n_steps: usize,
) -> Result<StagedRollout> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(Error::InvalidConfig("taped rollout needs at least one step".into()));
    }
    if let StagedField::Quad(q) = field {
        if q.n_nodes() < n_steps + 1 {
            return Err(Error::InvalidConfig(format!(
                "field carries {} nodes but the rollout needs {}",
                q.n_nodes(),
                n_steps + 1
            )));
        }
    }
    let with_h = init.h.is_some();
    let mut z = Vec::with_capacity(n_steps + 1);
    let mut l = Vec::with_capacity(n_steps + 1);
    let mut s = Vec::with_capacity(n_steps + 1);
    let mut h: Option<Vec<Var>> = if with_h { Some(Vec::with_capacity(n_steps + 1)) } else { None };
    let mut f = Vec::with_capacity(n_steps);
    let mut div = Vec::with_capacity(n_steps);

    z.push(tape.constant(init.z.clone()));
    l.push(tape.constant(init.l.clone()));
    s.push(tape.constant(init.s.clone()));
    if let (Some(hs), Some(h0)) = (h.as_mut(), init.h.as_ref()) {
        hs.push(tape.constant(h0.clone()));
    }

    for j in 0..n_steps {
        let t = t0 + j as f64 * dt;
        let h_cur = h.as_ref().map(|hs| hs[j]);
        let step = field.step(tape, j, t, z[j], s[j], h_cur)?;

        let zf = tape.scale(step.f, dt);
        let z_next = tape.add(z[j], zf)?;
        let ld = tape.scale(step.div, dt);
        let l_next = tape.sub(l[j], ld)?;
        let s_rhs = tape.add(step.jac_t_s, step.grad_div)?;
        let sd = tape.scale(s_rhs, dt);
        let s_next = tape.sub(s[j], sd)?;
        if let Some(hs) = h.as_mut() {
            let rhs = step.h_rhs.ok_or_else(|| {
                Error::InvalidConfig("staged step did not produce a score-Jacobian rate".into())
            })?;
            let hd = tape.scale(rhs, dt);
            let h_next = tape.add(hs[j], hd)?;
            hs.push(h_next);
        }
        z.push(z_next);
        l.push(l_next);
        s.push(s_next);
        f.push(step.f);
        div.push(step.div);
    }
    Ok(StagedRollout { t0, dt, z, l, s, h, f, div })
}

// ---------------------------------------------------------------------------
// Taped drift terms
// ---------------------------------------------------------------------------

struct MoonParts {
    recip_r: Var,
    p_plus: Var,
    p_minus: Var,
    xm3: Var,
    xp3: Var,
}

/// Shared pieces of the two-well drift: radius, softmax well weights, and
/// the shifted first coordinates, all built from tape ops so gradients flow
/// back into `z`.
fn moon_parts(tape: &mut Tape, z: Var) -> Result<MoonParts> {
    let z2 = tape.mul(z, z)?;
    let rs = tape.row_sum(z2)?;
    let rs_safe = tape.affine(rs, 1.0, 1e-300);
    let r = tape.sqrt(rs_safe);
    let recip_r = tape.recip(r);
    let x1 = tape.column(z, 0)?;
    let xm3 = tape.affine(x1, 1.0, -3.0);
    let xp3 = tape.affine(x1, 1.0, 3.0);
    let qm = tape.mul(xm3, xm3)?;
    let a_plus = tape.scale(qm, -2.0);
    let qp = tape.mul(xp3, xp3)?;
    let a_minus = tape.scale(qp, -2.0);
    let m = tape.max_elem(a_plus, a_minus)?;
    let sp = tape.sub(a_plus, m)?;
    let ep = tape.exp(sp);
    let sm = tape.sub(a_minus, m)?;
    let em = tape.exp(sm);
    let ssum = tape.add(ep, em)?;
    let inv = tape.recip(ssum);
    let p_plus = tape.mul(ep, inv)?;
    let p_minus = tape.mul(em, inv)?;
    Ok(MoonParts { recip_r, p_plus, p_minus, xm3, xp3 })
}

/// Drift `b(t, z)` for the whole batch as a tape node, `[n, d]`.
pub fn taped_drift(tape: &mut Tape, drift: &Drift, z: Var) -> Result<Var> {
    match drift {
        Drift::Linear { a } => Ok(tape.scale(z, -a)),
        Drift::DoubleMoon => {
            let d = tape.value(z).shape()[1];
            if d != 2 {
                return Err(Error::InvalidProblem(format!(
                    "two-well drift is planar; got dimension {d}"
                )));
            }
            let n = tape.value(z).shape()[0];
            let parts = moon_parts(tape, z)?;
            // Radial pull: -4 (r - 3) / r = 12 / r - 4.
            let w = tape.affine(parts.recip_r, 12.0, -4.0);
            let radial = tape.scale_rows(z, w)?;
            let tp = tape.mul(parts.xm3, parts.p_plus)?;
            let tm = tape.mul(parts.xp3, parts.p_minus)?;
            let tsum = tape.add(tp, tm)?;
            let mx = tape.scale(tsum, -8.0);
            let zero = tape.constant(Tensor::zeros(&[n]));
            let moon = tape.column_stack(&[mx, zero])?;
            tape.add(radial, moon)
        }
    }
}

/// Divergence of the drift for the whole batch as a tape node, `[n]`.
pub fn taped_drift_divergence(tape: &mut Tape, drift: &Drift, z: Var) -> Result<Var> {
    let n = tape.value(z).shape()[0];
    match drift {
        Drift::Linear { a } => {
            let d = tape.value(z).shape()[1] as f64;
            Ok(tape.constant(Tensor::new(vec![n], vec![-a * d; n])?))
        }
        Drift::DoubleMoon => {
            let d = tape.value(z).shape()[1];
            if d != 2 {
                return Err(Error::InvalidProblem(format!(
                    "two-well drift is planar; got dimension {d}"
                )));
            }
            let df = d as f64;
            let parts = moon_parts(tape, z)?;
            // -laplacian V = -(4 d - 12 (d - 1) / r + 8 - 1152 p_+ p_-).
            let radial = tape.affine(parts.recip_r, 12.0 * (df - 1.0), -4.0 * df - 8.0);
            let pp = tape.mul(parts.p_plus, parts.p_minus)?;
            let wells = tape.scale(pp, 1152.0);
            tape.add(radial, wells)
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Control cost of the rollout: left-endpoint quadrature of the running and
/// mean-field costs along each trajectory plus the terminal cost, averaged
/// over the batch. The controlled velocity is `v = f + gamma s`.
pub fn cost_loss(tape: &mut Tape, spec: &ProblemSpec, roll: &StagedRollout) -> Result<Var> {
    let n_steps = roll.n_steps();
    let n = tape.value(roll.z[0]).shape()[0];
    let gamma = spec.gamma;
    let mut acc: Option<Var> = None;
    for j in 0..n_steps {
        let gs = tape.scale(roll.s[j], gamma);
        let v = tape.add(roll.f[j], gs)?;
        let resid = match spec.running_cost {
            RunningCost::KineticEnergy => v,
            RunningCost::DriftMatching => {
                let drift = spec.drift.as_ref().ok_or_else(|| {
                    Error::InvalidProblem("drift-matching running cost needs a drift".into())
                })?;
                let b = taped_drift(tape, drift, roll.z[j])?;
                tape.sub(v, b)?
            }
        };
        let sq = tape.mul(resid, resid)?;
        let rs = tape.row_sum(sq)?;
        let mut stage = tape.scale(rs, 0.5);
        match &spec.mf_cost {
            MeanFieldCost::None => {}
            MeanFieldCost::QuadraticConfinementEntropy { beta } => {
                let zz = tape.mul(roll.z[j], roll.z[j])?;
                let q = tape.row_sum(zz)?;
                let conf = tape.scale(q, 0.5);
                let ent = tape.scale(roll.l[j], *beta);
                let mf = tape.add(conf, ent)?;
                stage = tape.add(stage, mf)?;
            }
        }
        acc = Some(match acc {
            None => stage,
            Some(prev) => tape.add(prev, stage)?,
        });
    }
    let mut per_particle = match acc {
        Some(a) => tape.scale(a, roll.dt),
        None => tape.constant(Tensor::zeros(&[n])),
    };
    let zn = roll.z[n_steps];
    match &spec.terminal_cost {
        TerminalCost::None => {}
        TerminalCost::Quadratic { weight } => {
            let zz = tape.mul(zn, zn)?;
            let q = tape.row_sum(zz)?;
            let g = tape.scale(q, *weight);
            per_particle = tape.add(per_particle, g)?;
        }
        TerminalCost::DoubleWell { c, c1, c2 } => {
            let neg1 = tape.constant(Tensor::vector(c1.iter().map(|v| -v).collect()));
            let d1 = tape.add_row_vec(zn, neg1)?;
            let d1sq = tape.mul(d1, d1)?;
            let q1 = tape.row_sum(d1sq)?;
            let neg2 = tape.constant(Tensor::vector(c2.iter().map(|v| -v).collect()));
            let d2 = tape.add_row_vec(zn, neg2)?;
            let d2sq = tape.mul(d2, d2)?;
            let q2 = tape.row_sum(d2sq)?;
            let prod = tape.mul(q1, q2)?;
            let g = tape.scale(prod, *c);
            per_particle = tape.add(per_particle, g)?;
        }
    }
    Ok(tape.mean(per_particle))
}

/// Which optimality residual the interior penalty enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HjbForm {
    /// `dpsi/dt + |grad psi|^2 / 2 + gamma^2 (tr H + |s|^2 / 2)`, the
    /// residual for kinetic-energy control toward a terminal cost.
    Kinetic,
    /// Adds `grad psi . b - gamma div b` when the running cost matches a
    /// drift `b`.
    DriftMatched,
}

/// Batch-mean interior residual at node `j` from explicitly supplied state
/// nodes. The time derivative is the centered difference of the potential
/// across the neighboring nodes, so `j` must be interior:
/// `1 <= j <= n_steps - 1`.
#[allow(clippy::too_many_arguments)]
pub fn hjb_residual_at(
    tape: &mut Tape,
    quad: &StagedQuad,
    spec: &ProblemSpec,
    j: usize,
    n_steps: usize,
    z: Var,
    s: Var,
    h: Var,
    dt: f64,
    form: HjbForm,
) -> Result<Var> {
    if j == 0 || j >= n_steps {
        return Err(Error::InvalidConfig(format!(
            "interior residual node {j} outside 1..={}",
            n_steps.saturating_sub(1)
        )));
    }
    let d = tape.value(z).shape()[1];
    let gamma = spec.gamma;
    let psi_next = quad.psi_batch(tape, j + 1, z)?;
    let psi_prev = quad.psi_batch(tape, j - 1, z)?;
    let dpsi = tape.sub(psi_next, psi_prev)?;
    let time = tape.scale(dpsi, 1.0 / (2.0 * dt));

    let a = quad.a_matrix(tape, j)?;
    let b = quad.b_vector(tape, j)?;
    let za = tape.matmul(z, a)?;
    let gpsi = tape.add_row_vec(za, b)?;
    let gsq = tape.mul(gpsi, gpsi)?;
    let grs = tape.row_sum(gsq)?;
    let grad_half = tape.scale(grs, 0.5);

    let trh = tape.block_trace(h, d)?;
    let ssq = tape.mul(s, s)?;
    let srs = tape.row_sum(ssq)?;
    let shalf = tape.scale(srs, 0.5);
    let info = tape.add(trh, shalf)?;
    let score = tape.scale(info, gamma * gamma);

    let mut resid = tape.add(time, grad_half)?;
    resid = tape.add(resid, score)?;
    if form == HjbForm::DriftMatched {
        let drift = spec
            .drift
            .as_ref()
            .ok_or_else(|| Error::InvalidProblem("drift-matched residual needs a drift".into()))?;
        let bdr = taped_drift(tape, drift, z)?;
        let crossm = tape.mul(gpsi, bdr)?;
        let cross = tape.row_sum(crossm)?;
        let divb = taped_drift_divergence(tape, drift, z)?;
        let gdiv = tape.scale(divb, gamma);
        let extra = tape.sub(cross, gdiv)?;
        resid = tape.add(resid, extra)?;
    }
    Ok(tape.mean(resid))
}

/// Batch-mean interior residual at node `j` of a taped rollout. The rollout
/// must have transported score Jacobians.
pub fn hjb_residual(
    tape: &mut Tape,
    quad: &StagedQuad,
    spec: &ProblemSpec,
    roll: &StagedRollout,
    j: usize,
    form: HjbForm,
) -> Result<Var> {
    let h = roll
        .h
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("interior residual needs transported score Jacobians".into()))?;
    let n_steps = roll.n_steps();
    if j == 0 || j >= n_steps {
        return Err(Error::InvalidConfig(format!(
            "interior residual node {j} outside 1..={}",
            n_steps.saturating_sub(1)
        )));
    }
    hjb_residual_at(tape, quad, spec, j, n_steps, roll.z[j], roll.s[j], h[j], roll.dt, form)
}

/// `cost + lambda * sum_j |hjb_j| dt + l2_weight * |theta|^2`, all on the
/// tape. With `lambda = 0` and `l2_weight = 0` the cost node is returned
/// unchanged.
pub fn total_loss(
    tape: &mut Tape,
    cost: Var,
    hjb: &[Var],
    dt: f64,
    lambda: f64,
    l2_weight: f64,
    leaves: &[Var],
) -> Result<Var> {
    let mut total = cost;
    if lambda != 0.0 && !hjb.is_empty() {
        let mut acc: Option<Var> = None;
        for &r in hjb {
            let a = tape.abs(r);
            acc = Some(match acc {
                None => a,
                Some(prev) => tape.add(prev, a)?,
            });
        }
        let pen = tape.scale(acc.expect("hjb list is non-empty"), lambda * dt);
        total = tape.add(total, pen)?;
    }
    if l2_weight != 0.0 && !leaves.is_empty() {
        let mut acc: Option<Var> = None;
        for &w in leaves {
            let sq = tape.mul(w, w)?;
            let ssum = tape.sum(sq);
            acc = Some(match acc {
                None => ssum,
                Some(prev) => tape.add(prev, ssum)?,
            });
        }
        let pen = tape.scale(acc.expect("leaf list is non-empty"), l2_weight);
        total = tape.add(total, pen)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

/// One optimizer iteration's loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRecord {
    pub iter: usize,
    pub loss_cost: f64,
    /// `sum_j |hjb_j| dt` before the `lambda` weighting; zero for plain
    /// cost training.
    pub loss_hjb: f64,
    pub loss_total: f64,
}

/// Outcome of one training loop.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub cost_curve: Vec<CostRecord>,
    /// Mean Frobenius distance of the quadratic coefficients from the known
    /// optimum, when the problem has one.
    pub err_a: Option<f64>,
    /// Same for the linear coefficients.
    pub err_b: Option<f64>,
    /// Optimizer state after the last step, for checkpointing.
    pub adam: AdamState,
    /// Sampling-stream position after the last step, for checkpointing.
    pub sampler: RngRecord,
}

enum InitMode<'a> {
    /// Draw a fresh batch from the initial law every iteration.
    Fresh,
    /// Reuse one fixed state every iteration.
    Fixed(&'a FlowState),
}

fn chunk_size(n: usize, hidden: usize) -> usize {
    n.min(64.max(32768 / hidden.max(1)))
}

fn slice_state(state: &FlowState, offset: usize, take: usize) -> Result<FlowState> {
    let d = state.dim();
    let z = Tensor::new(
        vec![take, d],
        state.z.data()[offset * d..(offset + take) * d].to_vec(),
    )?;
    let l = Tensor::vector(state.l.data()[offset..offset + take].to_vec());
    let lt = Tensor::vector(state.lt.data()[offset..offset + take].to_vec());
    let s = Tensor::new(
        vec![take, d],
        state.s.data()[offset * d..(offset + take) * d].to_vec(),
    )?;
    let h = match state.h.as_ref() {
        Some(h) => Some(Tensor::new(
            vec![take * d, d],
            h.data()[offset * d * d..(offset + take) * d * d].to_vec(),
        )?),
        None => None,
    };
    FlowState::new(z, l, lt, s, h)
}

/// Plain cost-descent training of an MLP field over `[0, t_end]`
/// (Adam on the taped rollout cost; no interior residual).
pub fn train(spec: &ProblemSpec, field: &mut MlpField, config: &TrainConfig) -> Result<RunReport> {
    config.validate()?;
    if field.dim() != spec.dim {
        return Err(Error::shape(
            "train",
            format!("field dimension {} vs problem dimension {}", field.dim(), spec.dim),
        ));
    }
    let mut rng = sampling_rng(config.seed);
    let mut adam = AdamState::new(&field.params());
    let fixed = if config.resample {
        None
    } else {
        Some(sample_state(spec, &mut rng, config.n_z, false)?)
    };
    let init = match fixed.as_ref() {
        Some(st) => InitMode::Fixed(st),
        None => InitMode::Fresh,
    };
    train_window(
        spec,
        field,
        config,
        &mut adam,
        &mut rng,
        0.0,
        spec.t_end,
        config.l2_weight,
        init,
    )
}

/// The shared cost-descent loop over one time window. Gradients are
/// accumulated over particle chunks (exact by linearity of the batch mean),
/// which bounds tape memory for wide fields and large batches.
#[allow(clippy::too_many_arguments)]
fn train_window(
    spec: &ProblemSpec,
    field: &mut MlpField,
    config: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    t0: f64,
    t1: f64,
    l2_weight: f64,
    init: InitMode<'_>,
) -> Result<RunReport> {
    if !(t1 > t0) {
        return Err(Error::InvalidConfig(format!("window [{t0}, {t1}] is empty")));
    }
    let n_t = config.n_t;
    let dt = (t1 - t0) / n_t as f64;
    let mut curve = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let fresh;
        let state: &FlowState = match &init {
            InitMode::Fixed(st) => st,
            InitMode::Fresh => {
                fresh = sample_state(spec, rng, config.n_z, false)?;
                &fresh
            }
        };
        let n = state.n();
        let chunk = chunk_size(n, field.hidden());
        let mut grads: Vec<Tensor> =
            field.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut cost_val = 0.0;
        let mut total_val = 0.0;
        let mut offset = 0;
        while offset < n {
            let take = chunk.min(n - offset);
            let weight = take as f64 / n as f64;
            let sub = slice_state(state, offset, take)?;
            let mut tape = Tape::new();
            let staged = StagedMlp::stage(&mut tape, field)?;
            let leaves = staged.leaves();
            let roll =
                rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &sub, t0, dt, n_t)?;
            let cost = cost_loss(&mut tape, spec, &roll)?;
            let total = total_loss(&mut tape, cost, &[], dt, 0.0, l2_weight, &leaves)?;
            cost_val += weight * tape.value(cost).item()?;
            total_val += weight * tape.value(total).item()?;
            let gradients = tape.backward(total)?;
            for (acc, leaf) in grads.iter_mut().zip(&leaves) {
                if let Some(g) = gradients.for_var(*leaf) {
                    acc.axpy(weight, &g)?;
                }
            }
            offset += take;
        }
        if !cost_val.is_finite() || !total_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                detail: format!("cost {cost_val}, total {total_val}"),
            });
        }
        curve.push(CostRecord { iter, loss_cost: cost_val, loss_hjb: 0.0, loss_total: total_val });
        let mut params = field.params_mut();
        adam_step(&mut params, &grads, adam, config.lr)?;
    }
    Ok(RunReport {
        cost_curve: curve,
        err_a: None,
        err_b: None,
        adam: adam.clone(),
        sampler: RngRecord::capture(config.seed, rng),
    })
}

/// Interior-residual-regularized training of a quadratic potential over
/// `[0, t_end]`. The rollout transports score Jacobians, the loss is
/// `cost + lambda sum_j |residual_j| dt + l2 |theta|^2` on the full batch,
/// and the report carries the coefficient errors against the known optimum
/// when the problem has one.
pub fn train_regularized(
    spec: &ProblemSpec,
    psi: &mut QuadraticPsiField,
    config: &TrainConfig,
    form: HjbForm,
) -> Result<RunReport> {
    config.validate()?;
    let n_t = config.n_t;
    let dt = spec.t_end / n_t as f64;
    if psi.n_nodes() != n_t + 1 {
        return Err(Error::InvalidConfig(format!(
            "field carries {} nodes but the grid has {}",
            psi.n_nodes(),
            n_t + 1
        )));
    }
    if psi.t_start().abs() > 1e-12 || (psi.dt() - dt).abs() > 1e-9 * dt {
        return Err(Error::InvalidConfig(format!(
            "field grid starts at {} with step {} but training uses start 0 with step {}",
            psi.t_start(),
            psi.dt(),
            dt
        )));
    }
    let drift_coeff = match form {
        HjbForm::Kinetic => 0.0,
        HjbForm::DriftMatched => match spec.drift.as_ref() {
            Some(Drift::Linear { a }) => -a,
            Some(Drift::DoubleMoon) => {
                return Err(Error::InvalidProblem(
                    "drift-matched quadratic-potential training needs a linear drift".into(),
                ))
            }
            None => {
                return Err(Error::InvalidProblem(
                    "drift-matched training needs a problem with a drift".into(),
                ))
            }
        },
    };
    let mut rng = sampling_rng(config.seed);
    let mut adam = AdamState::new(&psi.params());
    let fixed = if config.resample {
        None
    } else {
        Some(sample_state(spec, &mut rng, config.n_z, true)?)
    };
    let mut curve = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let fresh;
        let state: &FlowState = match fixed.as_ref() {
            Some(st) => st,
            None => {
                fresh = sample_state(spec, &mut rng, config.n_z, true)?;
                &fresh
            }
        };
        let mut tape = Tape::new();
        let staged = StagedQuad::stage(&mut tape, psi, drift_coeff)?;
        let leaves = staged.leaves();
        let roll = rollout_on_tape(&mut tape, &StagedField::Quad(&staged), state, 0.0, dt, n_t)?;
        let cost = cost_loss(&mut tape, spec, &roll)?;
        let mut hjb = Vec::with_capacity(n_t.saturating_sub(1));
        for j in 1..n_t {
            hjb.push(hjb_residual(&mut tape, &staged, spec, &roll, j, form)?);
        }
        let total = total_loss(&mut tape, cost, &hjb, dt, config.lambda, config.l2_weight, &leaves)?;
        let cost_val = tape.value(cost).item()?;
        let mut hjb_val = 0.0;
        for &r in &hjb {
            hjb_val += tape.value(r).item()?.abs() * dt;
        }
        let total_val = tape.value(total).item()?;
        if !total_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                detail: format!("cost {cost_val}, residual term {hjb_val}"),
            });
        }
        curve.push(CostRecord { iter, loss_cost: cost_val, loss_hjb: hjb_val, loss_total: total_val });
        let gradients = tape.backward(total)?;
        let mut grads = Vec::with_capacity(leaves.len());
        for (leaf, param) in leaves.iter().zip(psi.params()) {
            grads.push(gradients.for_var(*leaf).unwrap_or_else(|| Tensor::zeros(param.shape())));
        }
        let mut params = psi.params_mut();
        adam_step(&mut params, &grads, &mut adam, config.lr)?;
    }
    let (err_a, err_b) = psi_parameter_errors(spec, psi);
    Ok(RunReport {
        cost_curve: curve,
        err_a,
        err_b,
        adam: adam.clone(),
        sampler: RngRecord::capture(config.seed, &rng),
    })
}

/// Node-averaged Frobenius distances of the quadratic/linear coefficients
/// from the problem's known optimal potential, when it has one. The scalar
/// offset is a gauge freedom of the velocity field and is not compared.
pub fn psi_parameter_errors(
    spec: &ProblemSpec,
    psi: &QuadraticPsiField,
) -> (Option<f64>, Option<f64>) {
    let Some(analytic) = spec.analytic.as_ref() else {
        return (None, None);
    };
    let (Some(pa), Some(pb)) = (analytic.psi_a.as_ref(), analytic.psi_b.as_ref()) else {
        return (None, None);
    };
    let n_nodes = psi.n_nodes();
    let mut acc_a = 0.0;
    let mut acc_b = 0.0;
    for j in 0..n_nodes {
        let t = psi.t_start() + j as f64 * psi.dt();
        let mut da = psi.a_matrix(j);
        let _ = da.axpy(-1.0, &pa(t));
        acc_a += da.norm();
        let mut db = psi.b_vector(j);
        let _ = db.axpy(-1.0, &pb(t));
        acc_b += db.norm();
    }
    (Some(acc_a / n_nodes as f64), Some(acc_b / n_nodes as f64))
}

/// Outcome of one stage of [`train_multistage`]: the report plus the exact
/// initial and terminal batch states, so consecutive stages hand particles
/// off without re-sampling.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub t_start: f64,
    pub t_end: f64,
    pub report: RunReport,
    pub initial: FlowState,
    pub terminal: FlowState,
}

/// Stagewise cost training over the problem's time partition. The first
/// stage trains like [`train`]; each later stage warm-starts from the same
/// field, takes the previous stage's terminal particles as its fixed batch
/// (no resampling), and adds an L2 penalty of [`LATER_STAGE_L2`].
pub fn train_multistage(
    spec: &ProblemSpec,
    field: &mut MlpField,
    config: &TrainConfig,
) -> Result<Vec<StageOutcome>> {
    config.validate()?;
    if field.dim() != spec.dim {
        return Err(Error::shape(
            "train",
            format!("field dimension {} vs problem dimension {}", field.dim(), spec.dim),
        ));
    }
    if spec.stages.is_empty() {
        return Err(Error::InvalidProblem("problem has no stages".into()));
    }
    let mut rng = sampling_rng(config.seed);
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(spec.stages.len());
    let mut carry: Option<FlowState> = None;
    for (k, &(a, b)) in spec.stages.iter().enumerate() {
        let mut adam = AdamState::new(&field.params());
        let l2 = if k == 0 { config.l2_weight } else { LATER_STAGE_L2 };
        let mut stage_init: Option<FlowState> = None;
        let report = if k == 0 {
            if config.resample {
                train_window(spec, field, config, &mut adam, &mut rng, a, b, l2, InitMode::Fresh)?
            } else {
                let st = sample_state(spec, &mut rng, config.n_z, false)?;
                let rep = train_window(
                    spec,
                    field,
                    config,
                    &mut adam,
                    &mut rng,
                    a,
                    b,
                    l2,
                    InitMode::Fixed(&st),
                )?;
                stage_init = Some(st);
                rep
            }
        } else {
            let st = carry.take().expect("previous stage produced a terminal state");
            let rep = train_window(
                spec,
                field,
                config,
                &mut adam,
                &mut rng,
                a,
                b,
                l2,
                InitMode::Fixed(&st),
            )?;
            stage_init = Some(st);
            rep
        };
        // Handoff: push the stage's batch through the trained field. When the
        // stage resampled every iteration, the handoff batch is one more draw.
        let initial = match stage_init {
            Some(st) => st,
            None => sample_state(spec, &mut rng, config.n_z, false)?,
        };
        let dt = (b - a) / config.n_t as f64;
        let ro = dynamics::rollout(field, a, dt, config.n_t, &initial, Record::Endpoints)?;
        let terminal = ro.final_state();
        carry = Some(terminal.clone());
        outcomes.push(StageOutcome { t_start: a, t_end: b, report, initial, terminal });
    }
    Ok(outcomes)
}

// ---------------------------------------------------------------------------
// Tape-free cost evaluation
// ---------------------------------------------------------------------------

/// Evaluates the rollout cost of a field without building a tape: the same
/// left-endpoint quadrature as [`cost_loss`], streamed step by step so a
/// large evaluation batch costs no path memory.
pub fn evaluate_cost(
    spec: &ProblemSpec,
    field: &dyn VelocityField,
    init: &FlowState,
    t0: f64,
    dt: f64,
    n_steps: usize,
) -> Result<f64> {
    let d = spec.dim;
    if field.dim() != d || init.dim() != d {
        return Err(Error::shape(
            "cost evaluation",
            format!("problem dim {}, field dim {}, state dim {}", d, field.dim(), init.dim()),
        ));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let mut state = init.clone();
    let n = state.n();
    let mut scratch = StepScratch::new(d);
    let mut acc = vec![0.0; n];
    let mut fbuf = vec![0.0; d];
    let mut vbuf = vec![0.0; d];
    for j in 0..n_steps {
        let t = t0 + j as f64 * dt;
        for b in 0..n {
            let zb = &state.z.data()[b * d..(b + 1) * d];
            let sb = &state.s.data()[b * d..(b + 1) * d];
            field.velocity_into(t, zb, &mut fbuf)?;
            for i in 0..d {
                vbuf[i] = fbuf[i] + spec.gamma * sb[i];
            }
            let mut stage = spec.running_cost_value(t, zb, &vbuf);
            if !spec.mf_cost.is_zero() {
                let rho_input =
                    if spec.mf_cost.uses_log_density() { state.l.data()[b] } else { state.lt.data()[b] };
                stage += spec.mf_cost_value(zb, rho_input);
            }
            acc[b] += stage * dt;
        }
        dynamics::euler_step(field, t, dt, &mut state, &mut scratch, j)?;
    }
    if !spec.terminal_cost.is_zero() {
        for b in 0..n {
            let zb = &state.z.data()[b * d..(b + 1) * d];
            acc[b] += spec.terminal_cost_value(zb, state.lt.data()[b]);
        }
    }
    Ok(acc.iter().sum::<f64>() / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{
        make_double_moon, make_lq_entropy, make_ou_flow_matching_default, make_rwpo,
        GaussianInit,
    };
    use crate::velocity::LinearTimeVarying;
    use rand::Rng;

    fn base_config() -> TrainConfig {
        TrainConfig {
            n_t: 10,
            n_z: 16,
            iters: 3,
            lr: 0.01,
            lambda: 0.0,
            l2_weight: 0.0,
            seed: 7,
            resample: false,
        }
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = base_config();
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { n_t: 0, ..good.clone() },
            TrainConfig { n_z: 0, ..good.clone() },
            TrainConfig { lr: 0.0, ..good.clone() },
            TrainConfig { lr: f64::NAN, ..good.clone() },
            TrainConfig { lambda: -1.0, ..good.clone() },
            TrainConfig { l2_weight: -0.1, ..good.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn adam_matches_hand_computed_steps() {
        // First step moves each coordinate by ~lr * sign(g); a zero gradient
        // leaves its parameter bitwise unchanged; a repeated gradient makes
        // the bias-corrected second step ~lr exactly.
        let mut p = Tensor::vector(vec![1.0, -0.5, 0.25]);
        let g = Tensor::vector(vec![3.0, -7.0, 0.0]);
        let mut state = AdamState::new(&[&p]);
        let before = p.data().to_vec();
        {
            let mut params = [&mut p];
            adam_step(&mut params, std::slice::from_ref(&g), &mut state, 0.01).unwrap();
        }
        assert!((p.data()[0] - (before[0] - 0.01)).abs() < 1e-9);
        assert!((p.data()[1] - (before[1] + 0.01)).abs() < 1e-9);
        assert_eq!(p.data()[2].to_bits(), before[2].to_bits());
        let after_first = p.data().to_vec();
        {
            let mut params = [&mut p];
            adam_step(&mut params, std::slice::from_ref(&g), &mut state, 0.01).unwrap();
        }
        assert!((p.data()[0] - (after_first[0] - 0.01)).abs() < 1e-9);
        assert!((p.data()[1] - (after_first[1] + 0.01)).abs() < 1e-9);
        assert_eq!(state.step_count(), 2);

        // Mismatched slot counts are rejected.
        let mut q = Tensor::vector(vec![0.0]);
        let mut params = [&mut q];
        assert!(adam_step(&mut params, &[], &mut state, 0.01).is_err());
    }

    #[test]
    fn total_loss_matches_hand_examples() {
        // cost = 1, residuals [-2, 3], dt = 0.01, lambda = 0.1:
        // total = 1 + 0.1 * 5 * 0.01 = 1.005.
        let mut tape = Tape::new();
        let cost = tape.constant(Tensor::scalar(1.0));
        let r1 = tape.constant(Tensor::scalar(-2.0));
        let r2 = tape.constant(Tensor::scalar(3.0));
        let total = total_loss(&mut tape, cost, &[r1, r2], 0.01, 0.1, 0.0, &[]).unwrap();
        assert!((tape.value(total).item().unwrap() - 1.005).abs() < 1e-15);

        // With both weights zero the cost node itself is returned.
        let same = total_loss(&mut tape, cost, &[r1, r2], 0.01, 0.0, 0.0, &[]).unwrap();
        assert_eq!(same.id(), cost.id());

        // Pure parameter penalty: theta = [1, 1], weight 0.1 -> 0.2.
        let mut tape = Tape::new();
        let cost = tape.constant(Tensor::scalar(0.0));
        let theta = tape.leaf(Tensor::vector(vec![1.0, 1.0]));
        let total = total_loss(&mut tape, cost, &[], 0.01, 0.0, 0.1, &[theta]).unwrap();
        assert!((tape.value(total).item().unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn taped_moon_drift_matches_plain() {
        let drift = Drift::DoubleMoon;
        let points = [
            [2.9, 0.4],
            [-3.1, -0.2],
            [0.5, 2.0],
            [1e-8, 0.0],
            [-0.7, -2.8],
            [3.0, 0.0],
        ];
        let n = points.len();
        let mut flat = Vec::with_capacity(n * 2);
        for p in &points {
            flat.extend_from_slice(p);
        }
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![n, 2], flat).unwrap());
        let b = taped_drift(&mut tape, &drift, z).unwrap();
        let div = taped_drift_divergence(&mut tape, &drift, z).unwrap();
        let mut expected = vec![0.0; 2];
        for (i, p) in points.iter().enumerate() {
            drift.eval_into(0.0, p, &mut expected);
            for k in 0..2 {
                let got = tape.value(b).data()[i * 2 + k];
                assert!(
                    (got - expected[k]).abs() <= 1e-10 * (1.0 + expected[k].abs()),
                    "drift mismatch at {p:?}: {got} vs {}",
                    expected[k]
                );
            }
            let got = tape.value(div).data()[i];
            let want = drift.divergence(0.0, p);
            assert!(
                (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
                "divergence mismatch at {p:?}: {got} vs {want}"
            );
        }

        // Linear drift: b = -a z with constant divergence -a d.
        let lin = Drift::Linear { a: 1.7 };
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let b = taped_drift(&mut tape, &lin, z).unwrap();
        let div = taped_drift_divergence(&mut tape, &lin, z).unwrap();
        assert!((tape.value(b).data()[0] + 1.7).abs() < 1e-15);
        assert!((tape.value(b).data()[3] - -1.7 * 3.0).abs() < 1e-15);
        for i in 0..2 {
            assert!((tape.value(div).data()[i] + 1.7 * 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn staged_rollout_matches_plain_dynamics() {
        // MLP without score Jacobians.
        let spec = make_rwpo(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = MlpField::init(2, 6, &mut rng);
        let mut state = sample_state(&spec, &mut rng, 5, false).unwrap();
        state.h = None;
        let (t0, dt, n_t) = (0.0, 0.03, 7);
        let plain = dynamics::rollout(&field, t0, dt, n_t, &state, Record::Path).unwrap();
        let mut tape = Tape::new();
        let staged = StagedMlp::stage(&mut tape, &field).unwrap();
        let roll =
            rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &state, t0, dt, n_t).unwrap();
        for j in 0..=n_t {
            for (a, b) in tape.value(roll.z[j]).data().iter().zip(plain.z[j].data()) {
                assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()));
            }
            for (a, b) in tape.value(roll.l[j]).data().iter().zip(plain.l[j].data()) {
                assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()));
            }
            for (a, b) in tape.value(roll.s[j]).data().iter().zip(plain.s[j].data()) {
                assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()));
            }
        }

        // Quadratic potential plus linear drift, with score Jacobians.
        let mut quad = QuadraticPsiField::zeros(2, n_t, t0, dt);
        for x in quad.params_mut().into_iter().flat_map(|p| p.data_mut().iter_mut()) {
            *x = rng.gen_range(-0.3..0.3);
        }
        let coeff = -0.8;
        let state_h = sample_state(&spec, &mut rng, 4, true).unwrap();
        let wrapped = crate::velocity::WithLinearDrift { base: quad.clone(), coeff };
        let plain = dynamics::rollout(&wrapped, t0, dt, n_t, &state_h, Record::Full).unwrap();
        let mut tape = Tape::new();
        let staged = StagedQuad::stage(&mut tape, &quad, coeff).unwrap();
        let roll =
            rollout_on_tape(&mut tape, &StagedField::Quad(&staged), &state_h, t0, dt, n_t).unwrap();
        let h_nodes = roll.h.as_ref().unwrap();
        let h_path = plain.h_path.as_ref().unwrap();
        for j in 0..=n_t {
            for (a, b) in tape.value(roll.z[j]).data().iter().zip(plain.z[j].data()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
            for (a, b) in tape.value(roll.s[j]).data().iter().zip(plain.s[j].data()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
            for (a, b) in tape.value(h_nodes[j]).data().iter().zip(h_path[j].data()) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn cost_loss_hand_examples() {
        // Zero field, zero score, kinetic running cost only: cost is exactly 0.
        let spec = ProblemSpec {
            name: "kinetic-only",
            dim: 1,
            gamma: 0.7,
            t_end: 1.0,
            stages: vec![(0.0, 1.0)],
            running_cost: RunningCost::KineticEnergy,
            mf_cost: MeanFieldCost::None,
            terminal_cost: TerminalCost::None,
            drift: None,
            init: GaussianInit::isotropic(1, 0.0, 1.0).unwrap(),
            analytic: None,
        };
        let field = MlpField::zeros(1, 4);
        let state = FlowState::new(
            Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            Tensor::vector(vec![-0.3]),
            Tensor::vector(vec![0.7]),
            Tensor::matrix(1, 1, vec![0.0]).unwrap(),
            None,
        )
        .unwrap();
        let mut tape = Tape::new();
        let staged = StagedMlp::stage(&mut tape, &field).unwrap();
        let roll =
            rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &state, 0.0, 0.25, 4).unwrap();
        let cost = cost_loss(&mut tape, &spec, &roll).unwrap();
        assert_eq!(tape.value(cost).item().unwrap(), 0.0);

        // Quadratic terminal cost |x|^2 / 2 on a particle frozen at 2: cost 2.
        let spec = make_rwpo(1, 1.0).unwrap();
        let mut tape = Tape::new();
        let staged = StagedMlp::stage(&mut tape, &field).unwrap();
        let roll =
            rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &state, 0.0, 0.25, 4).unwrap();
        let cost = cost_loss(&mut tape, &spec, &roll).unwrap();
        assert_eq!(tape.value(cost).item().unwrap(), 2.0);

        // Streamed evaluation agrees, and with zero steps only the terminal
        // cost remains.
        let val = evaluate_cost(&spec, &field, &state, 0.0, 0.25, 4).unwrap();
        assert_eq!(val, 2.0);
        let val = evaluate_cost(&spec, &field, &state, 0.0, 0.25, 0).unwrap();
        assert_eq!(val, 2.0);
    }

    #[test]
    fn streamed_cost_matches_taped_cost() {
        // Random fields on problems covering all three cost shapes: kinetic
        // with terminal cost, drift matching, and confinement plus entropy.
        let specs = [
            make_rwpo(2, 1.0).unwrap(),
            make_ou_flow_matching_default(2, 1.0).unwrap(),
            make_lq_entropy(2, 0.1).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for spec in &specs {
            let field = MlpField::init(spec.dim, 8, &mut rng);
            let state = sample_state(spec, &mut rng, 16, false).unwrap();
            let (t0, dt, n_t) = (0.0, 0.05, 9);
            let mut tape = Tape::new();
            let staged = StagedMlp::stage(&mut tape, &field).unwrap();
            let roll =
                rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &state, t0, dt, n_t)
                    .unwrap();
            let cost = cost_loss(&mut tape, spec, &roll).unwrap();
            let taped = tape.value(cost).item().unwrap();
            let streamed = evaluate_cost(spec, &field, &state, t0, dt, n_t).unwrap();
            assert!(
                (taped - streamed).abs() <= 1e-10 * (1.0 + taped.abs()),
                "{}: taped {taped} vs streamed {streamed}",
                spec.name
            );
        }
    }

    /// Central-difference check of `d total / d theta` for an MLP cost loss.
    fn fd_check_mlp(spec: &ProblemSpec, l2: f64, seed: u64) {
        let d = spec.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut field = MlpField::init(d, 3, &mut rng);
        let state = sample_state(spec, &mut rng, 4, false).unwrap();
        let (t0, dt, n_t) = (0.0, 0.2, 5);
        let loss = |field: &MlpField| -> f64 {
            let mut tape = Tape::new();
            let staged = StagedMlp::stage(&mut tape, field).unwrap();
            let roll =
                rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &state, t0, dt, n_t)
                    .unwrap();
            let cost = cost_loss(&mut tape, spec, &roll).unwrap();
            let leaves = staged.leaves();
            let total = total_loss(&mut tape, cost, &[], dt, 0.0, l2, &leaves).unwrap();
            tape.value(total).item().unwrap()
        };
        let grads = {
            let mut tape = Tape::new();
            let staged = StagedMlp::stage(&mut tape, &field).unwrap();
            let leaves = staged.leaves();
            let roll =
                rollout_on_tape(&mut tape, &StagedField::Mlp(&staged), &state, t0, dt, n_t)
                    .unwrap();
            let cost = cost_loss(&mut tape, spec, &roll).unwrap();
            let total = total_loss(&mut tape, cost, &[], dt, 0.0, l2, &leaves).unwrap();
            let g = tape.backward(total).unwrap();
            leaves
                .iter()
                .zip(field.params())
                .map(|(leaf, p)| g.for_var(*leaf).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect::<Vec<_>>()
        };
        for (pi, grad) in grads.iter().enumerate() {
            for ci in 0..grad.numel() {
                let orig = field.params()[pi].data()[ci];
                let h = 1e-5 * (1.0 + orig.abs());
                field.params_mut()[pi].data_mut()[ci] = orig + h;
                let up = loss(&field);
                field.params_mut()[pi].data_mut()[ci] = orig - h;
                let down = loss(&field);
                field.params_mut()[pi].data_mut()[ci] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grad.data()[ci];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-5,
                    "{} param {pi}[{ci}]: fd {fd} vs backward {an}",
                    spec.name
                );
            }
        }
    }

    #[test]
    fn fd_gradient_matches_backward_for_mlp_cost() {
        fd_check_mlp(&make_rwpo(1, 1.0).unwrap(), 0.3, 31);
        // The entropy term differentiates through the transported
        // log-density; the drift-matching term through the particle path.
        fd_check_mlp(&make_lq_entropy(1, 0.1).unwrap(), 0.0, 37);
        fd_check_mlp(&make_ou_flow_matching_default(1, 1.0).unwrap(), 0.1, 41);
    }

    /// Central-difference check for the regularized quadratic-potential loss.
    fn fd_check_quad(spec: &ProblemSpec, form: HjbForm, seed: u64) {
        let d = spec.dim;
        let (t0, n_t) = (0.0, 6);
        let dt = spec.t_end / n_t as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut quad = QuadraticPsiField::zeros(d, n_t, t0, dt);
        for x in quad.params_mut().into_iter().flat_map(|p| p.data_mut().iter_mut()) {
            *x = rng.gen_range(-0.3..0.3);
        }
        let coeff = match (form, spec.drift.as_ref()) {
            (HjbForm::DriftMatched, Some(Drift::Linear { a })) => -a,
            _ => 0.0,
        };
        let state = sample_state(spec, &mut rng, 5, true).unwrap();
        let (lambda, l2) = (0.5, 0.1);
        let loss = |quad: &QuadraticPsiField| -> (f64, f64) {
            let mut tape = Tape::new();
            let staged = StagedQuad::stage(&mut tape, quad, coeff).unwrap();
            let leaves = staged.leaves();
            let roll =
                rollout_on_tape(&mut tape, &StagedField::Quad(&staged), &state, t0, dt, n_t)
                    .unwrap();
            let cost = cost_loss(&mut tape, spec, &roll).unwrap();
            let mut hjb = Vec::new();
            let mut min_abs = f64::INFINITY;
            for j in 1..n_t {
                let r = hjb_residual(&mut tape, &staged, spec, &roll, j, form).unwrap();
                min_abs = min_abs.min(tape.value(r).item().unwrap().abs());
                hjb.push(r);
            }
            let total = total_loss(&mut tape, cost, &hjb, dt, lambda, l2, &leaves).unwrap();
            (tape.value(total).item().unwrap(), min_abs)
        };
        // Keep well clear of the |residual| kink so central differences are
        // trustworthy.
        let (_, min_abs) = loss(&quad);
        assert!(min_abs > 1e-3, "residuals too close to the kink: {min_abs}");
        let grads = {
            let mut tape = Tape::new();
            let staged = StagedQuad::stage(&mut tape, &quad, coeff).unwrap();
            let leaves = staged.leaves();
            let roll =
                rollout_on_tape(&mut tape, &StagedField::Quad(&staged), &state, t0, dt, n_t)
                    .unwrap();
            let cost = cost_loss(&mut tape, spec, &roll).unwrap();
            let mut hjb = Vec::new();
            for j in 1..n_t {
                hjb.push(hjb_residual(&mut tape, &staged, spec, &roll, j, form).unwrap());
            }
            let total = total_loss(&mut tape, cost, &hjb, dt, lambda, l2, &leaves).unwrap();
            let g = tape.backward(total).unwrap();
            leaves
                .iter()
                .zip(quad.params())
                .map(|(leaf, p)| g.for_var(*leaf).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect::<Vec<_>>()
        };
        for (pi, grad) in grads.iter().enumerate() {
            for ci in 0..grad.numel() {
                let orig = quad.params()[pi].data()[ci];
                let h = 1e-5 * (1.0 + orig.abs());
                quad.params_mut()[pi].data_mut()[ci] = orig + h;
                let (up, _) = loss(&quad);
                quad.params_mut()[pi].data_mut()[ci] = orig - h;
                let (down, _) = loss(&quad);
                quad.params_mut()[pi].data_mut()[ci] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grad.data()[ci];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{} param {pi}[{ci}]: fd {fd} vs backward {an}",
                    spec.name
                );
            }
        }
    }

    #[test]
    fn fd_gradient_matches_backward_for_regularized_loss() {
        fd_check_quad(&make_rwpo(1, 1.0).unwrap(), HjbForm::Kinetic, 43);
        fd_check_quad(&make_ou_flow_matching_default(1, 1.0).unwrap(), HjbForm::DriftMatched, 47);
    }

    #[test]
    fn hjb_residual_hand_examples() {
        // Zero potential, zero scores: every term vanishes exactly.
        let spec = make_rwpo(1, 1.0).unwrap();
        let n_t = 4;
        let dt = 0.25;
        let quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
        let n = 3;
        let mut tape = Tape::new();
        let staged = StagedQuad::stage(&mut tape, &quad, 0.0).unwrap();
        let z = tape.constant(Tensor::matrix(n, 1, vec![0.4, -1.0, 2.0]).unwrap());
        let s0 = tape.constant(Tensor::zeros(&[n, 1]));
        let h0 = tape.constant(Tensor::zeros(&[n, 1]));
        for j in 1..n_t {
            let r = hjb_residual_at(&mut tape, &staged, &spec, j, n_t, z, s0, h0, dt, HjbForm::Kinetic)
                .unwrap();
            assert_eq!(tape.value(r).item().unwrap(), 0.0);
        }
        // Interior-only indices.
        assert!(hjb_residual_at(&mut tape, &staged, &spec, 0, n_t, z, s0, h0, dt, HjbForm::Kinetic)
            .is_err());
        assert!(hjb_residual_at(&mut tape, &staged, &spec, n_t, n_t, z, s0, h0, dt, HjbForm::Kinetic)
            .is_err());

        // psi(t, x) = t: the centered time difference is exactly 1.
        let mut quad_t = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
        for j in 0..=n_t {
            quad_t.params_mut()[2].data_mut()[j] = j as f64 * dt;
        }
        let mut tape = Tape::new();
        let staged = StagedQuad::stage(&mut tape, &quad_t, 0.0).unwrap();
        let z = tape.constant(Tensor::matrix(n, 1, vec![0.4, -1.0, 2.0]).unwrap());
        let s0 = tape.constant(Tensor::zeros(&[n, 1]));
        let h0 = tape.constant(Tensor::zeros(&[n, 1]));
        let r = hjb_residual_at(&mut tape, &staged, &spec, 2, n_t, z, s0, h0, dt, HjbForm::Kinetic)
            .unwrap();
        assert_eq!(tape.value(r).item().unwrap(), 1.0);

        // Standard normal batch with exact scores and zero potential:
        // residual ~ gamma^2 (tr H + |s|^2 / 2) ~ -gamma^2 / 2.
        let spec_g = make_rwpo(1, 0.9).unwrap();
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let z_data: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let s_data: Vec<f64> = z_data.iter().map(|v| -v).collect();
        let mut tape = Tape::new();
        let quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
        let staged = StagedQuad::stage(&mut tape, &quad, 0.0).unwrap();
        let z = tape.constant(Tensor::new(vec![n, 1], z_data).unwrap());
        let s = tape.constant(Tensor::new(vec![n, 1], s_data).unwrap());
        let h = tape.constant(Tensor::new(vec![n, 1], vec![-1.0; n]).unwrap());
        let r = hjb_residual_at(&mut tape, &staged, &spec_g, 1, n_t, z, s, h, dt, HjbForm::Kinetic)
            .unwrap();
        let gamma2 = 0.9 * 0.9;
        assert!(
            (tape.value(r).item().unwrap() + gamma2 / 2.0).abs() < 0.02,
            "residual {} vs {}",
            tape.value(r).item().unwrap(),
            -gamma2 / 2.0
        );

        // Drift-matched form with b = -x, zero potential and scores:
        // residual = -gamma div b = gamma.
        let spec_ou = make_ou_flow_matching_default(1, 1.0).unwrap();
        let mut tape = Tape::new();
        let quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
        let staged = StagedQuad::stage(&mut tape, &quad, -1.0).unwrap();
        let z = tape.constant(Tensor::matrix(3, 1, vec![0.4, -1.0, 2.0]).unwrap());
        let s0 = tape.constant(Tensor::zeros(&[3, 1]));
        let h0 = tape.constant(Tensor::zeros(&[3, 1]));
        let r =
            hjb_residual_at(&mut tape, &staged, &spec_ou, 1, n_t, z, s0, h0, dt, HjbForm::DriftMatched)
                .unwrap();
        assert_eq!(tape.value(r).item().unwrap(), 1.0);
    }

    /// Interior residual accumulated as `sum_j |mean residual_j| dt` for a
    /// field/potential pair evaluated on a plain rollout with transported
    /// scores (dimension 1, so the score Jacobian is its own trace).
    fn residual_norm_on_rollout(
        spec: &ProblemSpec,
        field: &LinearTimeVarying,
        quad: &QuadraticPsiField,
        coeff: f64,
        form: HjbForm,
        n_z: usize,
        dt: f64,
        seed: u64,
    ) -> f64 {
        let n_t = (spec.t_end / dt).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = sample_state(spec, &mut rng, n_z, true).unwrap();
        let plain = dynamics::rollout(field, 0.0, dt, n_t, &state, Record::Path).unwrap();
        let trh = plain.trh.as_ref().unwrap();
        let mut acc = 0.0;
        for j in 1..n_t {
            let mut tape = Tape::new();
            let staged = StagedQuad::stage(&mut tape, quad, coeff).unwrap();
            let z = tape.constant(plain.z[j].clone());
            let s = tape.constant(plain.s[j].clone());
            let h = tape.constant(
                Tensor::new(vec![n_z, 1], trh[j].data().to_vec()).unwrap(),
            );
            let r = hjb_residual_at(&mut tape, &staged, spec, j, n_t, z, s, h, dt, form).unwrap();
            acc += tape.value(r).item().unwrap().abs() * dt;
        }
        acc
    }

    #[test]
    fn exact_solution_interior_residual_shrinks_with_dt() {
        // Optimal linear field with its matching quadratic potential:
        // A(t) = -1 / (2 (2 - t)), B = 0, and the time-dependent offset
        // C(t) = -(gamma d / 2) ln(2 - t) that makes the residual vanish
        // pointwise. The discrete residual is then pure transport error,
        // which is first order in dt.
        let spec = make_rwpo(1, 1.0).unwrap();
        let field = LinearTimeVarying::new(
            1,
            |t| Tensor::matrix(1, 1, vec![-1.0 / (2.0 * (2.0 - t))]).unwrap(),
            |_| Tensor::vector(vec![0.0]),
        );
        let make_quad = |dt: f64| {
            let n_t = (1.0 / dt).round() as usize;
            let mut quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
            for j in 0..=n_t {
                let t = j as f64 * dt;
                quad.params_mut()[0].data_mut()[j] = -1.0 / (2.0 * (2.0 - t));
                quad.params_mut()[2].data_mut()[j] = -0.5 * (2.0 - t).ln();
            }
            quad
        };
        let n_z = 100_000;
        let coarse = {
            let quad = make_quad(0.02);
            residual_norm_on_rollout(&spec, &field, &quad, 0.0, HjbForm::Kinetic, n_z, 0.02, 59)
        };
        let fine = {
            let quad = make_quad(0.01);
            residual_norm_on_rollout(&spec, &field, &quad, 0.0, HjbForm::Kinetic, n_z, 0.01, 59)
        };
        let ratio = coarse / fine;
        assert!(
            (1.7..=2.4).contains(&ratio),
            "halving dt should halve the residual: {coarse} -> {fine} (ratio {ratio})"
        );
        assert!(coarse < 0.1, "exact solution residual should be small, got {coarse}");
    }

    #[test]
    fn exact_drift_matched_residual_shrinks_with_dt() {
        // Mean-reverting drift b = -x with gamma = 1, mu0 = 1, Sigma0 = 4:
        // Sigma(t) = 1 + 3 e^{-2t}, mu(t) = e^{-t}. The optimal potential is
        // psi = gamma (x - mu)^2 / (2 Sigma) + C(t) with
        // C'(t) = gamma^2 / Sigma - a gamma, so
        // C(t) = (gamma / 2) ln((gamma/a) e^{2at} + Sigma0 - gamma/a) - a gamma t.
        let spec = make_ou_flow_matching_default(1, 1.0).unwrap();
        let sigma = |t: f64| 1.0 + 3.0 * (-2.0 * t).exp();
        let mu = |t: f64| (-t).exp();
        let field = LinearTimeVarying::new(
            1,
            move |t| Tensor::matrix(1, 1, vec![1.0 / sigma(t) - 1.0]).unwrap(),
            move |t| Tensor::vector(vec![-mu(t) / sigma(t)]),
        );
        let make_quad = |dt: f64| {
            let n_t = (1.0 / dt).round() as usize;
            let mut quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
            for j in 0..=n_t {
                let t = j as f64 * dt;
                let (s, m) = (sigma(t), mu(t));
                quad.params_mut()[0].data_mut()[j] = 1.0 / s;
                quad.params_mut()[1].data_mut()[j] = -m / s;
                quad.params_mut()[2].data_mut()[j] =
                    m * m / (2.0 * s) + 0.5 * ((2.0 * t).exp() + 3.0).ln() - t;
            }
            quad
        };
        let n_z = 20_000;
        let coarse = {
            let quad = make_quad(0.02);
            residual_norm_on_rollout(&spec, &field, &quad, -1.0, HjbForm::DriftMatched, n_z, 0.02, 61)
        };
        let fine = {
            let quad = make_quad(0.005);
            residual_norm_on_rollout(&spec, &field, &quad, -1.0, HjbForm::DriftMatched, n_z, 0.005, 61)
        };
        assert!(
            coarse >= 2.0 * fine,
            "quartering dt should cut the residual at least in half: {coarse} -> {fine}"
        );
        assert!(coarse < 0.2, "exact solution residual should be small, got {coarse}");
    }

    #[test]
    fn train_zero_iterations_changes_nothing() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let mut field = MlpField::init(1, 5, &mut rng);
        let before: Vec<Vec<f64>> = field.params().iter().map(|p| p.data().to_vec()).collect();
        let config = TrainConfig { iters: 0, ..base_config() };
        let report = train(&spec, &mut field, &config).unwrap();
        assert!(report.cost_curve.is_empty());
        for (p, b) in field.params().iter().zip(&before) {
            assert_eq!(p.data(), b.as_slice());
        }
    }

    #[test]
    fn train_is_deterministic_for_a_seed() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let config = TrainConfig { resample: true, ..base_config() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut field = MlpField::init(1, 6, &mut rng);
            let report = train(&spec, &mut field, &config).unwrap();
            let params: Vec<Vec<f64>> = field.params().iter().map(|p| p.data().to_vec()).collect();
            (report, params)
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(p1, p2);
        assert_eq!(r1.cost_curve.len(), r2.cost_curve.len());
        for (a, b) in r1.cost_curve.iter().zip(&r2.cost_curve) {
            assert_eq!(a.loss_cost.to_bits(), b.loss_cost.to_bits());
            assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
            assert_eq!(a.loss_hjb, 0.0);
        }
    }

    #[test]
    fn train_reduces_cost_on_quadratic_steering() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut field = MlpField::init(1, 8, &mut rng);
        let config = TrainConfig {
            n_t: 20,
            n_z: 64,
            iters: 40,
            lr: 0.01,
            lambda: 0.0,
            l2_weight: 0.0,
            seed: 71,
            resample: false,
        };
        let report = train(&spec, &mut field, &config).unwrap();
        let first = report.cost_curve.first().unwrap();
        let last = report.cost_curve.last().unwrap();
        assert!(
            last.loss_cost < first.loss_cost,
            "cost should decrease: {} -> {}",
            first.loss_cost,
            last.loss_cost
        );
        assert_eq!(first.loss_total, first.loss_cost);
    }

    #[test]
    fn train_aborts_on_non_finite_loss() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let mut field = MlpField::zeros(1, 3);
        // Saturated hidden units times an output scale beyond overflow: the
        // first iteration's squared velocity is infinite.
        for x in field.params_mut()[1].data_mut().iter_mut() {
            *x = 1.0;
        }
        for x in field.params_mut()[3].data_mut().iter_mut() {
            *x = 1e200;
        }
        let config = base_config();
        match train(&spec, &mut field, &config) {
            Err(Error::NonFiniteLoss { iter, .. }) => assert_eq!(iter, 0),
            other => panic!("expected a non-finite-loss abort, got {other:?}"),
        }
    }

    #[test]
    fn multistage_with_one_stage_matches_plain_training() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let config = base_config();
        let mut rng1 = ChaCha8Rng::seed_from_u64(73);
        let mut field1 = MlpField::init(1, 6, &mut rng1);
        let report = train(&spec, &mut field1, &config).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(73);
        let mut field2 = MlpField::init(1, 6, &mut rng2);
        let outcomes = train_multistage(&spec, &mut field2, &config).unwrap();
        assert_eq!(outcomes.len(), 1);
        for (p1, p2) in field1.params().iter().zip(field2.params()) {
            assert_eq!(p1.data(), p2.data());
        }
        for (a, b) in report.cost_curve.iter().zip(&outcomes[0].report.cost_curve) {
            assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
        }
    }

    #[test]
    fn multistage_hands_particles_off_exactly() {
        let spec = make_double_moon(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut field = MlpField::init(2, 8, &mut rng);
        let config = TrainConfig {
            n_t: 4,
            n_z: 12,
            iters: 2,
            lr: 0.01,
            lambda: 0.0,
            l2_weight: 0.0,
            seed: 79,
            resample: false,
        };
        let outcomes = train_multistage(&spec, &mut field, &config).unwrap();
        assert_eq!(outcomes.len(), 2);
        assert_eq!(outcomes[0].t_start, 0.0);
        assert_eq!(outcomes[0].t_end, 0.2);
        assert_eq!(outcomes[1].t_start, 0.2);
        assert_eq!(outcomes[1].t_end, 0.4);
        let t = &outcomes[0].terminal;
        let i = &outcomes[1].initial;
        assert_eq!(t.z.data(), i.z.data());
        assert_eq!(t.l.data(), i.l.data());
        assert_eq!(t.lt.data(), i.lt.data());
        assert_eq!(t.s.data(), i.s.data());
        assert_eq!(outcomes[1].report.cost_curve.len(), 2);
    }

    #[test]
    fn regularized_training_moves_coefficients_toward_truth() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let n_t = 50;
        let dt = spec.t_end / n_t as f64;
        let mut quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
        let (err0_a, _) = psi_parameter_errors(&spec, &quad);
        let config = TrainConfig {
            n_t,
            n_z: 200,
            iters: 60,
            lr: 0.01,
            lambda: 1e-3,
            l2_weight: 0.0,
            seed: 83,
            resample: false,
        };
        let report = train_regularized(&spec, &mut quad, &config, HjbForm::Kinetic).unwrap();
        let err_a = report.err_a.unwrap();
        assert!(
            err_a < err0_a.unwrap(),
            "training should reduce the coefficient error: {} -> {}",
            err0_a.unwrap(),
            err_a
        );
        let first = report.cost_curve.first().unwrap();
        let last = report.cost_curve.last().unwrap();
        assert!(last.loss_total < first.loss_total);
        assert!(report.cost_curve.iter().all(|r| r.loss_hjb >= 0.0));
    }

    #[test]
    fn psi_parameter_errors_vanish_at_the_optimum() {
        let spec = make_rwpo(1, 1.0).unwrap();
        let n_t = 10;
        let dt = spec.t_end / n_t as f64;
        let mut quad = QuadraticPsiField::zeros(1, n_t, 0.0, dt);
        let analytic = spec.analytic.as_ref().unwrap();
        let pa = analytic.psi_a.as_ref().unwrap();
        for j in 0..=n_t {
            let t = j as f64 * dt;
            quad.params_mut()[0].data_mut()[j] = pa(t).data()[0];
            quad.params_mut()[2].data_mut()[j] = 3.0; // gauge offset, not compared
        }
        let (err_a, err_b) = psi_parameter_errors(&spec, &quad);
        assert_eq!(err_a.unwrap(), 0.0);
        assert_eq!(err_b.unwrap(), 0.0);

        // Problems without a known optimal potential report nothing.
        let moon = make_double_moon(1.0).unwrap();
        let quad2 = QuadraticPsiField::zeros(2, n_t, 0.0, dt);
        assert_eq!(psi_parameter_errors(&moon, &quad2), (None, None));
    }
}
