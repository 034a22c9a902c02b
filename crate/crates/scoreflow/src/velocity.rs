//! Velocity-field parameterizations with exact spatial derivatives.
//!
//! The transport system needs, at every step start, the field value together
//! with its Jacobian, divergence, divergence gradient, and (for the score
//! Jacobian) Hessian contractions. Both parameterizations implement these in
//! closed form:
//!
//! - [`MlpField`]: a one-hidden-layer network
//!   `f(t, z) = w2 tanh(w0 t + w1 z + b1) + b2`. All spatial derivatives
//!   reduce to reweighted sums over hidden units using derivatives of tanh.
//! - [`QuadraticPsiField`]: a per-time-node quadratic potential
//!   `psi_j(x) = x^T A_j x / 2 + B_j^T x + C_j`, whose gradient
//!   `A_j x + B_j` is the velocity. `A_j` is stored as a packed upper
//!   triangle, so it is symmetric by construction.
//!
//! Each parameterization also has a *staged* form ([`StagedMlp`],
//! [`StagedQuad`]) that records the same quantities for a whole particle
//! batch on a [`Tape`], so training losses can be differentiated with
//! respect to the parameters. Staged and plain evaluations agree to
//! round-off; a unit test pins that.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// First- and second-order spatial data of a velocity field at one point.
/// `score_hess` and `hess_div` are filled only when a score vector is passed
/// to [`VelocityField::derivatives`]; the struct is reused across calls to
/// avoid per-particle allocation.
#[derive(Debug, Clone)]
pub struct FieldDerivs {
    /// Field value, `[d]`.
    pub f: Tensor,
    /// Jacobian `d f_i / d z_j`, `[d, d]`.
    pub jac: Tensor,
    /// Divergence `sum_i d f_i / d z_i`.
    pub div: f64,
    /// Gradient of the divergence, `[d]`.
    pub grad_div: Tensor,
    /// `sum_i s_i hess(f_i)`, `[d, d]`; zero unless a score was supplied.
    pub score_hess: Tensor,
    /// Hessian of the divergence, `[d, d]`; zero unless a score was supplied.
    pub hess_div: Tensor,
    scratch: Vec<f64>,
}

impl FieldDerivs {
    pub fn new(d: usize) -> Self {
        FieldDerivs {
            f: Tensor::zeros(&[d]),
            jac: Tensor::zeros(&[d, d]),
            div: 0.0,
            grad_div: Tensor::zeros(&[d]),
            score_hess: Tensor::zeros(&[d, d]),
            hess_div: Tensor::zeros(&[d, d]),
            scratch: Vec::new(),
        }
    }
}

/// A velocity field with exact spatial derivatives.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Writes `f(t, z)` into `out` (`out.len() == dim()`).
    fn velocity_into(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()>;

    /// Fills `out` with the field value and first-order spatial derivatives.
    /// When `score` is given, also fills the Hessian contractions
    /// (`score_hess`, `hess_div`) needed to transport the score Jacobian.
    fn derivatives(
        &self,
        t: f64,
        z: &[f64],
        score: Option<&[f64]>,
        out: &mut FieldDerivs,
    ) -> Result<()>;

    /// All component Hessians `hess(f_i)`, `i = 0..d`. Used by derivative
    /// checks; rollouts use the contracted fast path in `derivatives`.
    fn component_hessians(&self, t: f64, z: &[f64]) -> Result<Vec<Tensor>>;

    /// The first-order quantities a score rollout step needs: `f`, `div`,
    /// `grad_div` (written into `out`), and the contraction `jac^T s`
    /// (written into `jac_t_s`). The default routes through [`Self::derivatives`]
    /// and a dense mat-vec; fields whose Jacobian has low-rank structure
    /// override it to stay `O(k d)` per call instead of `O(k d^2)`. After
    /// this call `out.jac`, `out.score_hess`, and `out.hess_div` are
    /// unspecified.
    fn score_derivs_into(
        &self,
        t: f64,
        z: &[f64],
        s: &[f64],
        out: &mut FieldDerivs,
        jac_t_s: &mut [f64],
    ) -> Result<()> {
        self.derivatives(t, z, None, out)?;
        let d = z.len();
        if s.len() != d || jac_t_s.len() != d {
            return Err(Error::shape(
                "score derivs",
                format!("score len {}, out len {}, d {}", s.len(), jac_t_s.len(), d),
            ));
        }
        for i in 0..d {
            let mut acc = 0.0;
            for a in 0..d {
                acc += out.jac.at(a, i) * s[a];
            }
            jac_t_s[i] = acc;
        }
        Ok(())
    }

    fn velocity(&self, t: f64, z: &[f64]) -> Result<Tensor> {
        let mut out = vec![0.0; self.dim()];
        self.velocity_into(t, z, &mut out)?;
        Ok(Tensor::vector(out))
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn velocity_into(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).velocity_into(t, z, out)
    }
    fn derivatives(
        &self,
        t: f64,
        z: &[f64],
        score: Option<&[f64]>,
        out: &mut FieldDerivs,
    ) -> Result<()> {
        (**self).derivatives(t, z, score, out)
    }
    fn component_hessians(&self, t: f64, z: &[f64]) -> Result<Vec<Tensor>> {
        (**self).component_hessians(t, z)
    }
    fn score_derivs_into(
        &self,
        t: f64,
        z: &[f64],
        s: &[f64],
        out: &mut FieldDerivs,
        jac_t_s: &mut [f64],
    ) -> Result<()> {
        (**self).score_derivs_into(t, z, s, out, jac_t_s)
    }
}

/// Adds `coeff * z` to a base field: value, Jacobian (`+ coeff I`), and
/// divergence (`+ coeff d`) shift; all higher derivatives are unchanged.
/// Used to superpose a linear drift on a learned potential gradient.
pub struct WithLinearDrift<F> {
    pub base: F,
    pub coeff: f64,
}

impl<F: VelocityField> VelocityField for WithLinearDrift<F> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn velocity_into(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        self.base.velocity_into(t, z, out)?;
        for (o, zi) in out.iter_mut().zip(z) {
            *o += self.coeff * zi;
        }
        Ok(())
    }

    fn derivatives(
        &self,
        t: f64,
        z: &[f64],
        score: Option<&[f64]>,
        out: &mut FieldDerivs,
    ) -> Result<()> {
        self.base.derivatives(t, z, score, out)?;
        let d = self.dim();
        for (o, zi) in out.f.data_mut().iter_mut().zip(z) {
            *o += self.coeff * zi;
        }
        for i in 0..d {
            *out.jac.at_mut(i, i) += self.coeff;
        }
        out.div += self.coeff * d as f64;
        Ok(())
    }

    fn component_hessians(&self, t: f64, z: &[f64]) -> Result<Vec<Tensor>> {
        self.base.component_hessians(t, z)
    }

    fn score_derivs_into(
        &self,
        t: f64,
        z: &[f64],
        s: &[f64],
        out: &mut FieldDerivs,
        jac_t_s: &mut [f64],
    ) -> Result<()> {
        self.base.score_derivs_into(t, z, s, out, jac_t_s)?;
        let d = self.dim();
        for (o, zi) in out.f.data_mut().iter_mut().zip(z) {
            *o += self.coeff * zi;
        }
        out.div += self.coeff * d as f64;
        // jac gains coeff * I, so jac^T s gains coeff * s; grad_div is unchanged.
        for (o, si) in jac_t_s.iter_mut().zip(s) {
            *o += self.coeff * si;
        }
        Ok(())
    }
}

/// Time-varying affine field `f(t, x) = A(t) x + b(t)`, defined by closures.
/// Serves as an analytic stand-in where the optimal control is known.
pub struct LinearTimeVarying {
    d: usize,
    a: Box<dyn Fn(f64) -> Tensor + Send + Sync>,
    b: Box<dyn Fn(f64) -> Tensor + Send + Sync>,
}

impl LinearTimeVarying {
    pub fn new(
        d: usize,
        a: impl Fn(f64) -> Tensor + Send + Sync + 'static,
        b: impl Fn(f64) -> Tensor + Send + Sync + 'static,
    ) -> Self {
        LinearTimeVarying { d, a: Box::new(a), b: Box::new(b) }
    }

    pub fn matrix_at(&self, t: f64) -> Tensor {
        (self.a)(t)
    }
}

impl VelocityField for LinearTimeVarying {
    fn dim(&self) -> usize {
        self.d
    }

    fn velocity_into(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        let a = (self.a)(t);
        let b = (self.b)(t);
        for i in 0..self.d {
            let mut acc = b.data()[i];
            for j in 0..self.d {
                acc += a.at(i, j) * z[j];
            }
            out[i] = acc;
        }
        Ok(())
    }

    fn derivatives(
        &self,
        t: f64,
        z: &[f64],
        _score: Option<&[f64]>,
        out: &mut FieldDerivs,
    ) -> Result<()> {
        let a = (self.a)(t);
        let mut f = vec![0.0; self.d];
        self.velocity_into(t, z, &mut f)?;
        out.f.data_mut().copy_from_slice(&f);
        out.jac = a;
        out.div = (0..self.d).map(|i| out.jac.at(i, i)).sum();
        out.grad_div.data_mut().fill(0.0);
        out.score_hess.data_mut().fill(0.0);
        out.hess_div.data_mut().fill(0.0);
        Ok(())
    }

    fn component_hessians(&self, _t: f64, _z: &[f64]) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::zeros(&[self.d, self.d]); self.d])
    }
}

/// One-hidden-layer velocity field
/// `f(t, z) = w2 tanh(w0 t + w1 z + b1) + b2` with `k` hidden units.
#[derive(Debug, Clone)]
pub struct MlpField {
    /// Time weights, `[k]`.
    pub w0: Tensor,
    /// Input weights, `[k, d]`.
    pub w1: Tensor,
    /// Hidden biases, `[k]`.
    pub b1: Tensor,
    /// Output weights, `[d, k]`.
    pub w2: Tensor,
    /// Output biases, `[d]`.
    pub b2: Tensor,
    d: usize,
    k: usize,
}

/// tanh and its first three derivatives at `u`, expressed through the value
/// `y = tanh(u)`: `y' = 1 - y^2`, `y'' = -2 y y'`, `y''' = -2 (y'^2 + y y'')`.
fn tanh_derivs(u: f64) -> (f64, f64, f64, f64) {
    let y = u.tanh();
    let y1 = 1.0 - y * y;
    let y2 = -2.0 * y * y1;
    let y3 = -2.0 * (y1 * y1 + y * y2);
    (y, y1, y2, y3)
}

impl MlpField {
    /// Zero-initialized field with `k` hidden units in dimension `d`.
    pub fn zeros(d: usize, k: usize) -> Self {
        MlpField {
            w0: Tensor::zeros(&[k]),
            w1: Tensor::zeros(&[k, d]),
            b1: Tensor::zeros(&[k]),
            w2: Tensor::zeros(&[d, k]),
            b2: Tensor::zeros(&[d]),
            d,
            k,
        }
    }

    /// Uniform initialization `U(-1/sqrt(n_in), 1/sqrt(n_in))` per layer,
    /// where the first layer sees `d + 1` inputs (time plus space) and the
    /// output layer sees `k`. Biases start at zero. Draw order is fixed
    /// (`w0`, then `w1` row-major, then `w2` row-major) so a seeded stream
    /// reproduces the same field.
    pub fn init(d: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mut field = MlpField::zeros(d, k);
        let bound1 = 1.0 / ((d + 1) as f64).sqrt();
        let bound2 = 1.0 / (k as f64).sqrt();
        for v in field.w0.data_mut() {
            *v = rng.gen_range(-bound1..bound1);
        }
        for v in field.w1.data_mut() {
            *v = rng.gen_range(-bound1..bound1);
        }
        for v in field.w2.data_mut() {
            *v = rng.gen_range(-bound2..bound2);
        }
        field
    }

    pub fn hidden(&self) -> usize {
        self.k
    }

    /// Parameter tensors in canonical (staging) order.
    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w0, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w0,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Pre-activations `u = w0 t + w1 z + b1` into `u` (`len k`).
    fn preactivations(&self, t: f64, z: &[f64], u: &mut [f64]) {
        let (d, k) = (self.d, self.k);
        let w1 = self.w1.data();
        for p in 0..k {
            let mut acc = self.w0.data()[p] * t + self.b1.data()[p];
            let row = &w1[p * d..(p + 1) * d];
            for j in 0..d {
                acc += row[j] * z[j];
            }
            u[p] = acc;
        }
    }

    /// `c_p = sum_i w1[p, i] w2[i, p]`, the unit weight coupling that spatial
    /// divergences reduce to.
    fn couplings(&self, c: &mut [f64]) {
        let (d, k) = (self.d, self.k);
        for p in 0..k {
            let mut acc = 0.0;
            for i in 0..d {
                acc += self.w1.at(p, i) * self.w2.at(i, p);
            }
            c[p] = acc;
        }
    }
}

impl VelocityField for MlpField {
    fn dim(&self) -> usize {
        self.d
    }

    fn velocity_into(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        let (d, k) = (self.d, self.k);
        if z.len() != d || out.len() != d {
            return Err(Error::shape("mlp velocity", format!("z len {}, d {}", z.len(), d)));
        }
        let mut u = vec![0.0; k];
        self.preactivations(t, z, &mut u);
        out.copy_from_slice(self.b2.data());
        for p in 0..k {
            let sig = u[p].tanh();
            for i in 0..d {
                out[i] += self.w2.at(i, p) * sig;
            }
        }
        Ok(())
    }

    fn derivatives(
        &self,
        t: f64,
        z: &[f64],
        score: Option<&[f64]>,
        out: &mut FieldDerivs,
    ) -> Result<()> {
        let (d, k) = (self.d, self.k);
        if z.len() != d {
            return Err(Error::shape("mlp derivatives", format!("z len {}, d {}", z.len(), d)));
        }
        // Scratch layout: [u | sig | sig1 | sig2 | sig3 | c], each length k.
        out.scratch.resize(6 * k, 0.0);
        let (u, rest) = out.scratch.split_at_mut(k);
        let (sig, rest) = rest.split_at_mut(k);
        let (sig1, rest) = rest.split_at_mut(k);
        let (sig2, rest) = rest.split_at_mut(k);
        let (sig3, c) = rest.split_at_mut(k);
        self.preactivations(t, z, u);
        for p in 0..k {
            let (y, y1, y2, y3) = tanh_derivs(u[p]);
            sig[p] = y;
            sig1[p] = y1;
            sig2[p] = y2;
            sig3[p] = y3;
        }
        self.couplings(c);

        let w1 = self.w1.data();
        let w2 = self.w2.data();

        out.f.data_mut().copy_from_slice(self.b2.data());
        out.jac.data_mut().fill(0.0);
        out.grad_div.data_mut().fill(0.0);
        let mut div = 0.0;
        for p in 0..k {
            let row = &w1[p * d..(p + 1) * d];
            for i in 0..d {
                out.f.data_mut()[i] += w2[i * k + p] * sig[p];
            }
            for i in 0..d {
                let wi = w2[i * k + p] * sig1[p];
                if wi != 0.0 {
                    let jr = &mut out.jac.data_mut()[i * d..(i + 1) * d];
                    for j in 0..d {
                        jr[j] += wi * row[j];
                    }
                }
            }
            div += sig1[p] * c[p];
            let gp = sig2[p] * c[p];
            if gp != 0.0 {
                for j in 0..d {
                    out.grad_div.data_mut()[j] += gp * row[j];
                }
            }
        }
        out.div = div;

        if let Some(s) = score {
            if s.len() != d {
                return Err(Error::shape("mlp derivatives", format!("score len {}", s.len())));
            }
            out.score_hess.data_mut().fill(0.0);
            out.hess_div.data_mut().fill(0.0);
            for p in 0..k {
                let row = &w1[p * d..(p + 1) * d];
                let mut sw = 0.0;
                for i in 0..d {
                    sw += s[i] * w2[i * k + p];
                }
                let wh = sig2[p] * sw;
                let wd = sig3[p] * c[p];
                if wh == 0.0 && wd == 0.0 {
                    continue;
                }
                for i in 0..d {
                    let (ri_h, ri_d) = (wh * row[i], wd * row[i]);
                    let sh = &mut out.score_hess.data_mut()[i * d..(i + 1) * d];
                    for j in 0..d {
                        sh[j] += ri_h * row[j];
                    }
                    let hd = &mut out.hess_div.data_mut()[i * d..(i + 1) * d];
                    for j in 0..d {
                        hd[j] += ri_d * row[j];
                    }
                }
            }
        }
        Ok(())
    }

    fn component_hessians(&self, t: f64, z: &[f64]) -> Result<Vec<Tensor>> {
        let (d, k) = (self.d, self.k);
        let mut u = vec![0.0; k];
        self.preactivations(t, z, &mut u);
        let mut out = vec![Tensor::zeros(&[d, d]); d];
        for p in 0..k {
            let (_, _, y2, _) = tanh_derivs(u[p]);
            let row: Vec<f64> = (0..d).map(|j| self.w1.at(p, j)).collect();
            for (i, h) in out.iter_mut().enumerate() {
                let w = self.w2.at(i, p) * y2;
                if w == 0.0 {
                    continue;
                }
                for a in 0..d {
                    for b in 0..d {
                        *h.at_mut(a, b) += w * row[a] * row[b];
                    }
                }
            }
        }
        Ok(out)
    }

    fn score_derivs_into(
        &self,
        t: f64,
        z: &[f64],
        s: &[f64],
        out: &mut FieldDerivs,
        jac_t_s: &mut [f64],
    ) -> Result<()> {
        let (d, k) = (self.d, self.k);
        if z.len() != d || s.len() != d || jac_t_s.len() != d {
            return Err(Error::shape(
                "mlp score derivs",
                format!("z len {}, score len {}, d {}", z.len(), s.len(), d),
            ));
        }
        // jac^T s = w1^T diag(sig1) w2^T s: two O(k d) contractions through the
        // rank-k hidden layer, never forming the d x d Jacobian.
        // Scratch layout: [sig | sig1 | sig2 | q], each length k; sig starts
        // as the preactivations and is activated in place.
        out.scratch.resize(4 * k, 0.0);
        let (sig, rest) = out.scratch.split_at_mut(k);
        let (sig1, rest) = rest.split_at_mut(k);
        let (sig2, q) = rest.split_at_mut(k);
        self.preactivations(t, z, sig);
        let w1 = self.w1.data();
        let w2 = self.w2.data();
        for p in 0..k {
            let y = sig[p].tanh();
            sig[p] = y;
            sig1[p] = 1.0 - y * y;
            sig2[p] = -2.0 * y * sig1[p];
            let mut acc = 0.0;
            for i in 0..d {
                acc += w2[i * k + p] * s[i];
            }
            q[p] = acc;
        }

        out.f.data_mut().copy_from_slice(self.b2.data());
        out.grad_div.data_mut().fill(0.0);
        jac_t_s.fill(0.0);
        let mut div = 0.0;
        for p in 0..k {
            let row = &w1[p * d..(p + 1) * d];
            let mut c_p = 0.0;
            for i in 0..d {
                c_p += row[i] * w2[i * k + p];
            }
            div += sig1[p] * c_p;
            let gd = sig2[p] * c_p;
            let js = sig1[p] * q[p];
            for i in 0..d {
                out.f.data_mut()[i] += w2[i * k + p] * sig[p];
                out.grad_div.data_mut()[i] += gd * row[i];
                jac_t_s[i] += js * row[i];
            }
        }
        out.div = div;
        Ok(())
    }
}

/// Per-time-node quadratic potential field. Node `j` holds
/// `psi_j(x) = x^T A_j x / 2 + B_j^T x + C_j`; the velocity at node `j` is
/// `grad psi_j = A_j x + B_j`. Queries off the time grid are an error: this
/// parameterization has no meaning between nodes.
#[derive(Debug, Clone)]
pub struct QuadraticPsiField {
    /// Packed upper triangles of `A_j`, `[n_nodes, d(d+1)/2]`.
    pub a: Tensor,
    /// Linear terms `B_j`, `[n_nodes, d]`.
    pub b: Tensor,
    /// Constants `C_j`, `[n_nodes]`.
    pub c: Tensor,
    d: usize,
    t_start: f64,
    dt: f64,
    n_nodes: usize,
}

impl QuadraticPsiField {
    /// Zero-initialized potentials on the grid `t_start + j dt`,
    /// `j = 0..=n_steps`.
    pub fn zeros(d: usize, n_steps: usize, t_start: f64, dt: f64) -> Self {
        let n_nodes = n_steps + 1;
        QuadraticPsiField {
            a: Tensor::zeros(&[n_nodes, d * (d + 1) / 2]),
            b: Tensor::zeros(&[n_nodes, d]),
            c: Tensor::zeros(&[n_nodes]),
            d,
            t_start,
            dt,
            n_nodes,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.a, &self.b, &self.c]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.a, &mut self.b, &mut self.c]
    }

    /// Index of the grid node at time `t`, or an error when `t` is not a
    /// node (within `1e-6 dt`).
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let x = (t - self.t_start) / self.dt;
        let j = x.round();
        if (x - j).abs() > 1e-6 || j < 0.0 || j as usize >= self.n_nodes {
            return Err(Error::OffGridTime {
                t,
                start: self.t_start,
                dt: self.dt,
                n: self.n_nodes,
            });
        }
        Ok(j as usize)
    }

    /// Dense symmetric `A_j`.
    pub fn a_matrix(&self, j: usize) -> Tensor {
        let d = self.d;
        let packed = d * (d + 1) / 2;
        let row = &self.a.data()[j * packed..(j + 1) * packed];
        let mut m = Tensor::zeros(&[d, d]);
        let mut idx = 0;
        for i in 0..d {
            for jj in i..d {
                *m.at_mut(i, jj) = row[idx];
                *m.at_mut(jj, i) = row[idx];
                idx += 1;
            }
        }
        m
    }

    pub fn b_vector(&self, j: usize) -> Tensor {
        let d = self.d;
        Tensor::vector(self.b.data()[j * d..(j + 1) * d].to_vec())
    }

    /// Potential value `psi_j(x)`.
    pub fn psi(&self, j: usize, x: &[f64]) -> f64 {
        let a = self.a_matrix(j);
        let d = self.d;
        let mut quad = 0.0;
        for i in 0..d {
            for jj in 0..d {
                quad += x[i] * a.at(i, jj) * x[jj];
            }
        }
        let lin: f64 = (0..d).map(|i| self.b.data()[j * d + i] * x[i]).sum();
        0.5 * quad + lin + self.c.data()[j]
    }
}

impl VelocityField for QuadraticPsiField {
    fn dim(&self) -> usize {
        self.d
    }

    fn velocity_into(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        let j = self.node_index(t)?;
        let a = self.a_matrix(j);
        let d = self.d;
        for i in 0..d {
            let mut acc = self.b.data()[j * d + i];
            for jj in 0..d {
                acc += a.at(i, jj) * z[jj];
            }
            out[i] = acc;
        }
        Ok(())
    }

    fn derivatives(
        &self,
        t: f64,
        z: &[f64],
        _score: Option<&[f64]>,
        out: &mut FieldDerivs,
    ) -> Result<()> {
        let j = self.node_index(t)?;
        out.jac = self.a_matrix(j);
        let d = self.d;
        for i in 0..d {
            let mut acc = self.b.data()[j * d + i];
            for jj in 0..d {
                acc += out.jac.at(i, jj) * z[jj];
            }
            out.f.data_mut()[i] = acc;
        }
        out.div = (0..d).map(|i| out.jac.at(i, i)).sum();
        out.grad_div.data_mut().fill(0.0);
        out.score_hess.data_mut().fill(0.0);
        out.hess_div.data_mut().fill(0.0);
        Ok(())
    }

    fn component_hessians(&self, t: f64, _z: &[f64]) -> Result<Vec<Tensor>> {
        self.node_index(t)?;
        Ok(vec![Tensor::zeros(&[self.d, self.d]); self.d])
    }
}

/// Batched step quantities recorded on a tape: everything the Euler update
/// of `(z, l, s, h)` needs at one time step, for `n` particles at once.
pub struct StagedStep {
    /// Field values, `[n, d]`.
    pub f: Var,
    /// Divergences, `[n]`.
    pub div: Var,
    /// Divergence gradients, `[n, d]`.
    pub grad_div: Var,
    /// `(grad f)^T s` rows, `[n, d]`.
    pub jac_t_s: Var,
    /// Right-hand side of the score-Jacobian equation, `[n*d, d]`; present
    /// only when the step was staged with an `h` input.
    pub h_rhs: Option<Var>,
}

/// Tape-resident copy of an [`MlpField`], with cached transposes and unit
/// couplings shared across steps.
pub struct StagedMlp {
    pub w0: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    w1t: Var,
    w2t: Var,
    c: Var,
    d: usize,
}

impl StagedMlp {
    pub fn stage(tape: &mut Tape, field: &MlpField) -> Result<StagedMlp> {
        let w0 = tape.leaf(field.w0.clone());
        let w1 = tape.leaf(field.w1.clone());
        let b1 = tape.leaf(field.b1.clone());
        let w2 = tape.leaf(field.w2.clone());
        let b2 = tape.leaf(field.b2.clone());
        let w1t = tape.transpose(w1)?;
        let w2t = tape.transpose(w2)?;
        let prod = tape.mul(w1, w2t)?;
        let c = tape.row_sum(prod)?;
        Ok(StagedMlp { w0, w1, b1, w2, b2, w1t, w2t, c, d: field.dim() })
    }

    /// Parameter leaves in the same order as [`MlpField::params`].
    pub fn leaves(&self) -> Vec<Var> {
        vec![self.w0, self.w1, self.b1, self.w2, self.b2]
    }

    /// Records field value, divergence data, `(grad f)^T s`, and (when `h`
    /// is given) the score-Jacobian right-hand side for a particle batch
    /// `z: [n, d]`, scores `s: [n, d]`, and flattened Jacobian stack
    /// `h: [n*d, d]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        t: f64,
        z: Var,
        s: Var,
        h: Option<Var>,
    ) -> Result<StagedStep> {
        let d = self.d;
        // Pre-activations u = z w1^T + (w0 t + b1), tanh ladder.
        let zw = tape.matmul(z, self.w1t)?;
        let w0t = tape.scale(self.w0, t);
        let tb = tape.add(w0t, self.b1)?;
        let u = tape.add_row_vec(zw, tb)?;
        let sig = tape.tanh(u);
        let sig_sq = tape.mul(sig, sig)?;
        let sig1 = tape.affine(sig_sq, -1.0, 1.0);
        let sig_sig1 = tape.mul(sig, sig1)?;
        let sig2 = tape.affine(sig_sig1, -2.0, 0.0);

        let f_lin = tape.matmul(sig, self.w2t)?;
        let f = tape.add_row_vec(f_lin, self.b2)?;

        let div = tape.matvec(sig1, self.c)?;
        let s2c = tape.mul_row_vec(sig2, self.c)?;
        let grad_div = tape.matmul(s2c, self.w1)?;

        // (grad f)^T s per particle: sum_p sig1_p (s . w2[:, p]) w1[p, :].
        let q = tape.matmul(s, self.w2)?;
        let s1q = tape.mul(sig1, q)?;
        let jac_t_s = tape.matmul(s1q, self.w1)?;

        let h_rhs = match h {
            None => None,
            Some(h) => {
                let s1_sq = tape.mul(sig1, sig1)?;
                let sig_sig2 = tape.mul(sig, sig2)?;
                let s3_base = tape.add(s1_sq, sig_sig2)?;
                let sig3 = tape.affine(s3_base, -2.0, 0.0);
                // sum_i s_i hess f_i + hess div = weighted outer with
                // weights sig2 .* q + sig3 .* c per unit.
                let aw1 = tape.mul(sig2, q)?;
                let aw2 = tape.mul_row_vec(sig3, self.c)?;
                let aw = tape.add(aw1, aw2)?;
                let m12 = tape.weighted_outer(aw, self.w1, self.w1)?;
                // h jac, batched over the flattened block stack.
                let hw = tape.matmul(h, self.w2)?;
                let rep = tape.repeat_rows(sig1, d)?;
                let hw_s = tape.mul(hw, rep)?;
                let hj = tape.matmul(hw_s, self.w1)?;
                let hjt = tape.block_transpose(hj, d)?;
                let sum1 = tape.add(m12, hj)?;
                let sum2 = tape.add(sum1, hjt)?;
                Some(tape.neg(sum2))
            }
        };

        Ok(StagedStep { f, div, grad_div, jac_t_s, h_rhs })
    }
}

/// Tape-resident copy of a [`QuadraticPsiField`]. Parameters stage as three
/// leaves (`a`, `b`, `c` over all nodes); per-step slices are tape ops so
/// gradients flow back into the right rows.
pub struct StagedQuad {
    pub a: Var,
    pub b: Var,
    pub c: Var,
    at: Var,
    bt: Var,
    d: usize,
    n_nodes: usize,
    /// `f = grad psi + coeff z` when set (linear drift superposition).
    pub drift_coeff: f64,
}

impl StagedQuad {
    pub fn stage(tape: &mut Tape, field: &QuadraticPsiField, drift_coeff: f64) -> Result<StagedQuad> {
        let a = tape.leaf(field.a.clone());
        let b = tape.leaf(field.b.clone());
        let c = tape.leaf(field.c.clone());
        let at = tape.transpose(a)?;
        let bt = tape.transpose(b)?;
        Ok(StagedQuad {
            a,
            b,
            c,
            at,
            bt,
            d: field.dim(),
            n_nodes: field.n_nodes(),
            drift_coeff,
        })
    }

    pub fn leaves(&self) -> Vec<Var> {
        vec![self.a, self.b, self.c]
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Dense symmetric `A_j` as a tape node.
    pub fn a_matrix(&self, tape: &mut Tape, j: usize) -> Result<Var> {
        let col = tape.column(self.at, j)?;
        tape.sym_from_upper(col, self.d)
    }

    pub fn b_vector(&self, tape: &mut Tape, j: usize) -> Result<Var> {
        tape.column(self.bt, j)
    }

    /// Scalar node `C_j` (extracted with a one-hot inner product).
    pub fn c_scalar(&self, tape: &mut Tape, j: usize) -> Result<Var> {
        let mut e = vec![0.0; self.n_nodes];
        e[j] = 1.0;
        let onehot = tape.constant(Tensor::vector(e));
        tape.dot(self.c, onehot)
    }

    /// Potential values `psi_j` for a particle batch `z: [n, d]` -> `[n]`.
    pub fn psi_batch(&self, tape: &mut Tape, j: usize, z: Var) -> Result<Var> {
        let a = self.a_matrix(tape, j)?;
        let za = tape.matmul(z, a)?;
        let zaz = tape.mul(za, z)?;
        let quad_sum = tape.row_sum(zaz)?;
        let quad = tape.scale(quad_sum, 0.5);
        let b = self.b_vector(tape, j)?;
        let lin = tape.matvec(z, b)?;
        let ql = tape.add(quad, lin)?;
        let c = self.c_scalar(tape, j)?;
        tape.add_scalar(ql, c)
    }

    /// Step quantities at node `j` (the caller maps `t` to `j`): velocity
    /// `A_j z + B_j + coeff z`, constant divergence `tr A_j + coeff d`
    /// broadcast over the batch, zero divergence gradient, `(grad f)^T s`,
    /// and the flattened score-Jacobian right-hand side when `h` is given.
    pub fn step(
        &self,
        tape: &mut Tape,
        j: usize,
        z: Var,
        s: Var,
        h: Option<Var>,
    ) -> Result<StagedStep> {
        let n = tape.value(z).shape()[0];
        let d = self.d;
        let a = self.a_matrix(tape, j)?;
        let b = self.b_vector(tape, j)?;
        let za = tape.matmul(z, a)?;
        let f_psi = tape.add_row_vec(za, b)?;
        let f = if self.drift_coeff != 0.0 {
            let drift = tape.scale(z, self.drift_coeff);
            tape.add(f_psi, drift)?
        } else {
            f_psi
        };

        let tr = tape.trace(a)?;
        let tr_full = tape.affine(tr, 1.0, self.drift_coeff * d as f64);
        let zero_n = tape.constant(Tensor::zeros(&[n]));
        let div = tape.add_scalar(zero_n, tr_full)?;
        let grad_div = tape.constant(Tensor::zeros(&[n, d]));

        // grad f = A + coeff I is symmetric, so (grad f)^T s = s A + coeff s.
        let sa = tape.matmul(s, a)?;
        let jac_t_s = if self.drift_coeff != 0.0 {
            let sd = tape.scale(s, self.drift_coeff);
            tape.add(sa, sd)?
        } else {
            sa
        };

        let h_rhs = match h {
            None => None,
            Some(h) => {
                let hj_a = tape.matmul(h, a)?;
                let hj = if self.drift_coeff != 0.0 {
                    let hd = tape.scale(h, self.drift_coeff);
                    tape.add(hj_a, hd)?
                } else {
                    hj_a
                };
                let hjt = tape.block_transpose(hj, d)?;
                let sum = tape.add(hj, hjt)?;
                Some(tape.neg(sum))
            }
        };

        Ok(StagedStep { f, div, grad_div, jac_t_s, h_rhs })
    }
}
