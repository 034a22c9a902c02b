//! Dense row-major `f64` tensors.
//!
//! Everything the solver touches is rank 0 (scalar), rank 1 (vector) or
//! rank 2 (matrix); batches of `d x d` matrices are stored flat as
//! `[n * d, d]` with particle `n` occupying the row block `n*d .. (n+1)*d`.

use crate::error::{Error, Result};

/// Dense row-major tensor. `data.len()` always equals the product of `shape`
/// (the empty shape denotes a scalar).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 scalar.
    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![], data: vec![x] }
    }

    /// Rank-1 vector that takes ownership of `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Rank-2 matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// `d x d` identity.
    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0/length-1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Number of rows of a rank-2 tensor (or panics; internal use).
    pub(crate) fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Matrix element accessor for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert_eq!(self.shape.len(), 2);
        &mut self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// In-place `self += alpha * other` (shapes must match).
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::axpy",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Max absolute entry (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Transposed copy of a rank-2 tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                "Tensor::transposed",
                format!("expected rank 2, got {:?}", self.shape),
            ));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }
}

/// `out = a * b` for row-major matrices, written as an accumulating kernel so
/// both the forward pass and the backward pass share one implementation.
/// Shapes: `a: [m, k]`, `b: [k, n]`, `out: [m, n]`.
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += a_ip * b_row[j];
            }
        }
    }
}

/// `out += a^T * b` with `a: [k, m]`, `b: [k, n]`, `out: [m, n]`.
pub(crate) fn matmul_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += a_pi * b_row[j];
            }
        }
    }
}

/// `out += a * b^T` with `a: [m, k]`, `b: [n, k]`, `out: [m, n]`.
pub(crate) fn matmul_a_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out_row[j] += acc;
        }
    }
}

/// Solves `a * x = rhs` for small dense `a` (`d x d`, row-major) by Gaussian
/// elimination with partial pivoting. `a` and `rhs` are consumed as scratch.
pub(crate) fn solve_in_place(
    a: &mut [f64],
    rhs: &mut [f64],
    d: usize,
    context: &'static str,
) -> Result<()> {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(rhs.len(), d);
    for col in 0..d {
        let mut pivot = col;
        let mut best = a[col * d + col].abs();
        for r in col + 1..d {
            let v = a[r * d + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best <= f64::EPSILON * 16.0 {
            return Err(Error::SingularMatrix { context });
        }
        if pivot != col {
            for j in 0..d {
                a.swap(col * d + j, pivot * d + j);
            }
            rhs.swap(col, pivot);
        }
        let diag = a[col * d + col];
        for r in col + 1..d {
            let factor = a[r * d + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..d {
                a[r * d + j] -= factor * a[col * d + j];
            }
            rhs[r] -= factor * rhs[col];
        }
    }
    for col in (0..d).rev() {
        let mut acc = rhs[col];
        for j in col + 1..d {
            acc -= a[col * d + j] * rhs[j];
        }
        rhs[col] = acc / a[col * d + col];
    }
    Ok(())
}

/// Cholesky factor `L` (lower-triangular, row-major) of an SPD matrix.
pub(crate) fn cholesky(a: &Tensor) -> Result<Tensor> {
    let d = a.rows();
    if a.shape() != [d, d] {
        return Err(Error::shape("cholesky", format!("expected square, got {:?}", a.shape())));
    }
    let mut l = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a.at(i, j);
            for p in 0..j {
                sum -= l.at(i, p) * l.at(j, p);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::SingularMatrix { context: "cholesky (matrix not SPD)" });
                }
                *l.at_mut(i, j) = sum.sqrt();
            } else {
                *l.at_mut(i, j) = sum / l.at(j, j);
            }
        }
    }
    Ok(l)
}

/// Inverse of a small SPD matrix via its Cholesky factor.
pub(crate) fn spd_inverse(a: &Tensor) -> Result<Tensor> {
    let d = a.rows();
    let _ = cholesky(a)?; // validates SPD-ness with a clear error
    let mut inv = Tensor::zeros(&[d, d]);
    for col in 0..d {
        let mut scratch = a.data().to_vec();
        let mut rhs = vec![0.0; d];
        rhs[col] = 1.0;
        solve_in_place(&mut scratch, &mut rhs, d, "spd_inverse")?;
        for row in 0..d {
            *inv.at_mut(row, col) = rhs[row];
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.0);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 4.0);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&mut out, &a, &b, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_match_plain_matmul() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // 3x2
        // a^T then a^T * something: use matmul_at_b with a stored as [2,3] -> a^T is [3,2].
        let mut at_b = [0.0; 9]; // wrong on purpose? a^T(3x2) * b... b is 3x2; need a:[k=2,m=3], b:[k=2,n= ...]
        // Check a^T * c with c: [2, 3]
        let c = [1.0, 0.0, 2.0, -1.0, 1.0, 0.5];
        matmul_at_b_acc(&mut at_b, &a, &c, 2, 3, 3);
        // a^T is [[1,3],[-2,4],[0.5,-1]]; a^T*c row 0 = 1*[1,0,2] + 3*[-1,1,0.5]
        assert_eq!(&at_b[0..3], &[-2.0, 3.0, 3.5]);

        let mut a_bt = [0.0; 4]; // a(2x3) * b^T where b interpreted as [2,3]
        matmul_a_bt_acc(&mut a_bt, &a, &b, 2, 3, 2);
        // b rows as [2,3]: b0 = [2,1,0], b1=[-1,1.5,2.5]; a row0 . b0 = 2-2+0 = 0
        assert_eq!(a_bt[0], 0.0);
        assert!((a_bt[1] - (1.0 * -1.0 + -2.0 * 1.5 + 0.5 * 2.5)).abs() < 1e-15);
    }

    #[test]
    fn solve_recovers_known_solution() {
        // a = [[2, 1], [1, 3]], x = [1, -1] -> rhs = [1, -2]
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut rhs = vec![1.0, -2.0];
        solve_in_place(&mut a, &mut rhs, 2, "test").unwrap();
        assert!((rhs[0] - 1.0).abs() < 1e-14);
        assert!((rhs[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn solve_flags_singular() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut rhs = vec![1.0, 2.0];
        assert!(solve_in_place(&mut a, &mut rhs, 2, "test").is_err());
    }

    #[test]
    fn cholesky_and_inverse_roundtrip() {
        let a = Tensor::matrix(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let l = cholesky(&a).unwrap();
        // L L^T == a
        let mut rebuilt = [0.0; 4];
        matmul_a_bt_acc(&mut rebuilt, l.data(), l.data(), 2, 2, 2);
        for (x, y) in rebuilt.iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let inv = spd_inverse(&a).unwrap();
        let mut prod = [0.0; 4];
        matmul_acc(&mut prod, a.data(), inv.data(), 2, 2, 2);
        assert!((prod[0] - 1.0).abs() < 1e-14);
        assert!(prod[1].abs() < 1e-14);
        assert!((prod[3] - 1.0).abs() < 1e-14);
    }
}
