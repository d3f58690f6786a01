use crate::error::{Error, Result};

/// Dense row-major 2-D array of `f64`. Vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The single value of a `1 x 1` array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn shape_mismatch(op: &str, a: [usize; 2], b: [usize; 2]) -> Error {
    Error::Contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is `m x k` after op, `b` is `k x n` after op.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &Array, ta: bool, b: &Array, tb: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: strides and extents describe the live buffers of `a`, `b` and `c`
    // exactly; `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a * b`.
pub fn mm(a: &Array, b: &Array) -> Array {
    let mut c = Array::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, a, false, b, false, 0.0, &mut c.data);
    c
}

/// `a * b^T`.
pub fn mm_nt(a: &Array, b: &Array) -> Array {
    let mut c = Array::zeros(a.rows, b.rows);
    gemm(a.rows, a.cols, b.rows, a, false, b, true, 0.0, &mut c.data);
    c
}

/// `a^T * b`.
pub fn mm_tn(a: &Array, b: &Array) -> Array {
    let mut c = Array::zeros(a.cols, b.cols);
    gemm(a.cols, a.rows, b.cols, a, true, b, false, 0.0, &mut c.data);
    c
}

/// `c += a^T * b`.
pub fn mm_tn_acc(a: &Array, b: &Array, c: &mut Array) {
    gemm(a.cols, a.rows, b.cols, a, true, b, false, 1.0, &mut c.data);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Array, b: &Array) -> Array {
        let mut c = Array::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    fn transpose(a: &Array) -> Array {
        let mut t = Array::zeros(a.cols(), a.rows());
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                t.set(j, i, a.get(i, j));
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive() {
        let a = Array::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Array::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect()).unwrap();
        let close = |x: &Array, y: &Array| x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&mm(&a, &b), &naive(&a, &b)));
        assert!(close(&mm_nt(&a, &transpose(&b)), &naive(&a, &b)));
        assert!(close(&mm_tn(&transpose(&a), &b), &naive(&a, &b)));
        let mut acc = naive(&a, &b);
        mm_tn_acc(&transpose(&a), &b, &mut acc);
        let mut twice = naive(&a, &b);
        twice.scale_assign(2.0);
        assert!(close(&acc, &twice));
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Array::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
