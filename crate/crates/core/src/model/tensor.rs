use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of model tensors (`f32` for training and
/// inference, `f64` for gradient checking).
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }
}

/// Layout of a matmul operand: stored as-is or read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Normal,
    Transposed,
}

fn strides<T>(m: &Mat<T>, layout: Layout) -> (usize, usize, isize, isize) {
    match layout {
        Layout::Normal => (m.rows, m.cols, m.cols as isize, 1),
        Layout::Transposed => (m.cols, m.rows, 1, m.cols as isize),
    }
}

/// `out = beta * out + op(a) @ op(b)`.
pub fn gemm_into<T: Scalar>(
    out: &mut Mat<T>,
    a: &Mat<T>,
    la: Layout,
    b: &Mat<T>,
    lb: Layout,
    beta: T,
) {
    let (m, k, rsa, csa) = strides(a, la);
    let (k2, n, rsb, csb) = strides(b, lb);
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.shape(), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in out.data.iter_mut() {
            *x = *x * beta;
        }
        return;
    }
    // SAFETY: shapes and strides were checked against the buffers above and
    // `out` is uniquely borrowed, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Scalar>(a: &Mat<T>, la: Layout, b: &Mat<T>, lb: Layout) -> Mat<T> {
    let m = if la == Layout::Normal { a.rows } else { a.cols };
    let n = if lb == Layout::Normal { b.cols } else { b.rows };
    let mut out = Mat::zeros(m, n);
    gemm_into(&mut out, a, la, b, lb, T::zero());
    out
}

/// Numerically stable softmax over a slice, in `f64`.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Sinusoidal position table, `rows x dim`.
pub fn positional_table<T: Scalar>(rows: usize, dim: usize) -> Mat<T> {
    let mut m = Mat::zeros(rows, dim);
    for pos in 0..rows {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            m.data[pos * dim + i] = T::of(v);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.data[i * b.cols + j] = s;
            }
        }
        out
    }

    fn transpose(a: &Mat<f64>) -> Mat<f64> {
        let mut t = Mat::zeros(a.cols, a.rows);
        for i in 0..a.rows {
            for j in 0..a.cols {
                t.data[j * a.rows + i] = a.at(i, j);
            }
        }
        t
    }

    #[test]
    fn gemm_layouts_match_naive() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        let expect = naive(&a, &b);
        assert_eq!(matmul(&a, Layout::Normal, &b, Layout::Normal), expect);
        let at = transpose(&a);
        let bt = transpose(&b);
        assert_eq!(matmul(&at, Layout::Transposed, &b, Layout::Normal), expect);
        assert_eq!(matmul(&a, Layout::Normal, &bt, Layout::Transposed), expect);
        assert_eq!(matmul(&at, Layout::Transposed, &bt, Layout::Transposed), expect);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax_f64(&[1000.0, 1000.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }
}
