//! Thin GEMM layer over `matrixmultiply` plus the affine map shared by the
//! pre-fusion module and the modal adapters.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

pub trait Scalar: Copy + Default + 'static {
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
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
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
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
    unsafe fn raw_gemm(
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

/// Strided read-only view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Contiguous row-major `[rows x cols]` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    /// Column block `[col0, col0 + width)` of a contiguous `[rows x stride]` matrix.
    pub fn cols_of(data: &'a [T], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Self { data, offset: col0, rows, cols: width, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Mutable strided view, used as a GEMM destination.
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        Self { data, offset: col0, rows, cols: width, rs: stride }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!(a.rows, c.rows, "output rows differ");
    assert_eq!(b.cols, c.cols, "output cols differ");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        assert!(c.offset + (c.rows - 1) * c.rs + c.cols - 1 < c.data.len());
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        T::raw_gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            1,
        )
    }
}

/// Row-major `[m x k] * [k x n]` product into a new buffer.
pub fn matmul<T: Scalar + From<u8>>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut c = vec![T::default(); m * n];
    gemm(T::from(1), View::new(a, m, k), View::new(b, k, n), T::from(0), ViewMut::new(&mut c, m, n));
    c
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Swish / SiLU: `x * sigmoid(x)`.
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise affine map `y = W x + b` with `W` stored `[out x in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weight: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Identity on the leading `min(in, out)` coordinates.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        let mut m = Self::zeros(in_dim, out_dim);
        for i in 0..in_dim.min(out_dim) {
            m.weight[i * in_dim + i] = 1.0;
        }
        m
    }

    /// Weights and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: (0..out_dim).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn from_parts(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "affine map {in_dim}->{out_dim} needs {} weights and {out_dim} biases",
                in_dim * out_dim
            )));
        }
        Ok(Self { in_dim, out_dim, weight, bias })
    }

    /// Zeroed map of the same shape, used as a gradient accumulator.
    pub fn zero_grad(&self) -> Affine {
        Affine::zeros(self.in_dim, self.out_dim)
    }

    /// Applies the map to every row of `x` (`[n x in]`), giving `[n x out]`.
    pub fn apply_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), n * self.in_dim);
        let mut y: Vec<f64> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(
            1.0,
            View::new(x, n, self.in_dim),
            View::new(&self.weight, self.out_dim, self.in_dim).t(),
            1.0,
            ViewMut::new(&mut y, n, self.out_dim),
        );
        y
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        self.apply_rows(x, 1)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input rows.
    pub fn backward_rows(&self, x: &[f64], dy: &[f64], n: usize, grad: &mut Affine) -> Vec<f64> {
        gemm(
            1.0,
            View::new(dy, n, self.out_dim).t(),
            View::new(x, n, self.in_dim),
            1.0,
            ViewMut::new(&mut grad.weight, self.out_dim, self.in_dim),
        );
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; n * self.in_dim];
        gemm(
            1.0,
            View::new(dy, n, self.out_dim),
            View::new(&self.weight, self.out_dim, self.in_dim),
            0.0,
            ViewMut::new(&mut dx, n, self.in_dim),
        );
        dx
    }

    /// Applies the map to a `[n x in]` feature tensor.
    pub fn project(&self, u: &FeatureTensor) -> Result<FeatureTensor> {
        let (n, d) = u.as_matrix()?;
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "projection expects {} input features, got {d}",
                self.in_dim
            )));
        }
        FeatureTensor::new(vec![n, self.out_dim], self.apply_rows(u.data(), n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(1.0, View::new(&a, 2, 2).t(), View::new(&b, 2, 2), 0.0, ViewMut::new(&mut c, 2, 2));
        // a^T b = [[1*5+3*7, 1*6+3*8],[2*5+4*7, 2*6+4*8]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn swish_grad_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn affine_backward_matches_hand_values() {
        let m = Affine::from_parts(2, 1, vec![2.0, -1.0], vec![0.5]).unwrap();
        let x = [1.0, 3.0];
        assert_eq!(m.apply_vec(&x), vec![2.0 - 3.0 + 0.5]);
        let mut g = m.zero_grad();
        let dx = m.backward_rows(&x, &[1.0], 1, &mut g);
        assert_eq!(dx, vec![2.0, -1.0]);
        assert_eq!(g.weight, vec![1.0, 3.0]);
        assert_eq!(g.bias, vec![1.0]);
    }
}
