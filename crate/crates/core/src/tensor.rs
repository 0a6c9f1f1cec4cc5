//! Dense f64 tensors and the handful of differentiable operations the
//! translation model is built from. Each forward op has a matching
//! backward that accumulates exact gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite tensor value {bad}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::from_vec(&[n], data)
    }

    /// Uniform initialization in `[-range, range]`.
    pub fn uniform<R: Rng>(shape: &[usize], range: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-range..=range)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of columns (last dimension).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Tensor, alpha: f64) {
        debug_assert_eq!(self.shape, other.shape);
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn sq_norm(&self) -> f64 {
        dot(&self.data, &self.data)
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. Hot loops in the model go through these.

/// Defines a kernel that runs an AVX2 build of its body when the CPU has
/// it. Without FMA the wide build performs the same IEEE operations in the
/// same order, so results are bit-identical to the portable path.
macro_rules! kernel {
    ($(#[$m:meta])* pub fn $name:ident$(<$($g:ident: $b:path),*>)?($($arg:ident: $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        #[inline]
        pub fn $name$(<$($g: $b),*>)?($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn imp$(<$($g: $b),*>)?($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide$(<$($g: $b),*>)?($($arg: $ty),*) $(-> $ret)? {
                    imp($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            imp($($arg),*)
        }
    };
}

#[inline(always)]
fn axpy_body(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

kernel! {
    /// `y += alpha * x`
    pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), y.len());
        axpy_body(alpha, x, y)
    }
}

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

kernel! {
    /// Dot product with four independent accumulators so the loop vectorizes.
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        dot_body(a, b)
    }
}

kernel! {
    /// `y += x W` for `W` stored row-major as `[x.len(), y.len()]`. Rows of
    /// `W` are taken four at a time so each pass over `y` does four updates.
    pub fn vec_mat_acc(x: &[f64], w: &[f64], y: &mut [f64]) {
        let cols = y.len();
        debug_assert_eq!(w.len(), x.len() * cols);
        let xb = x.chunks_exact(4);
        let tail = xb.remainder();
        let mut wb = w.chunks_exact(4 * cols);
        for (a, block) in xb.zip(&mut wb) {
            let (w0, rest) = block.split_at(cols);
            let (w1, rest) = rest.split_at(cols);
            let (w2, w3) = rest.split_at(cols);
            for ((((yj, b0), b1), b2), b3) in y.iter_mut().zip(w0).zip(w1).zip(w2).zip(w3) {
                *yj += (a[0] * b0 + a[1] * b1) + (a[2] * b2 + a[3] * b3);
            }
        }
        for (xr, wr) in tail.iter().zip(wb.remainder().chunks_exact(cols)) {
            axpy_body(*xr, wr, y);
        }
    }
}

kernel! {
    /// `dx += W dy` for `W` stored as `[dx.len(), dy.len()]`.
    pub fn mat_vec_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
        let cols = dy.len();
        debug_assert_eq!(w.len(), dx.len() * cols);
        for (d, wr) in dx.iter_mut().zip(w.chunks_exact(cols)) {
            *d += dot_body(wr, dy);
        }
    }
}

kernel! {
    /// `dW += x^T dy`.
    pub fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f64]) {
        let cols = dy.len();
        debug_assert_eq!(dw.len(), x.len() * cols);
        for (xr, dwr) in x.iter().zip(dw.chunks_exact_mut(cols)) {
            if *xr != 0.0 {
                axpy_body(*xr, dy, dwr);
            }
        }
    }
}

kernel! {
    /// `dW += Σ_t xs[t]^T dys[t]`, four time steps per pass over each row of
    /// `dW`.
    pub fn outer_acc_rows<X: AsRef<[f64]>, Y: AsRef<[f64]>>(xs: &[X], dys: &[Y], dw: &mut [f64]) {
        debug_assert_eq!(xs.len(), dys.len());
        let Some(first) = dys.first() else {
            return;
        };
        let cols = first.as_ref().len();
        let n = xs.len();
        let full = n - n % 4;
        for (r, row) in dw.chunks_exact_mut(cols).enumerate() {
            for t in (0..full).step_by(4) {
                let a = [xs[t].as_ref()[r], xs[t + 1].as_ref()[r], xs[t + 2].as_ref()[r], xs[t + 3].as_ref()[r]];
                let (d0, d1, d2, d3) = (dys[t].as_ref(), dys[t + 1].as_ref(), dys[t + 2].as_ref(), dys[t + 3].as_ref());
                for ((((g, b0), b1), b2), b3) in row.iter_mut().zip(d0).zip(d1).zip(d2).zip(d3) {
                    *g += (a[0] * b0 + a[1] * b1) + (a[2] * b2 + a[3] * b3);
                }
            }
            for t in full..n {
                axpy_body(xs[t].as_ref()[r], dys[t].as_ref(), row);
            }
        }
    }
}

/// Row-major transpose of a `[rows, cols]` matrix.
pub fn transpose(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    let mut out = vec![0.0; w.len()];
    for (r, row) in w.chunks_exact(cols).enumerate() {
        for (c, v) in row.iter().enumerate() {
            out[c * rows + r] = *v;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Affine map.

/// Gradients of an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.shape().len() != 2 {
        return Err(Error::Shape(format!("weight must be 2-d, got {:?}", w.shape())));
    }
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    if x.cols() != inp || b.len() != out {
        return Err(Error::Shape(format!(
            "x {:?} · W {:?} + b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `y = x W + b`. `x` is a vector or a batch of row vectors.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_affine(x, w, b)?;
    let out = w.shape()[1];
    let rows = x.rows();
    let mut y = Vec::with_capacity(rows * out);
    for r in 0..rows {
        let mut yr = b.data().to_vec();
        vec_mat_acc(x.row(r), w.data(), &mut yr);
        y.extend_from_slice(&yr);
    }
    let mut shape = x.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last = out,
        None => shape.push(out),
    }
    Tensor::from_vec(&shape, y)
}

/// Backward of [`affine`] given the upstream gradient `dy`.
pub fn affine_backward(x: &Tensor, w: &Tensor, b: &Tensor, dy: &Tensor) -> Result<AffineGrads> {
    check_affine(x, w, b)?;
    if dy.rows() != x.rows() || dy.cols() != w.shape()[1] {
        return Err(Error::Shape(format!("dy {:?} for x {:?}", dy.shape(), x.shape())));
    }
    let mut gx = x.zeros_like();
    let mut gw = w.zeros_like();
    let mut gb = b.zeros_like();
    for r in 0..x.rows() {
        let dyr = dy.row(r);
        mat_vec_acc(w.data(), dyr, gx.row_mut(r));
        outer_acc(x.row(r), dyr, gw.data_mut());
        axpy(1.0, dyr, gb.data_mut());
    }
    Ok(AffineGrads { x: gx, w: gw, b: gb })
}

// ---------------------------------------------------------------------------
// Softmax family.

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Vector-Jacobian product of softmax: `dx_k = y_k (dy_k - Σ_j y_j dy_j)`.
pub fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let s = dot(y, dy);
    y.iter().zip(dy).map(|(yk, dk)| yk * (dk - s)).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Log-softmax restricted to entries where `allowed` is true; everything
/// else gets `-inf` (probability exactly zero).
pub fn masked_log_softmax(x: &[f64], allowed: &[bool]) -> Vec<f64> {
    debug_assert_eq!(x.len(), allowed.len());
    let max = x
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NEG_INFINITY; x.len()];
    }
    let sum: f64 = x
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .map(|(v, _)| (v - max).exp())
        .sum();
    let lse = max + sum.ln();
    x.iter()
        .zip(allowed)
        .map(|(v, a)| if *a { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

// ---------------------------------------------------------------------------
// Dropout.

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout. Identity in eval mode or when `rate == 0`.
pub fn dropout(x: &Tensor, rate: f64, training: bool, seed: u64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!("dropout rate {rate} not in [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(x.len(), rate, &mut rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let y = affine(&t(&[2], &[1.0, 0.0]), &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let w = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = affine(&t(&[2], &[1.0, 2.0]), &w, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0]);

        // d sum(y) / db = 1
        let x = t(&[3], &[0.3, -1.0, 2.0]);
        let w = t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let b = Tensor::zeros(&[2]);
        let g = affine_backward(&x, &w, &b, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(g.b.data(), &[1.0, 1.0]);
        assert_eq!(g.w.data(), &[0.3, 0.3, -1.0, -1.0, 2.0, 2.0]);
        assert!((g.x.data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn affine_shape_mismatch() {
        let err = affine(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[3], vec![1.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&[0.0, 0.0, 0.0]);
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&[1000.0, 0.0]);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-15 && y[1] < 1e-300);
        let y = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (v, e) in y.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_log_softmax_zero_outside() {
        let lp = masked_log_softmax(&[1.0, 5.0, 2.0, 0.5], &[true, false, true, true]);
        assert_eq!(lp[1], f64::NEG_INFINITY);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_examples() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(dropout(&x, 0.0, true, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.2, false, 1).unwrap(), x);
        assert_eq!(dropout(&x, 0.2, true, 9).unwrap(), dropout(&x, 0.2, true, 9).unwrap());
        assert!(dropout(&x, 1.0, true, 1).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        // Monte Carlo estimate of E[dropout(x)] over 10^4 seeds.
        let x = t(&[8], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.5, 2.5, 0.25]);
        let draws = 10_000;
        let mut mean = vec![0.0; 8];
        for s in 0..draws {
            let y = dropout(&x, 0.2, true, s).unwrap();
            axpy(1.0 / draws as f64, y.data(), &mut mean);
        }
        for (m, v) in mean.iter().zip(x.data()) {
            assert!((m - v).abs() <= 0.02 * v.abs(), "{m} vs {v}");
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..13).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    fn ramp(n: usize, k: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * k).sin()).collect()
    }

    #[test]
    fn blocked_kernels_match_naive_loops() {
        for (rows, cols) in [(1, 1), (3, 5), (4, 8), (7, 3), (13, 9)] {
            let w = ramp(rows * cols, 0.7);
            let x = ramp(rows, 1.3);
            let mut y = ramp(cols, 0.2);
            let mut naive = y.clone();
            for r in 0..rows {
                for c in 0..cols {
                    naive[c] += x[r] * w[r * cols + c];
                }
            }
            vec_mat_acc(&x, &w, &mut y);
            assert!(y.iter().zip(&naive).all(|(a, b)| (a - b).abs() < 1e-12));

            let wt = transpose(&w, rows, cols);
            let dy = ramp(cols, 0.9);
            let mut dx = vec![0.0; rows];
            mat_vec_acc(&w, &dy, &mut dx);
            let mut dx2 = vec![0.0; rows];
            vec_mat_acc(&dy, &wt, &mut dx2);
            assert!(dx.iter().zip(&dx2).all(|(a, b)| (a - b).abs() < 1e-12));

            for steps in [0, 1, 4, 6] {
                let xs: Vec<Vec<f64>> = (0..steps).map(|t| ramp(rows, 0.3 + t as f64)).collect();
                let dys: Vec<Vec<f64>> = (0..steps).map(|t| ramp(cols, 1.1 + t as f64)).collect();
                let mut a = vec![0.5; rows * cols];
                let mut b = a.clone();
                outer_acc_rows(&xs, &dys, &mut a);
                for (x, d) in xs.iter().zip(&dys) {
                    outer_acc(x, d, &mut b);
                }
                assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
            }
        }
    }
}
