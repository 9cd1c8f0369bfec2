//! Dense complex matrix helpers on top of `nalgebra`.
//!
//! Matrices are column-major `DMatrix<Complex64>`. The three product kernels
//! below walk contiguous columns and are the hot loops of every solver.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);

#[inline]
fn axpy(y: &mut [C64], alpha: C64, x: &[C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dotc(x: &[C64], y: &[C64]) -> C64 {
    // sum conj(x_i) y_i, split into real arithmetic for vectorisation
    let (mut re, mut im) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        re += a.re * b.re + a.im * b.im;
        im += a.re * b.im - a.im * b.re;
    }
    C64::new(re, im)
}

/// `A * B`.
pub fn mul(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.nrows(), "mul: inner dimensions");
    let (m, n) = (a.nrows(), b.ncols());
    let mut c = CMat::zeros(m, n);
    let a_s = a.as_slice();
    let b_s = b.as_slice();
    let k_dim = a.ncols();
    let c_s = c.as_mut_slice();
    for j in 0..n {
        let cj = &mut c_s[j * m..(j + 1) * m];
        for k in 0..k_dim {
            let bkj = b_s[j * k_dim + k];
            if bkj.re != 0.0 || bkj.im != 0.0 {
                axpy(cj, bkj, &a_s[k * m..(k + 1) * m]);
            }
        }
    }
    c
}

/// `A^H * B`.
pub fn mul_ah_b(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.nrows(), b.nrows(), "mul_ah_b: inner dimensions");
    let (k_dim, m, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut c = CMat::zeros(m, n);
    let a_s = a.as_slice();
    let b_s = b.as_slice();
    for j in 0..n {
        let bj = &b_s[j * k_dim..(j + 1) * k_dim];
        for i in 0..m {
            c[(i, j)] = dotc(&a_s[i * k_dim..(i + 1) * k_dim], bj);
        }
    }
    c
}

/// `A * B^H`.
pub fn mul_a_bh(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.ncols(), b.ncols(), "mul_a_bh: inner dimensions");
    let (m, k_dim, n) = (a.nrows(), a.ncols(), b.nrows());
    let mut c = CMat::zeros(m, n);
    let a_s = a.as_slice();
    let b_s = b.as_slice();
    let c_s = c.as_mut_slice();
    for k in 0..k_dim {
        let ak = &a_s[k * m..(k + 1) * m];
        for j in 0..n {
            let bjk = b_s[k * n + j].conj();
            if bjk.re != 0.0 || bjk.im != 0.0 {
                axpy(&mut c_s[j * m..(j + 1) * m], bjk, ak);
            }
        }
    }
    c
}

/// Squared Frobenius norm.
pub fn frob_sq(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// `Re <a, b> = sum Re(conj(a_i) b_i)`, the real inner product of the
/// underlying real vector spaces.
pub fn re_inner(a: &CMat, b: &CMat) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub fn vec_norm_sq(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum()
}

/// Horizontal concatenation `[A, B]`.
pub fn hcat(a: &CMat, b: &CMat) -> CMat {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = CMat::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

fn start_vector(n: usize) -> Vec<C64> {
    (0..n)
        .map(|i| C64::new(1.0 + 0.37 * ((i as f64) * 1.618).sin(), 0.21 * ((i as f64) * 0.7).cos()))
        .collect()
}

/// Largest eigenvalue of the Hermitian PSD operator `apply` on `C^n` by power
/// iteration.
pub fn power_iteration(n: usize, iters: usize, apply: impl Fn(&[C64]) -> Vec<C64>) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut v = start_vector(n);
    let nv = vec_norm_sq(&v).sqrt();
    v.iter_mut().for_each(|z| *z /= nv);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = apply(&v);
        let nw = vec_norm_sq(&w).sqrt();
        if nw == 0.0 || !nw.is_finite() {
            return if nw.is_finite() { 0.0 } else { f64::INFINITY };
        }
        lambda = nw;
        v = w.into_iter().map(|z| z / nw).collect();
    }
    lambda
}

fn mat_vec(a: &CMat, v: &[C64]) -> Vec<C64> {
    let m = a.nrows();
    let mut out = vec![ZERO; m];
    for (k, vk) in v.iter().enumerate() {
        axpy(&mut out, *vk, &a.as_slice()[k * m..(k + 1) * m]);
    }
    out
}

fn mat_h_vec(a: &CMat, v: &[C64]) -> Vec<C64> {
    let m = a.nrows();
    (0..a.ncols()).map(|j| dotc(&a.as_slice()[j * m..(j + 1) * m], v)).collect()
}

/// `lambda_max(A^H A) = ||A||_2^2`.
pub fn spectral_norm_sq(a: &CMat, iters: usize) -> f64 {
    power_iteration(a.ncols(), iters, |v| mat_h_vec(a, &mat_vec(a, v)))
}

/// `lambda_max(A A^H) = ||A||_2^2`, iterating on the row space.
pub fn spectral_norm_sq_rows(a: &CMat, iters: usize) -> f64 {
    power_iteration(a.nrows(), iters, |v| mat_vec(a, &mat_h_vec(a, v)))
}

/// Moore-Penrose pseudo-inverse via SVD, discarding singular values below
/// `rel_tol * sigma_max`. Returns the inverse and whether any value was cut.
pub fn pinv(a: &CMat, rel_tol: f64) -> (CMat, bool) {
    if a.nrows() == 0 || a.ncols() == 0 {
        return (CMat::zeros(a.ncols(), a.nrows()), false);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let mut deficient = false;
    let r = s.len();
    let mut s_inv_uh = CMat::zeros(r, a.nrows());
    for i in 0..r {
        if s[i] > cut && s[i] > 0.0 {
            for j in 0..a.nrows() {
                s_inv_uh[(i, j)] = u[(j, i)].conj() / s[i];
            }
        } else {
            deficient = true;
        }
    }
    (mul_ah_b(&v_t, &s_inv_uh), deficient)
}
