//! Dense kernels shared by the forward and backward passes.

use super::Real;

/// `out = a[m,k] · b[k,n]` (+ `out` when `accumulate`).
pub(crate) fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, out);
}

/// `out = a[m,k] · b[n,k]ᵀ`.
pub(crate) fn mm_bt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta, out);
}

/// `out = a[k,m]ᵀ · b[k,n]`.
pub(crate) fn mm_at<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, out);
}

/// Adds `bias` to every row of `out`.
pub(crate) fn add_rows<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

/// Column sums of a row-major matrix with `cols` columns, accumulated into `acc`.
pub(crate) fn sum_rows_into<T: Real>(m: &[T], acc: &mut [T]) {
    for row in m.chunks(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `ln cosh(u)` without overflow.
pub(crate) fn ln_cosh<T: Real>(u: T) -> T {
    let a = u.abs();
    let two = T::one() + T::one();
    a + (-two * a).exp().ln_1p() - two.ln()
}

/// Log density of the logistic distribution, `-ln(4s) - 2 ln cosh((x - μ) / 2s)`.
pub fn logistic_log_density<T: Real>(x: T, mu: T, s: T) -> T {
    let two = T::one() + T::one();
    let four = two + two;
    -(four * s).ln() - two * ln_cosh((x - mu) / (two * s))
}

/// `∂/∂x` of [`logistic_log_density`]: `-tanh((x - μ) / 2s) / s`.
pub fn logistic_dlog_dx<T: Real>(x: T, mu: T, s: T) -> T {
    let two = T::one() + T::one();
    -((x - mu) / (two * s)).tanh() / s
}
