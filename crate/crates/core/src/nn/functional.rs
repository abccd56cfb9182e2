//! Stateless vector helpers shared by the metric head and the losses.

use super::tensor::{lane_dot, Real};

/// Numerically stable softmax of `z`, written into `out`.
pub fn softmax_into<T: Real>(z: &[T], out: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    softmax_into(z, &mut out);
    out
}

/// Vector-Jacobian product of softmax: `dz = p * (dp - <p, dp>)`.
pub fn softmax_backward<T: Real>(p: &[T], dp: &[T], dz: &mut [T]) {
    let inner = p.iter().zip(dp).map(|(&a, &b)| a * b).sum::<T>();
    for ((d, &pi), &gi) in dz.iter_mut().zip(p).zip(dp) {
        *d = pi * (gi - inner);
    }
}

pub fn norm<T: Real>(x: &[T]) -> T {
    lane_dot(x, x).sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    lane_dot(a, b) / (na * nb)
}

/// Accumulates `g * d cos(a, b) / da` and `g * d cos(a, b) / db`.
pub fn cosine_backward<T: Real>(a: &[T], b: &[T], g: T, da: &mut [T], db: &mut [T]) {
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return;
    }
    let cos = lane_dot(a, b) / (na * nb);
    let inv = T::one() / (na * nb);
    let (ka, kb) = (cos / (na * na), cos / (nb * nb));
    for i in 0..a.len() {
        da[i] += g * (b[i] * inv - ka * a[i]);
        db[i] += g * (a[i] * inv - kb * b[i]);
    }
}

/// Unit-normalizes every column of a row-major `rows x cols` matrix.
/// Zero columns stay zero. Returns the directions and the column norms.
pub fn unit_columns<T: Real>(x: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let mut norms = vec![T::zero(); cols];
    for r in 0..rows {
        for (n, &v) in norms.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    let mut dirs = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for j in 0..cols {
            if norms[j] > T::zero() {
                dirs[r * cols + j] = x[r * cols + j] / norms[j];
            }
        }
    }
    (dirs, norms)
}

/// Accumulates into `dx` the gradient through [`unit_columns`].
pub fn unit_columns_backward<T: Real>(
    dirs: &[T],
    norms: &[T],
    d_dirs: &[T],
    rows: usize,
    cols: usize,
    dx: &mut [T],
) {
    let mut proj = vec![T::zero(); cols];
    for r in 0..rows {
        for j in 0..cols {
            proj[j] += dirs[r * cols + j] * d_dirs[r * cols + j];
        }
    }
    for r in 0..rows {
        for j in 0..cols {
            if norms[j] > T::zero() {
                let i = r * cols + j;
                dx[i] += (d_dirs[i] - dirs[i] * proj[j]) / norms[j];
            }
        }
    }
}
