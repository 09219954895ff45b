//! Small dense helpers. The problem sizes here (tens of buses, a few
//! dozen time slots) never warrant a BLAS.

use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    /// Builds from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_symmetric(&self, tol: S) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// `self * x`
    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * y`
    pub fn tr_mul_vec(&self, y: &[S]) -> Vec<S> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![S::zero(); self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == S::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    pub fn mul(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == S::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let cur = out.get(i, j);
                    out.set(i, j, cur + a * other.get(k, j));
                }
            }
        }
        out
    }

    pub fn scale(&self, k: S) -> Matrix<S> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub fn sub<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn dist2<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<S>()
        .sqrt()
}

/// `‖a − b‖ / max(‖b‖, tiny)`
pub fn rel_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    let denom = norm2(b).max(S::min_positive_value());
    dist2(a, b) / denom
}

pub fn mean<S: Scalar>(a: &[S]) -> S {
    if a.is_empty() {
        return S::zero();
    }
    a.iter().copied().sum::<S>() / S::from_usize(a.len()).unwrap()
}

/// Population standard deviation.
pub fn std_dev<S: Scalar>(a: &[S]) -> S {
    if a.is_empty() {
        return S::zero();
    }
    let m = mean(a);
    let var = a.iter().map(|&x| (x - m) * (x - m)).sum::<S>() / S::from_usize(a.len()).unwrap();
    var.sqrt()
}

/// Largest eigenvalue of a symmetric positive semidefinite operator by
/// power iteration. `apply` maps `x` to `Hx`; the start vector is the
/// deterministic all-ones direction perturbed by index so that it is not
/// orthogonal to the dominant eigenvector in the symmetric cases used here.
pub fn power_iteration<S: Scalar>(
    dim: usize,
    mut apply: impl FnMut(&[S]) -> Vec<S>,
    max_iter: usize,
    rel_tol: S,
) -> S {
    if dim == 0 {
        return S::zero();
    }
    let mut x: Vec<S> = (0..dim)
        .map(|i| S::one() + S::of(1e-3) * S::from_usize(i % 7).unwrap())
        .collect();
    let n0 = norm2(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut lambda = S::zero();
    for _ in 0..max_iter {
        let y = apply(&x);
        let next = dot(&x, &y);
        let ny = norm2(&y);
        if ny == S::zero() {
            return S::zero();
        }
        x = y.into_iter().map(|v| v / ny).collect();
        if (next - lambda).abs() <= rel_tol * next.abs().max(S::min_positive_value()) {
            return next.max(ny);
        }
        lambda = next;
    }
    lambda
}
