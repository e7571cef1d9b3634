//! Packed lower-triangular matrices.
//!
//! Entries are stored row-major: row `i` occupies `i(i+1)/2 .. i(i+1)/2 + i + 1`.

/// Number of stored entries of an `n × n` lower-triangular matrix.
#[inline]
pub const fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Offset of entry `(i, j)` with `j <= i`.
#[inline]
pub const fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Iterator over `(i, j)` pairs in packed order.
pub fn packed_entries(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

/// Dense-free lower-triangular matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    n: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; packed_len(n)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[packed_index(i, i)] = 1.0;
        }
        m
    }

    /// Builds from packed row-major storage.
    ///
    /// # Panics
    /// If `data.len() != n(n+1)/2`.
    pub fn from_packed(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), packed_len(n), "packed length mismatch");
        Self { n, data }
    }

    /// Builds from a dense row-major matrix, ignoring the strict upper triangle.
    pub fn from_dense(n: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), n * n);
        let data = packed_entries(n).map(|(i, j)| dense[i * n + j]).collect();
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Entry `(i, j)`; zero above the diagonal.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.data[packed_index(i, j)]
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let start = packed_index(i, 0);
        &self.data[start..start + i + 1]
    }

    pub fn diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.data[packed_index(i, i)])
    }

    pub fn min_diagonal(&self) -> f64 {
        self.diagonal().fold(f64::INFINITY, f64::min)
    }

    /// Solves `L z = b` in place by forward substitution.
    #[inline]
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        let mut start = 0;
        for i in 0..n {
            let row = &self.data[start..start + i + 1];
            let mut acc = b[i];
            for j in 0..i {
                acc -= row[j] * b[j];
            }
            b[i] = acc / row[i];
            start += i + 1;
        }
    }

    /// Solves `Lᵀ y = b` in place by back substitution.
    #[inline]
    pub fn solve_transpose_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(b.len(), n);
        for i in (0..n).rev() {
            let start = packed_index(i, 0);
            let row = &self.data[start..start + i + 1];
            let yi = b[i] / row[i];
            b[i] = yi;
            for j in 0..i {
                b[j] -= row[j] * yi;
            }
        }
    }

    /// `L v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `Lᵀ v`.
    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let vi = v[i];
            for (j, lij) in self.row(i).iter().enumerate() {
                out[j] += lij * vi;
            }
        }
        out
    }

    /// Product of two lower-triangular matrices, again lower triangular.
    pub fn mul(&self, other: &LowerTriangular) -> LowerTriangular {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = LowerTriangular::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in j..=i {
                    acc += self.data[packed_index(i, k)] * other.data[packed_index(k, j)];
                }
                out.data[packed_index(i, j)] = acc;
            }
        }
        out
    }

    /// Dense row-major `L Lᵀ`.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.n;
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let ri = self.row(i);
                let rj = self.row(j);
                let s: f64 = ri[..=j].iter().zip(rj).map(|(a, b)| a * b).sum();
                v[i * n + j] = s;
                v[j * n + i] = s;
            }
        }
        v
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n;
        let mut d = vec![0.0; n * n];
        for (i, j) in packed_entries(n) {
            d[i * n + j] = self.data[packed_index(i, j)];
        }
        d
    }
}

/// Dense row-major `L Lᵀ` of a lower-triangular factor.
pub fn covariance_from_factor(l: &LowerTriangular) -> Vec<f64> {
    l.covariance()
}
