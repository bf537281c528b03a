//! Dense row-major matrices, observed-index masks and the handful of kernels
//! the engine and the oracle are built from.
//!
//! Every reduction runs in ascending index order, so results are bitwise
//! reproducible regardless of how callers schedule work across threads.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Dense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Dense {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Dense::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::config(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "non-finite value at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Dense { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Dense::from_vec(rows.len(), cols, rows.concat())
    }

    /// Builds a matrix by evaluating `f(row, col)` in row-major order.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Dense { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_block(&self, start: usize, end: usize) -> Dense {
        Dense::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Dense {
        Dense::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, s: f64) -> Dense {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        Dense {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += s * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Dense, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Dense) -> Dense {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Dense {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Dense) -> Result<Dense> {
        if self.cols != other.rows {
            return Err(Error::config(format!(
                "matmul dimension mismatch: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Dense::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.values[i * self.cols + k];
                let b_row = &other.values[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Dense) -> Result<Dense> {
        if self.rows != other.rows {
            return Err(Error::config(format!(
                "transposed matmul dimension mismatch: ({}x{})ᵀ times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Dense::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for i in 0..self.cols {
                let a = self.values[k * self.cols + i];
                let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Dense) -> Result<Dense> {
        if self.cols != other.cols {
            return Err(Error::config(format!(
                "matmul-transpose dimension mismatch: {}x{} times ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Dense::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · self`. Each off-diagonal pair is computed once and mirrored,
    /// so the result is exactly symmetric.
    pub fn gram(&self) -> Dense {
        let n = self.cols;
        let mut out = Dense::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for k in 0..self.rows {
                    s += self.values[k * n + i] * self.values[k * n + j];
                }
                out.values[i * n + j] = s;
                out.values[j * n + i] = s;
            }
        }
        out
    }

    /// Σ entries², summed in storage order.
    pub fn squared_norm(&self) -> f64 {
        let mut s = 0.0;
        for v in &self.values {
            s += v * v;
        }
        s
    }

    pub fn frob_norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Failure of [`solve_spd`].
#[derive(Debug, Clone, PartialEq)]
pub enum SpdError {
    Dimension(String),
    /// Pivot `index` came out as `pivot`, which is not safely positive.
    NotPositiveDefinite { index: usize, pivot: f64 },
}

impl std::fmt::Display for SpdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpdError::Dimension(m) => f.write_str(m),
            SpdError::NotPositiveDefinite { index, pivot } => {
                write!(f, "Cholesky pivot {index} is {pivot:e}")
            }
        }
    }
}

/// Solves `(S + ridge·I) X = B` by Cholesky factorization.
///
/// A pivot at or below `n·ε·max(diag)` counts as a factorization failure,
/// which catches numerically rank-deficient Gram matrices as well as
/// indefinite ones.
pub fn solve_spd(s: &Dense, b: &Dense, ridge: f64) -> std::result::Result<Dense, SpdError> {
    let n = s.rows;
    if s.cols != n {
        return Err(SpdError::Dimension(format!(
            "system matrix must be square, got {}x{}",
            s.rows, s.cols
        )));
    }
    if b.rows != n {
        return Err(SpdError::Dimension(format!(
            "right-hand side has {} rows, system has {n}",
            b.rows
        )));
    }

    let max_diag = (0..n).map(|i| s.get(i, i) + ridge).fold(0.0_f64, f64::max);
    let floor = n as f64 * f64::EPSILON * max_diag;

    // Lower-triangular factor, row-major.
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = s.get(j, j) + ridge;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !d.is_finite() || d <= floor {
            return Err(SpdError::NotPositiveDefinite { index: j, pivot: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = s.get(i, j);
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / d;
        }
    }

    let mut x = b.clone();
    for c in 0..b.cols {
        // L y = b
        for i in 0..n {
            let mut v = x.get(i, c);
            for k in 0..i {
                v -= l[i * n + k] * x.get(k, c);
            }
            x.set(i, c, v / l[i * n + i]);
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = x.get(i, c);
            for k in (i + 1)..n {
                v -= l[k * n + i] * x.get(k, c);
            }
            x.set(i, c, v / l[i * n + i]);
        }
    }
    Ok(x)
}

/// Sorted, duplicate-free set of `(row, col)` positions inside a `rows × cols` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedIndexSet {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
}

impl MaskedIndexSet {
    /// Sorts and validates the positions; duplicates and out-of-range pairs are errors.
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_unstable();
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::config(format!(
                "mask position ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        if let Some(w) = entries.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate mask position {:?}", w[0])));
        }
        Ok(MaskedIndexSet {
            rows,
            cols,
            entries,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        MaskedIndexSet {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let entries = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .collect();
        MaskedIndexSet {
            rows,
            cols,
            entries,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }
}

/// Returns a copy of `m` whose masked positions hold `values` (aligned with
/// the mask's sorted order). Values are copied, never recomputed.
pub fn masked_assign(m: &Dense, mask: &MaskedIndexSet, values: &[f64]) -> Result<Dense> {
    if (mask.rows, mask.cols) != (m.rows, m.cols) {
        return Err(Error::config(format!(
            "mask is {}x{}, matrix is {}x{}",
            mask.rows, mask.cols, m.rows, m.cols
        )));
    }
    if values.len() != mask.len() {
        return Err(Error::config(format!(
            "mask has {} positions but {} values were supplied",
            mask.len(),
            values.len()
        )));
    }
    let mut out = m.clone();
    for (&(r, c), &v) in mask.entries.iter().zip(values) {
        out.values[r * m.cols + c] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Dense {
        Dense::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Dense {
        Dense::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Dense, b: &Dense) -> Dense {
        let mut out = Dense::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(Dense::identity(2).matmul(&b).unwrap(), b);
        assert_eq!(
            m(&[&[1.0, 2.0]]).matmul(&m(&[&[3.0], &[4.0]])).unwrap(),
            m(&[&[11.0]])
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 2);
        let b = random(&mut rng, 2, 4);
        assert_eq!(a.matmul(&b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, 5, 3);
        let b = random(&mut rng, 5, 4);
        let c = random(&mut rng, 6, 3);
        assert_eq!(a.t_matmul(&b).unwrap(), triple_loop(&a.transpose(), &b));
        assert_eq!(a.matmul_t(&c).unwrap(), triple_loop(&a, &c.transpose()));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = Dense::zeros(2, 3).matmul(&Dense::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn gram_examples() {
        assert_eq!(Dense::identity(3).gram(), Dense::identity(3));
        let a = m(&[&[1.0, 1.0], &[1.0, 2.0], &[0.0, 1.0]]);
        assert_eq!(a.gram(), m(&[&[2.0, 3.0], &[3.0, 6.0]]));
        assert_eq!(Dense::zeros(4, 2).gram(), Dense::zeros(2, 2));
    }

    #[test]
    fn solve_spd_examples() {
        let x = solve_spd(&Dense::identity(2), &m(&[&[7.0], &[9.0]]), 0.0).unwrap();
        assert_eq!(x, m(&[&[7.0], &[9.0]]));

        let s = m(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let x = solve_spd(&s, &m(&[&[2.0], &[8.0]]), 0.0).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((x.get(1, 0) - 2.0).abs() < 1e-12);

        // Cramer's rule with det = 3: x = (3·6 − 3·8)/3, y = (2·8 − 3·3)/3.
        let s = m(&[&[2.0, 3.0], &[3.0, 6.0]]);
        let x = solve_spd(&s, &m(&[&[3.0], &[8.0]]), 0.0).unwrap();
        assert!((x.get(0, 0) + 2.0).abs() < 1e-12);
        assert!((x.get(1, 0) - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn solve_spd_rejects_singular_and_recovers_with_ridge() {
        let s = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let b = m(&[&[1.0], &[1.0]]);
        assert!(matches!(
            solve_spd(&s, &b, 0.0),
            Err(SpdError::NotPositiveDefinite { index: 1, .. })
        ));
        let x = solve_spd(&s, &b, 1e-3).unwrap();
        assert!(x.is_finite());
        assert!(matches!(
            solve_spd(&Dense::zeros(2, 3), &b, 0.0),
            Err(SpdError::Dimension(_))
        ));
    }

    #[test]
    fn masked_assign_examples() {
        let base = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(
            masked_assign(&base, &MaskedIndexSet::empty(2, 2), &[]).unwrap(),
            base
        );
        let full = MaskedIndexSet::full(2, 2);
        assert_eq!(
            masked_assign(&base, &full, &[9.0, 8.0, 7.0, 6.0]).unwrap(),
            m(&[&[9.0, 8.0], &[7.0, 6.0]])
        );
        let diag = MaskedIndexSet::new(2, 2, vec![(1, 1), (0, 0)]).unwrap();
        assert_eq!(
            masked_assign(&base, &diag, &[5.0, 3.0]).unwrap(),
            m(&[&[5.0, 2.0], &[3.0, 3.0]])
        );
    }

    #[test]
    fn mask_validation() {
        assert!(MaskedIndexSet::new(2, 2, vec![(2, 0)]).is_err());
        assert!(MaskedIndexSet::new(2, 2, vec![(0, 1), (0, 1)]).is_err());
        let base = Dense::zeros(3, 3);
        assert!(masked_assign(&base, &MaskedIndexSet::empty(2, 2), &[]).is_err());
    }

    #[test]
    fn frob_norm_examples() {
        assert_eq!(Dense::zeros(3, 3).frob_norm(), 0.0);
        assert_eq!(m(&[&[3.0, 4.0]]).frob_norm(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random(&mut rng, 4, 4);
        let mut s = 0.0;
        for r in 0..4 {
            for c in 0..4 {
                s += a.get(r, c) * a.get(r, c);
            }
        }
        let oracle = s.sqrt();
        assert!((a.frob_norm() - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Dense::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Dense::from_vec(1, 2, vec![1.0]).is_err());
    }

    fn arb_dense(max: usize) -> impl Strategy<Value = Dense> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            prop::collection::vec(-10.0..10.0f64, r * c)
                .prop_map(move |v| Dense::from_vec(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn identity_is_exact(a in arb_dense(6)) {
            prop_assert_eq!(a.matmul(&Dense::identity(a.cols())).unwrap(), a.clone());
            prop_assert_eq!(Dense::identity(a.rows()).matmul(&a).unwrap(), a);
        }

        #[test]
        fn gram_is_bitwise_symmetric(a in arb_dense(7)) {
            let g = a.gram();
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    prop_assert_eq!(g.get(i, j).to_bits(), g.get(j, i).to_bits());
                }
            }
        }

        #[test]
        fn solve_spd_round_trip(seed in any::<u64>(), n in 1usize..8, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, n, n);
            let mut s = a.matmul_t(&a).unwrap();
            s.add_scaled(&Dense::identity(n), 1.0);
            let b = random(&mut rng, n, k);
            let x = solve_spd(&s, &b, 0.0).unwrap();
            let resid = s.matmul(&x).unwrap().sub(&b).frob_norm();
            prop_assert!(resid <= 1e-8 * (1.0 + b.frob_norm()));
        }

        #[test]
        fn masked_assign_is_idempotent(seed in any::<u64>(), density in 0.0..1.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random(&mut rng, 5, 4);
            let positions: Vec<_> = (0..5)
                .flat_map(|r| (0..4).map(move |c| (r, c)))
                .filter(|_| rng.random_bool(density))
                .collect();
            let mask = MaskedIndexSet::new(5, 4, positions).unwrap();
            let values: Vec<f64> = (0..mask.len()).map(|i| i as f64 * 0.5).collect();
            let once = masked_assign(&base, &mask, &values).unwrap();
            let twice = masked_assign(&once, &mask, &values).unwrap();
            prop_assert_eq!(once.as_slice(), twice.as_slice());
        }
    }
}
