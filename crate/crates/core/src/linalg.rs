//! Dense matrix arithmetic and a deterministic SVD.
//!
//! Everything here is plain f64 with pinned summation orders: the update
//! protocol re-derives frozen factors from the deployed weights on the edge,
//! so two runs over the same bytes must produce the same bytes, on any
//! platform. Only IEEE-exact operations (+, -, *, /, sqrt) are used inside
//! the decomposition.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinalgError {
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry in input matrix")]
    NonFinite,
    #[error("shape mismatch: {left} vs {right} for {op}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("SVD did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("empty matrix: rows and cols must be at least 1")]
    Empty,
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product. Each output entry accumulates over k in ascending
    /// order, which fixes the summation order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose. Inner products
    /// run over contiguous rows of both operands.
    pub fn matmul_transb(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul_transb",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "add",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Canonicalised SVD triple: `source = u * diag(s) * v^T`.
///
/// `u` is o x m, `v` is i x m with m = min(o, i); `s` is sorted descending.
/// In each column of `u` the entry of largest magnitude is nonnegative (ties
/// broken by lowest row index), with the matching column of `v` negated in
/// tandem.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

const MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

/// Deterministic SVD by one-sided Jacobi rotations.
///
/// Identical input bits yield identical output bits: the sweep order, the
/// rotation formulas and the final sort are all fixed, and only IEEE-exact
/// arithmetic is involved.
pub fn svd(a: &Matrix) -> Result<SvdFactors, LinalgError> {
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::Empty);
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    // Work on a tall matrix so the rotation space has min(o, i) columns.
    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (mut u, s, mut v) = jacobi_onesided(&work)?;
    if transposed {
        std::mem::swap(&mut u, &mut v);
    }
    let mut factors = SvdFactors { u, s, v };
    canonicalise(&mut factors);
    Ok(factors)
}

/// One-sided Jacobi on a tall matrix (rows >= cols). Returns (U, s, V) with
/// U rows x cols, V cols x cols, s descending.
fn jacobi_onesided(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix), LinalgError> {
    let rows = a.rows;
    let n = a.cols;
    // Column-major working copies: rotations touch whole columns.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        converged = true;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (head, tail) = w.split_at_mut(q);
                let wp = &mut head[p];
                let wq = &mut tail[0];
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for (&x, &y) in wp.iter().zip(wq.iter()) {
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq * apq <= JACOBI_TOL * JACOBI_TOL * app * aqq {
                    continue;
                }
                converged = false;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(wp, wq, c, s);
                let (vh, vt) = v.split_at_mut(q);
                rotate(&mut vh[p], &mut vt[0], c, s);
            }
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut norms: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    // Descending by singular value, ties by original column index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut placed: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        let ucol: Vec<f64> = if sigma > 0.0 {
            w[src].iter().map(|x| x / sigma).collect()
        } else {
            complete_basis(rows, &placed)
        };
        for i in 0..rows {
            u.set(i, k, ucol[i]);
        }
        for i in 0..n {
            vm.set(i, k, v[src][i]);
        }
        placed.push(ucol);
    }
    norms.clear();
    Ok((u, s, vm))
}

#[inline]
fn rotate(p: &mut [f64], q: &mut [f64], c: f64, s: f64) {
    for (x, y) in p.iter_mut().zip(q.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

/// Deterministic orthonormal completion for zero singular directions: the
/// first standard basis vector with enough residual after projecting out the
/// existing columns, Gram-Schmidt orthogonalised.
fn complete_basis(dim: usize, existing: &[Vec<f64>]) -> Vec<f64> {
    for k in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[k] = 1.0;
        for col in existing {
            let proj: f64 = col.iter().zip(cand.iter()).map(|(a, b)| a * b).sum();
            for (c, &e) in cand.iter_mut().zip(col.iter()) {
                *c -= proj * e;
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            return cand;
        }
    }
    unreachable!("orthonormal completion always exists for fewer columns than rows")
}

/// Sign canonicalisation; idempotent. Exposed for the idempotence check.
pub fn canonicalise(f: &mut SvdFactors) {
    let (o, m) = (f.u.rows(), f.u.cols());
    let i = f.v.rows();
    for k in 0..m {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..o {
            let a = f.u.get(r, k).abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if f.u.get(best, k) < 0.0 {
            for r in 0..o {
                f.u.set(r, k, -f.u.get(r, k));
            }
            for r in 0..i {
                f.v.set(r, k, -f.v.get(r, k));
            }
        }
    }
}

impl SvdFactors {
    pub fn rank_limit(&self) -> usize {
        self.s.len()
    }

    /// `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let scaled = scale_cols(&self.u, &self.s);
        scaled.matmul_transb(&self.v).expect("factor shapes agree")
    }
}

/// Copies `m` with column k scaled by `scale[k]`.
pub fn scale_cols(m: &Matrix, scale: &[f64]) -> Matrix {
    debug_assert_eq!(m.cols(), scale.len());
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * scale[j])
}

/// Rank-r truncation: `L = U_{1:r} * diag(s_{1:r})`, `R = V_{1:r}^T`.
/// `L * R` is the best rank-r approximation of the source matrix.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<(Matrix, Matrix), LinalgError> {
    let m = f.s.len();
    if r < 1 || r > m {
        return Err(LinalgError::RankOutOfRange { rank: r, max: m });
    }
    let o = f.u.rows();
    let i = f.v.rows();
    let l = Matrix::from_fn(o, r, |row, k| f.u.get(row, k) * f.s[k]);
    let rm = Matrix::from_fn(r, i, |k, col| f.v.get(col, k));
    Ok((l, rm))
}

/// Max-abs deviation of `m^T m` from the identity.
pub fn gram_identity_error(m: &Matrix) -> f64 {
    let gram = m.transpose().matmul(m).expect("square gram");
    let n = gram.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// Relative Frobenius reconstruction error of `f` against `a`.
pub fn reconstruction_error(a: &Matrix, f: &SvdFactors) -> f64 {
    let recon = f.reconstruct();
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.data().iter().zip(recon.data().iter()) {
        num += (x - y) * (x - y);
        den += x * x;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;

    pub(crate) fn random_matrix(rng: &mut Xoshiro256StarStar, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0))
    }

    // Independent oracle: reconstruction and Gram checks via raw loops, no
    // Matrix methods involved.
    fn oracle_check(a: &Matrix, f: &SvdFactors, tol_orth: f64, tol_recon: f64) {
        let (o, i) = (a.rows(), a.cols());
        let m = f.s.len();
        assert_eq!(m, o.min(i));
        assert_eq!((f.u.rows(), f.u.cols()), (o, m));
        assert_eq!((f.v.rows(), f.v.cols()), (i, m));
        for w in f.s.windows(2) {
            assert!(w[0] >= w[1], "singular values not descending: {:?}", f.s);
        }
        assert!(f.s.iter().all(|&x| x >= 0.0));
        // Gram matrices.
        for (mat, dim) in [(&f.u, o), (&f.v, i)] {
            for c1 in 0..m {
                for c2 in 0..m {
                    let mut dot = 0.0;
                    for r in 0..dim {
                        dot += mat.get(r, c1) * mat.get(r, c2);
                    }
                    let target = if c1 == c2 { 1.0 } else { 0.0 };
                    assert!(
                        (dot - target).abs() <= tol_orth,
                        "gram deviation {} at ({c1},{c2})",
                        (dot - target).abs()
                    );
                }
            }
        }
        // Entrywise reconstruction.
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..o {
            for c in 0..i {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += f.u.get(r, k) * f.s[k] * f.v.get(c, k);
                }
                num += (acc - a.get(r, c)) * (acc - a.get(r, c));
                den += a.get(r, c) * a.get(r, c);
            }
        }
        let rel = if den == 0.0 { num.sqrt() } else { (num / den).sqrt() };
        assert!(rel <= tol_recon, "reconstruction error {rel}");
    }

    #[test]
    fn svd_of_diagonal_is_sorted_identity() {
        let a = Matrix::diag(&[3.0, 2.0, 1.0]);
        let f = svd(&a).unwrap();
        assert_eq!(f.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(f.u, Matrix::identity(3));
        assert_eq!(f.v, Matrix::identity(3));
    }

    #[test]
    fn svd_of_identity() {
        let f = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0]);
    }

    #[test]
    fn svd_seeded_rectangular_passes_oracle() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(101);
        let a = random_matrix(&mut rng, 3, 4);
        let f = svd(&a).unwrap();
        oracle_check(&a, &f, 1e-10, 1e-9);
        let a = random_matrix(&mut rng, 4, 3);
        let f = svd(&a).unwrap();
        oracle_check(&a, &f, 1e-10, 1e-9);
    }

    #[test]
    fn svd_handles_rank_deficiency_and_zero() {
        let a = Matrix::zeros(3, 2);
        let f = svd(&a).unwrap();
        assert_eq!(f.s, vec![0.0, 0.0]);
        oracle_check(&a, &f, 1e-10, 1e-9);
        // Rank-one 3x3.
        let a = Matrix::from_fn(3, 3, |_, _| 1.0);
        let f = svd(&a).unwrap();
        assert!((f.s[0] - 3.0).abs() < 1e-12);
        assert!(f.s[1].abs() < 1e-12 && f.s[2].abs() < 1e-12);
        oracle_check(&a, &f, 1e-10, 1e-9);
    }

    #[test]
    fn svd_rejects_bad_input() {
        let a = Matrix::new(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert_eq!(svd(&a).unwrap_err(), LinalgError::NonFinite);
        assert!(matches!(
            svd(&Matrix::zeros(0, 3)).unwrap_err(),
            LinalgError::Empty
        ));
    }

    #[test]
    fn svd_is_bitwise_deterministic() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(55);
        let a = random_matrix(&mut rng, 7, 5);
        let f1 = svd(&a).unwrap();
        let f2 = svd(&a).unwrap();
        assert_eq!(f1.u.data(), f2.u.data());
        assert_eq!(f1.s, f2.s);
        assert_eq!(f1.v.data(), f2.v.data());
    }

    #[test]
    fn canonicalise_is_idempotent_bitwise() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(77);
        let a = random_matrix(&mut rng, 6, 4);
        let mut f = svd(&a).unwrap();
        let (u1, v1) = (f.u.data().to_vec(), f.v.data().to_vec());
        canonicalise(&mut f);
        assert_eq!(f.u.data(), u1.as_slice());
        assert_eq!(f.v.data(), v1.as_slice());
    }

    #[test]
    fn truncate_full_rank_reconstructs() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(13);
        let a = random_matrix(&mut rng, 4, 6);
        let f = svd(&a).unwrap();
        let (l, r) = truncate(&f, f.rank_limit()).unwrap();
        let recon = l.matmul(&r).unwrap();
        let rel = {
            let diff: f64 = a
                .data()
                .iter()
                .zip(recon.data().iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (diff.sqrt()) / a.frobenius_norm()
        };
        assert!(rel <= 1e-9);
    }

    #[test]
    fn truncate_diagonal_drops_smallest_singular_value() {
        let a = Matrix::diag(&[3.0, 2.0, 1.0]);
        let f = svd(&a).unwrap();
        let (l, r) = truncate(&f, 2).unwrap();
        assert_eq!((l.rows(), l.cols()), (3, 2));
        assert_eq!((r.rows(), r.cols()), (2, 3));
        let recon = l.matmul(&r).unwrap();
        let mut err = 0.0;
        for (x, y) in a.data().iter().zip(recon.data().iter()) {
            err += (x - y) * (x - y);
        }
        assert!((err.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truncate_error_equals_discarded_spectrum() {
        // Oracle: compute the full spectrum, sum the discarded squares.
        let mut rng = Xoshiro256StarStar::seed_from_u64(99);
        let a = random_matrix(&mut rng, 5, 7);
        let f = svd(&a).unwrap();
        let (l, r) = truncate(&f, 3).unwrap();
        let recon = l.matmul(&r).unwrap();
        let mut err = 0.0;
        for (x, y) in a.data().iter().zip(recon.data().iter()) {
            err += (x - y) * (x - y);
        }
        let expected = (f.s[3] * f.s[3] + f.s[4] * f.s[4]).sqrt();
        assert!((err.sqrt() - expected).abs() < 1e-9);
    }

    #[test]
    fn truncate_rank_out_of_range() {
        let f = svd(&Matrix::identity(3)).unwrap();
        assert!(matches!(
            truncate(&f, 0),
            Err(LinalgError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            truncate(&f, 4),
            Err(LinalgError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let a = random_matrix(&mut rng, 3, 3);
        let prod = Matrix::identity(3).matmul(&a).unwrap();
        assert_eq!(prod.data(), a.data());
        let row = Matrix::new(1, 2, vec![2.0, 3.0]).unwrap();
        let col = Matrix::new(2, 1, vec![4.0, 5.0]).unwrap();
        assert_eq!(row.matmul(&col).unwrap().data(), &[23.0]);
    }

    #[test]
    fn transpose_is_involutive_bitwise() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(6);
        let a = random_matrix(&mut rng, 4, 7);
        assert_eq!(a.transpose().transpose().data(), a.data());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(LinalgError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eckart_young_on_random_competitors() {
        let mut rng = Xoshiro256StarStar::seed_from_u64(2024);
        let a = random_matrix(&mut rng, 6, 5);
        let f = svd(&a).unwrap();
        let r = 2;
        let (l, rm) = truncate(&f, r).unwrap();
        let best = l.matmul(&rm).unwrap();
        let mut best_err = 0.0;
        for (x, y) in a.data().iter().zip(best.data().iter()) {
            best_err += (x - y) * (x - y);
        }
        let best_err = best_err.sqrt();
        for _ in 0..100 {
            // Random rank-r competitor B = X * Y.
            let x = random_matrix(&mut rng, 6, r);
            let y = random_matrix(&mut rng, r, 5);
            let b = x.matmul(&y).unwrap();
            let mut err = 0.0;
            for (p, q) in a.data().iter().zip(b.data().iter()) {
                err += (p - q) * (p - q);
            }
            assert!(best_err <= err.sqrt() + 1e-9);
        }
    }
}
