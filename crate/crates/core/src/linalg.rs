//! Dense double-precision linear algebra: rank-revealing QR orthonormal bases,
//! uncentered PCA, and orthogonal-complement projections `P = I - QᵀQ`.

use crate::error::{Error, Result};

/// Default relative threshold below which a residual direction is treated as
/// dependent and dropped during basis extraction.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
                context: "matrix storage length",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks row slices (all of width `cols`) into a matrix.
    pub fn from_rows(cols: usize, rows: &[&[f64]]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                    context: "row width",
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self * other`, plain triple loop in ikj order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.rows,
                context: "matmul inner dimension",
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Orthonormal-row matrix `Q` (k×d) defining the projection `P = I - QᵀQ`.
///
/// `rank = 0` is allowed and means `P = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    dim: usize,
    rows: Matrix,
}

impl ProjectionBasis {
    pub fn empty(dim: usize) -> Self {
        ProjectionBasis {
            dim,
            rows: Matrix::zeros(0, dim),
        }
    }

    /// Builds a basis, verifying `QQᵀ = I` within `1e-10` max-entry deviation.
    pub fn from_rows(rows: Matrix) -> Result<Self> {
        if !rows.all_finite() {
            return Err(Error::NonFinite("projection basis rows".into()));
        }
        if rows.rows > rows.cols {
            return Err(Error::InvalidInput(format!(
                "basis rank {} exceeds dimension {}",
                rows.rows, rows.cols
            )));
        }
        let dev = orthonormality_deviation(&rows);
        if dev > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "rows are not orthonormal (max |QQᵀ - I| = {dev:.3e})"
            )));
        }
        Ok(ProjectionBasis {
            dim: rows.cols,
            rows,
        })
    }

    /// Constructor that skips the orthonormality check. The trainer uses it
    /// when re-orthonormalization is deliberately disabled, and perturbation
    /// tests use it to probe `x - Qᵀ(Qx)` off the orthonormal manifold.
    pub fn from_rows_unchecked(rows: Matrix) -> Self {
        ProjectionBasis {
            dim: rows.cols,
            rows,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rows.rows
    }

    #[inline]
    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    /// `x ← x - Qᵀ(Qx)` without allocating the output.
    pub fn project_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.dim, "projection dimension mismatch");
        if self.rank() == 0 {
            return;
        }
        let mut coeffs = vec![0.0; self.rank()];
        for (i, c) in coeffs.iter_mut().enumerate() {
            *c = dot(self.rows.row(i), x);
        }
        for (i, c) in coeffs.iter().enumerate() {
            let q = self.rows.row(i);
            for (xj, qj) in x.iter_mut().zip(q) {
                *xj -= c * qj;
            }
        }
    }
}

pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn orthonormality_deviation(rows: &Matrix) -> f64 {
    let k = rows.rows;
    let mut dev: f64 = 0.0;
    for i in 0..k {
        for j in i..k {
            let g = dot(rows.row(i), rows.row(j));
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((g - target).abs());
        }
    }
    dev
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Orthonormal basis of the row space of `rows`, by Householder QR with
/// column pivoting applied to the transpose.
///
/// Rank revelation: once the best remaining residual norm falls below
/// `rank_tol` times the largest input row norm, the rest is dropped.
pub fn qr_orthobasis(rows: &Matrix, rank_tol: f64) -> Result<ProjectionBasis> {
    if rows.cols == 0 {
        return Err(Error::InvalidInput("zero-dimensional row space".into()));
    }
    if rank_tol <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "rank_tol must be positive, got {rank_tol}"
        )));
    }
    if !rows.all_finite() {
        return Err(Error::NonFinite("qr_orthobasis input".into()));
    }
    let d = rows.cols;
    let m = rows.rows;
    if m == 0 {
        return Ok(ProjectionBasis::empty(d));
    }

    // Work on W = rowsᵀ (d×m); its columns are the input rows.
    let mut w = rows.transpose();
    let max_steps = d.min(m);
    // Householder vectors, one per completed step, each of length d - j.
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(max_steps);
    let mut col_order: Vec<usize> = (0..m).collect();
    let mut largest = 0.0f64;
    let mut rank = 0;

    for j in 0..max_steps {
        // Exact residual column norms for pivoting (no downdating).
        let mut best = j;
        let mut best_norm2 = 0.0f64;
        for c in j..m {
            let mut n2 = 0.0;
            for r in j..d {
                let v = w.get(r, c);
                n2 += v * v;
            }
            if n2 > best_norm2 {
                best_norm2 = n2;
                best = c;
            }
        }
        let resid = best_norm2.sqrt();
        if j == 0 {
            largest = resid;
        }
        if resid <= rank_tol * largest || resid == 0.0 {
            break;
        }
        if best != j {
            for r in 0..d {
                let tmp = w.get(r, j);
                w.set(r, j, w.get(r, best));
                w.set(r, best, tmp);
            }
            col_order.swap(j, best);
        }

        // Householder vector for column j below the diagonal.
        let mut v: Vec<f64> = (j..d).map(|r| w.get(r, j)).collect();
        let alpha = -v[0].signum() * resid;
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            // Apply H = I - 2vvᵀ/(vᵀv) to W[j.., j..].
            for c in j..m {
                let mut proj = 0.0;
                for (idx, r) in (j..d).enumerate() {
                    proj += v[idx] * w.get(r, c);
                }
                let scale = 2.0 * proj / vnorm2;
                for (idx, r) in (j..d).enumerate() {
                    let cur = w.get(r, c);
                    w.set(r, c, cur - scale * v[idx]);
                }
            }
        }
        reflectors.push(v);
        rank = j + 1;
    }

    let _ = col_order;
    // Basis vectors are Q e_j = H₁…Hⱼ₊₁ e_j, applied in reverse order.
    let mut basis = Matrix::zeros(rank, d);
    for j in 0..rank {
        let mut q = vec![0.0; d];
        q[j] = 1.0;
        for step in (0..=j).rev() {
            let v = &reflectors[step];
            let vnorm2 = dot(v, v);
            if vnorm2 == 0.0 {
                continue;
            }
            let mut proj = 0.0;
            for (idx, r) in (step..d).enumerate() {
                proj += v[idx] * q[r];
            }
            let scale = 2.0 * proj / vnorm2;
            for (idx, r) in (step..d).enumerate() {
                q[r] -= scale * v[idx];
            }
        }
        basis.row_mut(j).copy_from_slice(&q);
    }
    ProjectionBasis::from_rows(basis)
}

/// Top-k components of the uncentered second moment of `samples` (N×d),
/// ordered by captured moment, returned as orthonormal rows.
///
/// Components are formed inside the sample row space, so each returned row is
/// a linear combination of input samples. At most `min(k, effective rank)`
/// rows are returned.
pub fn pca_top_k(samples: &Matrix, k: usize) -> Result<Matrix> {
    if samples.rows == 0 {
        return Err(Error::InvalidInput("pca_top_k needs at least one sample".into()));
    }
    if k == 0 || k > samples.cols {
        return Err(Error::InvalidInput(format!(
            "component count {k} outside 1..={}",
            samples.cols
        )));
    }
    let basis = qr_orthobasis(samples, 1e-10)?;
    if basis.rank() == 0 {
        return Err(Error::DegenerateSubspace(
            "all samples are numerically zero".into(),
        ));
    }
    let r = basis.rank();
    let n = samples.rows;

    // Coordinates of every sample in the reduced basis: Y = samples · Bᵀ (N×r).
    let mut y = Matrix::zeros(n, r);
    for i in 0..n {
        let s = samples.row(i);
        for j in 0..r {
            y.set(i, j, dot(s, basis.rows().row(j)));
        }
    }
    // Reduced second-moment matrix M = YᵀY (r×r).
    let mut m = Matrix::zeros(r, r);
    for i in 0..n {
        let yi = y.row(i);
        for a in 0..r {
            for b in a..r {
                let v = m.get(a, b) + yi[a] * yi[b];
                m.set(a, b, v);
                m.set(b, a, v);
            }
        }
    }

    let (vals, vecs) = sym_eigen(&m);
    let lead = vals[0].max(0.0);
    let mut kept = 0;
    for &v in vals.iter().take(k.min(r)) {
        if v > 1e-12 * lead && v > 0.0 {
            kept += 1;
        } else {
            break;
        }
    }
    if kept == 0 {
        return Err(Error::DegenerateSubspace(
            "second moment is numerically zero".into(),
        ));
    }

    // Map reduced eigenvectors back: component_i = Σ_j vecs[i][j] · basis_j.
    let mut out = Matrix::zeros(kept, samples.cols);
    for i in 0..kept {
        let coeff = vecs.row(i);
        let row = out.row_mut(i);
        for (j, &c) in coeff.iter().enumerate() {
            for (o, b) in row.iter_mut().zip(basis.rows().row(j)) {
                *o += c * b;
            }
        }
    }
    Ok(out)
}

/// Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues in
/// descending order with matching eigenvectors as rows.
pub fn sym_eigen(s: &Matrix) -> (Vec<f64>, Matrix) {
    assert_eq!(s.rows, s.cols, "sym_eigen needs a square matrix");
    let n = s.rows;
    let mut a = s.clone();
    let mut v = Matrix::identity(n);
    if n == 0 {
        return (Vec::new(), v);
    }

    let frob: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = (frob * 1e-15).max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= stop * 1e-2 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // Rotate rows/columns p and q of A.
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - sn * aiq);
                    a.set(i, q, sn * aip + c * aiq);
                }
                for i in 0..n {
                    let api = a.get(p, i);
                    let aqi = a.get(q, i);
                    a.set(p, i, c * api - sn * aqi);
                    a.set(q, i, sn * api + c * aqi);
                }
                for i in 0..n {
                    let vip = v.get(p, i);
                    let viq = v.get(q, i);
                    v.set(p, i, c * vip - sn * viq);
                    v.set(q, i, sn * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (row, &i) in order.iter().enumerate() {
        vecs.row_mut(row).copy_from_slice(v.row(i));
    }
    (vals, vecs)
}

/// `x - Qᵀ(Qx)`: orthogonal projection of `x` onto the complement of the row
/// space of the basis.
pub fn apply_projection(basis: &ProjectionBasis, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: x.len(),
            context: "apply_projection vector length",
        });
    }
    let mut out = x.to_vec();
    basis.project_in_place(&mut out);
    Ok(out)
}

/// Dense `P = I - QᵀQ`. Diagnostic/test path; runtime code projects vectors
/// directly.
pub fn materialize_projection(basis: &ProjectionBasis) -> Matrix {
    let d = basis.dim();
    let mut p = Matrix::identity(d);
    for i in 0..basis.rank() {
        let q = basis.rows().row(i);
        for r in 0..d {
            let qr = q[r];
            if qr == 0.0 {
                continue;
            }
            let dst = p.row_mut(r);
            for (c, qc) in q.iter().enumerate() {
                dst[c] -= qr * qc;
            }
        }
    }
    p
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
            context: "cosine_similarity vector length",
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok(dot(a, b) / (na * nb))
}
