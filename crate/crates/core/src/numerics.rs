//! Dense real linear algebra used by the merging formulas.
//!
//! Storage is row-major `f64`. Feature matrices are kept samples-as-columns
//! (`d × S`), weights as `d_in × d_out`, so a layer output is `Wᵀ·X`.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Relative tolerance for treating a matrix as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Pivots below this fraction of `‖A‖_F` are treated as zero.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e-12;

/// A dense matrix stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(r, c)])?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// # Panics
    /// Panics on ragged or empty input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data).expect("non-empty rows")
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("hcat of zero matrices".into()))?;
        let rows = first.rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::Shape(format!(
                "hcat row mismatch: {} vs {}",
                rows, bad.rows
            )));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                out.data[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(p.row(r));
                offset += p.cols;
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start < end && end <= self.cols, "column range out of bounds");
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn tr_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "transposed matmul: ({}x{})ᵀ · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let m = self.cols;
        let n = other.cols;
        let mut out = Matrix::zeros(m, n);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F`.
    pub fn distance(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `left · rightᵀ` for two `d × S` matrices.
///
/// Each entry is a row-by-row dot product, so `gram(x, x)` is exactly
/// symmetric.
pub fn gram(left: &Matrix, right: &Matrix) -> Result<Matrix> {
    if left.shape() != right.shape() {
        return Err(Error::Shape(format!(
            "gram: {}x{} vs {}x{}",
            left.rows, left.cols, right.rows, right.cols
        )));
    }
    let d = left.rows;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        let li = left.row(i);
        for j in 0..d {
            let rj = right.row(j);
            out.data[i * d + j] = li.iter().zip(rj).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm_sq().sqrt()
}

/// `g + alpha · ‖g‖_F · I`.
pub fn regularize_gram(g: &Matrix, alpha: f64) -> Result<Matrix> {
    if g.rows != g.cols {
        return Err(Error::Shape(format!(
            "regularize_gram needs a square matrix, got {}x{}",
            g.rows, g.cols
        )));
    }
    let mut out = g.clone();
    if alpha == 0.0 {
        return Ok(out);
    }
    let shift = alpha * frobenius_norm(g);
    for i in 0..g.rows {
        out[(i, i)] += shift;
    }
    Ok(out)
}

/// Solves `a · x = b` for symmetric `a`.
///
/// `a` is symmetrized as `(a + aᵀ)/2`, then factored by Cholesky; if Cholesky
/// breaks down the solve falls back to LU with partial pivoting. Pivots below
/// `1e-12 · ‖a‖_F` yield [`Error::Singular`].
pub fn solve_symmetric(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::Shape(format!(
            "solve_symmetric needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if b.rows != n {
        return Err(Error::Shape(format!(
            "solve_symmetric: lhs is {n}x{n} but rhs has {} rows",
            b.rows
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Data("non-finite entries in linear system".into()));
    }
    let norm = frobenius_norm(a);
    let mut asym = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = a[(i, j)] - a[(j, i)];
            asym += 2.0 * d * d;
        }
    }
    if asym.sqrt() > SYMMETRY_TOLERANCE * norm {
        return Err(Error::Domain(format!(
            "matrix is not symmetric: ‖A−Aᵀ‖_F = {:.3e}, ‖A‖_F = {norm:.3e}",
            asym.sqrt()
        )));
    }
    let threshold = SINGULAR_PIVOT_RATIO * norm;
    if norm == 0.0 {
        return Err(Error::Singular {
            pivot: 0.0,
            threshold,
            site: None,
        });
    }
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));

    let x = match cholesky(&sym, threshold) {
        Some(l) => cholesky_solve(&l, b),
        None => {
            log::debug!("cholesky failed on {n}x{n} system, falling back to LU");
            lu_solve(&sym, b, threshold)?
        }
    };
    if !x.is_finite() {
        return Err(Error::Singular {
            pivot: f64::NAN,
            threshold,
            site: None,
        });
    }
    Ok(x)
}

/// Lower-triangular Cholesky factor, or `None` if a pivot falls below `threshold`.
fn cholesky(a: &Matrix, threshold: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= threshold || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    let k = b.cols;
    let mut y = b.clone();
    // forward: L y = b
    for i in 0..n {
        for j in 0..i {
            let lij = l[(i, j)];
            if lij != 0.0 {
                for c in 0..k {
                    y.data[i * k + c] -= lij * y.data[j * k + c];
                }
            }
        }
        let lii = l[(i, i)];
        for c in 0..k {
            y.data[i * k + c] /= lii;
        }
    }
    // backward: Lᵀ x = y
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let lji = l[(j, i)];
            if lji != 0.0 {
                for c in 0..k {
                    y.data[i * k + c] -= lji * y.data[j * k + c];
                }
            }
        }
        let lii = l[(i, i)];
        for c in 0..k {
            y.data[i * k + c] /= lii;
        }
    }
    y
}

fn lu_solve(a: &Matrix, b: &Matrix, threshold: f64) -> Result<Matrix> {
    let n = a.rows;
    let k = b.cols;
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let (pivot_row, pivot) = (col..n)
            .map(|r| (r, lu[(r, col)]))
            .max_by(|p, q| p.1.abs().total_cmp(&q.1.abs()))
            .expect("non-empty range");
        if pivot.abs() < threshold || !pivot.is_finite() {
            return Err(Error::Singular {
                pivot: pivot.abs(),
                threshold,
                site: None,
            });
        }
        if pivot_row != col {
            for c in 0..n {
                lu.data.swap(col * n + c, pivot_row * n + c);
            }
            for c in 0..k {
                x.data.swap(col * k + c, pivot_row * k + c);
            }
        }
        for r in (col + 1)..n {
            let factor = lu[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                lu.data[r * n + c] -= factor * lu.data[col * n + c];
            }
            for c in 0..k {
                x.data[r * k + c] -= factor * x.data[col * k + c];
            }
        }
    }
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let u = lu[(i, j)];
            if u != 0.0 {
                for c in 0..k {
                    x.data[i * k + c] -= u * x.data[j * k + c];
                }
            }
        }
        let uii = lu[(i, i)];
        for c in 0..k {
            x.data[i * k + c] /= uii;
        }
    }
    Ok(x)
}
