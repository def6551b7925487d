//! Dense helpers shared by the local spectral problems and the coarse solve.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// On failure the index of the first non-positive pivot is reported, which
/// callers use to point at the offending unknown.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            n,
            a.ncols()
        )));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 1e-13 * scale) {
            return Err(Error::NotPositiveDefinite { pivot: j, size: n });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has a nonzero diagonal");
    l.transpose()
        .solve_upper_triangular(&y)
        .expect("cholesky factor has a nonzero diagonal")
}

/// Eigenpairs of `A v = λ S v` with `A` symmetric and `S` symmetric positive
/// definite, sorted by ascending eigenvalue. Eigenvectors are `S`-orthonormal.
pub fn generalized_symmetric_eigen(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.shape() != (n, n) || s.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "generalized eigenproblem with shapes {:?} and {:?}",
            a.shape(),
            s.shape()
        )));
    }
    let l = cholesky(s).map_err(|e| Error::Eigen(format!("mass matrix factorization: {e}")))?;
    // C = L⁻¹ A L⁻ᵀ
    let x = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Eigen("singular factor".into()))?;
    let c = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Eigen("singular factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(c, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut y = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        y.set_column(dst, &eig.eigenvectors.column(src));
    }
    let vectors = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Eigen("singular factor".into()))?;
    Ok((values, vectors))
}

/// Dense copy of a sparse matrix.
pub fn to_dense(m: &CsrMatrix<f64>) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, j, v) in m.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

/// `y = M x` for a CSR matrix.
pub fn spmv(m: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.nrows()];
    for (i, row) in m.row_iter().enumerate() {
        y[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &v)| v * x[j])
            .sum();
    }
    y
}

/// Symmetric submatrix selecting `rows` for both dimensions.
pub fn principal_submatrix(m: &CsrMatrix<f64>, keep: &[usize]) -> CscMatrix<f64> {
    let mut map = vec![usize::MAX; m.nrows()];
    for (k, &i) in keep.iter().enumerate() {
        map[i] = k;
    }
    let mut coo = CooMatrix::new(keep.len(), keep.len());
    for (i, j, v) in m.triplet_iter() {
        let (a, b) = (map[i], map[j]);
        if a != usize::MAX && b != usize::MAX {
            coo.push(a, b, *v);
        }
    }
    CscMatrix::from(&coo)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn column_vec(m: &DMatrix<f64>, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
