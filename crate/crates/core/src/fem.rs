//! Fine-grid reference solver with homogeneous Dirichlet data and the
//! relative error metric used to compare coarse solutions against it.

use std::path::Path;

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CsrMatrix;

use crate::field::{parse_grid_values, write_rows, PermeabilityField};
use crate::grid::{assemble_form, load_vector, CoarseGrid, FineGrid, FormKind};
use crate::linalg::{dot, principal_submatrix, spmv};
use crate::{Error, Result};

/// Nodal values on a fine grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl Solution {
    pub fn zeros(fine: &FineGrid) -> Self {
        Self {
            nx: fine.nx,
            ny: fine.ny,
            values: vec![0.0; fine.node_count()],
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("SOL {} {}\n", self.nx, self.ny);
        write_rows(&mut s, &self.values, self.nx + 1);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (nx, ny, values) = parse_grid_values(text, "SOL", |nx, ny| (nx + 1) * (ny + 1))?;
        Ok(Self { nx, ny, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Global stiffness matrix over all fine nodes.
pub fn stiffness(fine: &FineGrid, field: &PermeabilityField) -> Result<CsrMatrix<f64>> {
    if (field.nx, field.ny) != (fine.nx, fine.ny) {
        return Err(Error::DimensionMismatch(format!(
            "field is {}x{}, grid is {}x{}",
            field.nx, field.ny, fine.nx, fine.ny
        )));
    }
    assemble_form(&as_single_cell(fine), &fine.whole_domain(), &field.values, FormKind::Stiffness)
}

pub fn mass(fine: &FineGrid) -> CsrMatrix<f64> {
    let ones = vec![1.0; fine.cell_count()];
    assemble_form(&as_single_cell(fine), &fine.whole_domain(), &ones, FormKind::Mass)
        .expect("sizes agree by construction")
}

// Stiffness and mass assembly only need the fine grid; wrap it in a trivial
// coarse grid so the shared assembly routine can be used.
fn as_single_cell(fine: &FineGrid) -> CoarseGrid {
    CoarseGrid {
        nx: 1,
        ny: 1,
        factor: fine.nx,
        fine: *fine,
    }
}

/// Galerkin Q1 solution of `-∇·(κ∇u) = f` with `u = 0` on the boundary.
pub fn solve_fine(fine: &FineGrid, field: &PermeabilityField, source: &[f64]) -> Result<Solution> {
    field.check_positive()?;
    if source.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("source term".into()));
    }
    let a = stiffness(fine, field)?;
    let b = load_vector(fine, source)?;
    let interior = fine.interior_nodes();
    let a_ii = principal_submatrix(&a, &interior);
    let chol = CscCholesky::factor(&a_ii).map_err(|_| Error::SolverFailed { residual: f64::NAN })?;
    let rhs = DMatrix::from_iterator(interior.len(), 1, interior.iter().map(|&n| b[n]));
    let x = chol.solve(&rhs);

    let mut u = Solution::zeros(fine);
    for (k, &n) in interior.iter().enumerate() {
        u.values[n] = x[(k, 0)];
    }
    let r = spmv(&a, &u.values);
    let (mut res, mut norm) = (0.0, 0.0);
    for &n in &interior {
        res += (r[n] - b[n]).powi(2);
        norm += b[n] * b[n];
    }
    let rel = if norm > 0.0 { (res / norm).sqrt() } else { res.sqrt() };
    if !(rel <= 1e-10) {
        return Err(Error::SolverFailed { residual: rel });
    }
    Ok(u)
}

/// `∫(u − u_H)² / ∫u²`, both integrals taken with the consistent Q1 mass
/// matrix. This is a squared-norm ratio; no square root is applied.
pub fn error_ratio(u: &Solution, u_coarse: &Solution) -> Result<f64> {
    if (u.nx, u.ny) != (u_coarse.nx, u_coarse.ny) {
        return Err(Error::DimensionMismatch("solutions live on different grids".into()));
    }
    let fine = FineGrid::new(u.nx, u.ny)?;
    let m = mass(&fine);
    let diff: Vec<f64> = u.values.iter().zip(&u_coarse.values).map(|(a, b)| a - b).collect();
    let den = dot(&u.values, &spmv(&m, &u.values));
    if !(den > 0.0) {
        return Err(Error::InvalidArgument("reference solution is identically zero".into()));
    }
    Ok(dot(&diff, &spmv(&m, &diff)) / den)
}
