//! Generalized multiscale finite elements: harmonic-extension snapshot spaces,
//! spectral offline bases and the coarse Galerkin solve.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::fem::{stiffness, Solution};
use crate::field::{restrict, PermeabilityField};
use crate::grid::{assemble_form, load_vector, CoarseGrid, FormKind, Neighborhood, PartitionOfUnity};
use crate::linalg::{cholesky, cholesky_solve, generalized_symmetric_eigen, to_dense};
use crate::{Error, Result};

static OFFLINE_BASIS_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of local spectral problems solved by this process so far.
pub fn offline_basis_calls() -> u64 {
    OFFLINE_BASIS_CALLS.load(Ordering::Relaxed)
}

/// Columns are the `κ`-harmonic extensions of the boundary delta functions,
/// in the neighborhood's boundary order.
#[derive(Clone, Debug)]
pub struct SnapshotSpace {
    pub coarse_node: usize,
    pub columns: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineBasis {
    pub coarse_node: usize,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Eigen-combinations of snapshots before localization, `s`-orthonormal.
    pub raw: DMatrix<f64>,
    /// Conforming basis functions over the patch nodes.
    pub vectors: DMatrix<f64>,
    pub pou_applied: bool,
}

impl OfflineBasis {
    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }

    /// The first `l` basis functions (the offline spaces are nested).
    pub fn truncated(&self, l: usize) -> Result<OfflineBasis> {
        if l == 0 || l > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {l} of {} basis functions",
                self.len()
            )));
        }
        Ok(OfflineBasis {
            coarse_node: self.coarse_node,
            eigenvalues: self.eigenvalues[..l].to_vec(),
            raw: self.raw.columns(0, l).into_owned(),
            vectors: self.vectors.columns(0, l).into_owned(),
            pou_applied: self.pou_applied,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("BASIS {} {} {}\n", self.coarse_node, self.len(), self.vectors.nrows());
        for k in 0..self.len() {
            let row: Vec<String> = self.vectors.column(k).iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Parses a `BASIS` file into `(coarse_node, vectors)`.
pub fn parse_basis(text: &str) -> Result<(usize, DMatrix<f64>)> {
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("BASIS") {
        return Err(Error::Parse("expected `BASIS` header".into()));
    }
    let mut next_usize = || -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse("truncated header".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("{e}")))
    };
    let (node, l, n) = (next_usize()?, next_usize()?, next_usize()?);
    let values = tokens
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != l * n {
        return Err(Error::Parse(format!("expected {} values, found {}", l * n, values.len())));
    }
    Ok((node, DMatrix::from_column_slice(n, l, &values)))
}

fn local_matrix(grid: &CoarseGrid, nbhd: &Neighborhood, kappa: &[f64], kind: FormKind) -> Result<DMatrix<f64>> {
    Ok(to_dense(&assemble_form(grid, &nbhd.block, kappa, kind)?))
}

/// Snapshot space of a neighborhood for local coefficient values `kappa`
/// (local cell order).
pub fn snapshot_space(grid: &CoarseGrid, nbhd: &Neighborhood, kappa: &[f64]) -> Result<SnapshotSpace> {
    let a = local_matrix(grid, nbhd, kappa, FormKind::Stiffness)?;
    let interior = &nbhd.interior_nodes;
    let boundary = &nbhd.boundary_nodes;
    let a_ii = a.select_rows(interior.iter()).select_columns(interior.iter());
    let a_ib = a.select_rows(interior.iter()).select_columns(boundary.iter());
    let l = cholesky(&a_ii)?;
    let x = cholesky_solve(&l, &(-a_ib));

    let mut columns = DMatrix::zeros(nbhd.node_count(), boundary.len());
    for (c, &b) in boundary.iter().enumerate() {
        columns[(b, c)] = 1.0;
        for (r, &i) in interior.iter().enumerate() {
            columns[(i, c)] = x[(r, c)];
        }
    }
    Ok(SnapshotSpace {
        coarse_node: nbhd.coarse_node,
        columns,
    })
}

/// Spectral offline basis: the `l` eigenfunctions of `a(v,w) = λ s(v,w)` in
/// the snapshot space with smallest eigenvalues, multiplied by the partition
/// of unity and set to zero on the domain boundary.
pub fn offline_basis(
    grid: &CoarseGrid,
    nbhd: &Neighborhood,
    snap: &SnapshotSpace,
    kappa: &[f64],
    pou: &PartitionOfUnity,
    l: usize,
) -> Result<OfflineBasis> {
    let n_snap = snap.columns.ncols();
    if l == 0 || l > n_snap {
        return Err(Error::InvalidArgument(format!(
            "basis count {l} outside 1..={n_snap}"
        )));
    }
    OFFLINE_BASIS_CALLS.fetch_add(1, Ordering::Relaxed);
    let a = local_matrix(grid, nbhd, kappa, FormKind::Stiffness)?;
    let s = local_matrix(grid, nbhd, kappa, FormKind::Spectral)?;
    let psi = &snap.columns;
    let a_snap = psi.transpose() * &a * psi;
    let s_snap = psi.transpose() * &s * psi;
    let a_snap = (&a_snap + a_snap.transpose()) * 0.5;
    let s_snap = (&s_snap + s_snap.transpose()) * 0.5;
    let (values, vectors) = generalized_symmetric_eigen(&a_snap, &s_snap)?;

    let mut raw = psi * vectors.columns(0, l);
    for k in 0..l {
        let mut col = raw.column_mut(k);
        let (mut best, mut arg) = (0.0, 0);
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        if col[arg] < 0.0 {
            col.neg_mut();
        }
    }

    let chi = &pou.chi[nbhd.coarse_node];
    let fine = &grid.fine;
    let mut localized = raw.clone();
    for (i, &g) in nbhd.fine_nodes.iter().enumerate() {
        let w = if fine.is_boundary_node(g) { 0.0 } else { chi[i] };
        for k in 0..l {
            localized[(i, k)] *= w;
        }
    }
    Ok(OfflineBasis {
        coarse_node: nbhd.coarse_node,
        eigenvalues: values[..l].to_vec(),
        raw,
        vectors: localized,
        pou_applied: true,
    })
}

/// Snapshot space and offline basis for the neighborhood restriction of a
/// global field.
pub fn local_basis(
    grid: &CoarseGrid,
    nbhd: &Neighborhood,
    pou: &PartitionOfUnity,
    field: &PermeabilityField,
    l: usize,
) -> Result<OfflineBasis> {
    let patch = restrict(field, nbhd)?;
    let snap = snapshot_space(grid, nbhd, &patch.values)?;
    offline_basis(grid, nbhd, &snap, &patch.values, pou, l)
}

/// Global prolongation matrix whose columns are all basis functions, in
/// neighborhood order.
pub fn prolongation(grid: &CoarseGrid, nbhds: &[Neighborhood], bases: &[&DMatrix<f64>]) -> Result<CsrMatrix<f64>> {
    if nbhds.len() != bases.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} neighborhoods but {} bases",
            nbhds.len(),
            bases.len()
        )));
    }
    let total: usize = bases.iter().map(|b| b.ncols()).sum();
    let mut coo = CooMatrix::new(grid.fine.node_count(), total);
    let mut col = 0;
    for (nb, basis) in nbhds.iter().zip(bases) {
        if basis.nrows() != nb.node_count() {
            return Err(Error::DimensionMismatch(format!(
                "basis for coarse node {} has {} rows, patch has {} nodes",
                nb.coarse_node,
                basis.nrows(),
                nb.node_count()
            )));
        }
        for k in 0..basis.ncols() {
            for (i, &g) in nb.fine_nodes.iter().enumerate() {
                let v = basis[(i, k)];
                if v != 0.0 {
                    coo.push(g, col, v);
                }
            }
            col += 1;
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Coarse Galerkin solve in the span of the given per-neighborhood bases
/// (patch nodes × basis count). Each basis must vanish on `∂ω_i` and `∂D`.
pub fn solve_coarse(
    grid: &CoarseGrid,
    nbhds: &[Neighborhood],
    bases: &[&DMatrix<f64>],
    field: &PermeabilityField,
    source: &[f64],
) -> Result<Solution> {
    field.check_positive()?;
    let b_mat = prolongation(grid, nbhds, bases)?;
    let a = stiffness(&grid.fine, field)?;
    let load = load_vector(&grid.fine, source)?;
    let bt = b_mat.transpose();
    let reduced = to_dense(&(&bt * &(&a * &b_mat)));
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let rhs = crate::linalg::spmv(&bt, &load);
    let rhs = DMatrix::from_column_slice(rhs.len(), 1, &rhs);
    let l = cholesky(&reduced).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, .. } => {
            let mut offset = 0;
            for (nb, basis) in nbhds.iter().zip(bases) {
                if pivot < offset + basis.ncols() {
                    return Error::RankDeficient {
                        coarse_node: nb.coarse_node,
                        basis: pivot - offset,
                    };
                }
                offset += basis.ncols();
            }
            e
        }
        other => other,
    })?;
    let coef = cholesky_solve(&l, &rhs);
    let coef: Vec<f64> = coef.iter().copied().collect();
    let mut u = Solution::zeros(&grid.fine);
    u.values = crate::linalg::spmv(&b_mat, &coef);
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{error_ratio, solve_fine};
    use crate::field::{sample_field, FieldConfig};
    use crate::grid::{all_neighborhoods, build_grids, neighborhood, partition_of_unity};
    use crate::linalg::spmv;

    fn kappa_for(nb: &Neighborhood, field: &PermeabilityField) -> Vec<f64> {
        restrict(field, nb).unwrap().values
    }

    #[test]
    fn snapshot_count_and_partition_of_one() {
        let g = build_grids(20, 5).unwrap();
        let field = sample_field(&FieldConfig::channelized(20, 20), 1).unwrap();
        let nb = neighborhood(&g, g.node(2, 2)).unwrap();
        let snap = snapshot_space(&g, &nb, &kappa_for(&nb, &field)).unwrap();
        assert_eq!(snap.columns.ncols(), 40);
        let sums = snap.columns.column_sum();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-10));
    }

    #[test]
    fn basis_count_validated() {
        let g = build_grids(10, 5).unwrap();
        let pou = partition_of_unity(&g);
        let nb = neighborhood(&g, 4).unwrap();
        let kappa = vec![1.0; nb.cell_count()];
        let snap = snapshot_space(&g, &nb, &kappa).unwrap();
        assert!(offline_basis(&g, &nb, &snap, &kappa, &pou, 0).is_err());
        assert!(offline_basis(&g, &nb, &snap, &kappa, &pou, 41).is_err());
        assert!(offline_basis(&g, &nb, &snap, &kappa, &pou, 40).is_ok());
    }

    #[test]
    fn first_eigenpair_is_the_constant() {
        let g = build_grids(20, 5).unwrap();
        let pou = partition_of_unity(&g);
        let field = sample_field(&FieldConfig::channelized(20, 20), 4).unwrap();
        for nb in all_neighborhoods(&g) {
            let basis = local_basis(&g, &nb, &pou, &field, 3).unwrap();
            assert!(basis.eigenvalues[0].abs() < 1e-8, "{:?}", basis.eigenvalues);
            assert!(basis.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
            assert!(basis.eigenvalues.iter().all(|&l| l >= -1e-10));
            let first = basis.raw.column(0);
            let c = first[0];
            assert!(c > 0.0);
            assert!(first.iter().all(|v| (v - c).abs() < 1e-8 * c));
        }
    }

    #[test]
    fn conformity_on_patch_and_domain_boundary() {
        let g = build_grids(20, 5).unwrap();
        let pou = partition_of_unity(&g);
        let field = sample_field(&FieldConfig::channelized(20, 20), 2).unwrap();
        for nb in all_neighborhoods(&g) {
            let basis = local_basis(&g, &nb, &pou, &field, 3).unwrap();
            for (i, &gn) in nb.fine_nodes.iter().enumerate() {
                if nb.boundary_nodes.contains(&i) && !g.fine.is_boundary_node(gn) || g.fine.is_boundary_node(gn) {
                    for k in 0..3 {
                        assert_eq!(basis.vectors[(i, k)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn reduced_dimension_counts_all_bases() {
        let g = build_grids(20, 5).unwrap();
        let pou = partition_of_unity(&g);
        let field = PermeabilityField::uniform(20, 20, 1.0);
        let nbs: Vec<_> = all_neighborhoods(&g)
            .into_iter()
            .filter(|nb| {
                let (i, j) = g.node_ij(nb.coarse_node);
                i > 0 && j > 0 && i < g.nx && j < g.ny
            })
            .collect();
        assert_eq!(nbs.len(), 9);
        let bases: Vec<_> = nbs.iter().map(|nb| local_basis(&g, nb, &pou, &field, 3).unwrap()).collect();
        let refs: Vec<_> = bases.iter().map(|b| &b.vectors).collect();
        let p = prolongation(&g, &nbs, &refs).unwrap();
        assert_eq!(p.ncols(), 27);
    }

    #[test]
    fn nested_bases_improve_energy_error() {
        let g = build_grids(20, 5).unwrap();
        let pou = partition_of_unity(&g);
        let field = sample_field(&FieldConfig::channelized(20, 20), 6).unwrap();
        let nbs = all_neighborhoods(&g);
        let source = vec![1.0; 400];
        let u = solve_fine(&g.fine, &field, &source).unwrap();
        let a = stiffness(&g.fine, &field).unwrap();
        let full: Vec<_> = nbs.iter().map(|nb| local_basis(&g, nb, &pou, &field, 4).unwrap()).collect();
        let mut last = f64::INFINITY;
        for l in 2..=4 {
            let cut: Vec<_> = full.iter().map(|b| b.truncated(l).unwrap().vectors).collect();
            let refs: Vec<_> = cut.iter().collect();
            let uh = solve_coarse(&g, &nbs, &refs, &field, &source).unwrap();
            let e: Vec<f64> = u.values.iter().zip(&uh.values).map(|(a, b)| a - b).collect();
            let energy = crate::linalg::dot(&e, &spmv(&a, &e));
            assert!(energy <= last * (1.0 + 1e-12));
            last = energy;
            assert!(error_ratio(&u, &uh).unwrap() < 1.0);
        }
    }

    #[test]
    fn basis_file_round_trip() {
        let g = build_grids(10, 5).unwrap();
        let pou = partition_of_unity(&g);
        let nb = neighborhood(&g, 4).unwrap();
        let basis = local_basis(&g, &nb, &pou, &PermeabilityField::uniform(10, 10, 3.0), 2).unwrap();
        let text = basis.to_text();
        assert!(text.starts_with("BASIS 4 2 121\n"));
        let (node, vectors) = parse_basis(&text).unwrap();
        assert_eq!(node, 4);
        assert_eq!(vectors, basis.vectors);
    }
}
