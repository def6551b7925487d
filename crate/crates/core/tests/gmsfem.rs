mod common;
use common::*;

use mscluster::fem::{error_ratio, solve_fine};
use mscluster::field::{restrict, sample_field, FieldConfig, PermeabilityField};
use mscluster::gmsfem::{local_basis, offline_basis, snapshot_space, solve_coarse};
use mscluster::grid::{
    all_neighborhoods, assemble_form, build_grids, partition_of_unity, CoarseGrid, FormKind, Neighborhood,
};
use mscluster::linalg::to_dense;
use nalgebra::DMatrix;

fn local(grid: &CoarseGrid, nb: &Neighborhood, kappa: &[f64], kind: FormKind) -> DMatrix<f64> {
    to_dense(&assemble_form(grid, &nb.block, kappa, kind).unwrap())
}

#[test]
fn snapshots_partition_one_and_are_harmonic() {
    let grid = build_grids(20, 5).unwrap();
    let field = random_field(20, 1);
    for nb in all_neighborhoods(&grid) {
        let kappa = restrict(&field, &nb).unwrap().values;
        let snap = snapshot_space(&grid, &nb, &kappa).unwrap();
        let a = local(&grid, &nb, &kappa, FormKind::Stiffness);
        for r in 0..snap.columns.nrows() {
            let s: f64 = snap.columns.row(r).sum();
            assert!((s - 1.0).abs() < 1e-10, "node {} row sum {s}", nb.coarse_node);
        }
        let res = &a * &snap.columns;
        let scale = a.abs().max();
        for &i in &nb.interior_nodes {
            for c in 0..res.ncols() {
                assert!(res[(i, c)].abs() <= 1e-10 * scale);
            }
        }
        // dense LU oracle for the harmonic extension
        let ii = &nb.interior_nodes;
        let a_ii = a.select_rows(ii.iter()).select_columns(ii.iter());
        let a_ib = a.select_rows(ii.iter()).select_columns(nb.boundary_nodes.iter());
        let oracle = a_ii.lu().solve(&(-a_ib)).unwrap();
        for (r, &i) in ii.iter().enumerate() {
            for c in 0..oracle.ncols() {
                assert!((snap.columns[(i, c)] - oracle[(r, c)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn offline_eigenpairs_match_dense_oracle() {
    let grid = build_grids(20, 5).unwrap();
    let pou = partition_of_unity(&grid);
    let field = random_field(20, 2);
    for nb in all_neighborhoods(&grid) {
        let kappa = restrict(&field, &nb).unwrap().values;
        let snap = snapshot_space(&grid, &nb, &kappa).unwrap();
        let l = 6;
        let basis = offline_basis(&grid, &nb, &snap, &kappa, &pou, l).unwrap();
        let a = local(&grid, &nb, &kappa, FormKind::Stiffness);
        let s = local(&grid, &nb, &kappa, FormKind::Spectral);
        let psi = &snap.columns;
        let oracle = eigen_oracle(&(psi.transpose() * &a * psi), &(psi.transpose() * &s * psi));
        for k in 0..l {
            let tol = 1e-8 * oracle[k].abs().max(1.0);
            assert!((basis.eigenvalues[k] - oracle[k]).abs() <= tol, "{} vs {}", basis.eigenvalues[k], oracle[k]);
        }
        assert!(basis.eigenvalues[0].abs() <= 1e-8);
        let first = basis.raw.column(0);
        let (lo, hi) = (first.min(), first.max());
        assert!((hi - lo).abs() <= 1e-8 * hi.abs());
        let gram = basis.raw.transpose() * &s * &basis.raw;
        for i in 0..l {
            for j in 0..l {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - e).abs() <= 1e-8, "gram {i},{j} = {}", gram[(i, j)]);
            }
        }
        // residual of the generalized problem in the snapshot space
        let ar = &a * &basis.raw;
        let sr = &s * &basis.raw;
        for k in 0..l {
            let r = psi.transpose() * (ar.column(k) - sr.column(k) * basis.eigenvalues[k]);
            assert!(r.amax() <= 1e-7 * ar.column(k).amax().max(1.0));
        }
    }
}

#[test]
fn nested_bases_agree_exactly() {
    let grid = build_grids(20, 5).unwrap();
    let pou = partition_of_unity(&grid);
    let field = sample_field(&FieldConfig::channelized(20, 20), 5).unwrap();
    for nb in all_neighborhoods(&grid) {
        for l in 1..5 {
            let small = local_basis(&grid, &nb, &pou, &field, l).unwrap();
            let big = local_basis(&grid, &nb, &pou, &field, l + 1).unwrap();
            assert_eq!(small.vectors, big.vectors.columns(0, l).into_owned());
            assert_eq!(small.eigenvalues[..], big.eigenvalues[..l]);
        }
    }
}

#[test]
fn coefficient_scaling_keeps_eigenvalues() {
    let grid = build_grids(20, 5).unwrap();
    let pou = partition_of_unity(&grid);
    let field = random_field(20, 4);
    let mut scaled = field.clone();
    scaled.values.iter_mut().for_each(|v| *v *= 9.0);
    for nb in all_neighborhoods(&grid).iter().step_by(4) {
        let b = local_basis(&grid, nb, &pou, &field, 4).unwrap();
        let c = local_basis(&grid, nb, &pou, &scaled, 4).unwrap();
        for k in 0..4 {
            assert!((b.eigenvalues[k] - c.eigenvalues[k]).abs() <= 1e-8 * b.eigenvalues[k].abs().max(1.0));
        }
        // s-normalized vectors scale by c^(-1/2)
        for (x, y) in b.vectors.iter().zip(c.vectors.iter()) {
            assert!((x / 3.0 - y).abs() <= 1e-8 * x.abs().max(1e-3));
        }
    }
}

fn per_realization_error(grid: &CoarseGrid, field: &PermeabilityField, l: usize) -> f64 {
    let nbhds = all_neighborhoods(grid);
    let pou = partition_of_unity(grid);
    let source = vec![1.0; grid.fine.cell_count()];
    let bases: Vec<DMatrix<f64>> = nbhds.iter().map(|nb| local_basis(grid, nb, &pou, field, l).unwrap().vectors).collect();
    let refs: Vec<&DMatrix<f64>> = bases.iter().collect();
    let uh = solve_coarse(grid, &nbhds, &refs, field, &source).unwrap();
    let u = solve_fine(&grid.fine, field, &source).unwrap();
    error_ratio(&u, &uh).unwrap()
}

#[test]
fn homogeneous_problem_is_accurate() {
    let grid = build_grids(40, 5).unwrap();
    let e = per_realization_error(&grid, &PermeabilityField::uniform(40, 40, 1.0), 4);
    assert!(e <= 0.05, "error ratio {e}");
}

#[test]
fn error_decreases_with_basis_count() {
    let grid = build_grids(40, 5).unwrap();
    let cfg = FieldConfig::channelized(40, 40);
    for seed in 0..5 {
        let field = sample_field(&cfg, seed).unwrap();
        let errs: Vec<f64> = [2, 3, 4].iter().map(|&l| per_realization_error(&grid, &field, l)).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "seed {seed}: {errs:?}");
    }
}
