//! Structured fine/coarse grids on the unit square, coarse neighborhoods,
//! the bilinear partition of unity and Q1 finite element assembly.
//!
//! Nodes and cells are numbered row-major with `x` varying fastest.

use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineGrid {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

impl FineGrid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument(format!("empty fine grid {nx}x{ny}")));
        }
        Ok(Self {
            nx,
            ny,
            hx: 1.0 / nx as f64,
            hy: 1.0 / ny as f64,
        })
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let i = node % (self.nx + 1);
        let j = node / (self.nx + 1);
        (i as f64 * self.hx, j as f64 * self.hy)
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy)
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let i = node % (self.nx + 1);
        let j = node / (self.nx + 1);
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    /// Nodes not on the domain boundary, ascending.
    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&n| !self.is_boundary_node(n))
            .collect()
    }

    pub fn whole_domain(&self) -> CellBlock {
        CellBlock {
            x0: 0,
            y0: 0,
            ncx: self.nx,
            ncy: self.ny,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseGrid {
    pub nx: usize,
    pub ny: usize,
    pub factor: usize,
    pub fine: FineGrid,
}

impl CoarseGrid {
    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn hx(&self) -> f64 {
        1.0 / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        1.0 / self.ny as f64
    }

    /// Value of the bilinear hat function of coarse node `node` at `(x, y)`.
    pub fn hat(&self, node: usize, x: f64, y: f64) -> f64 {
        let (i, j) = self.node_ij(node);
        let tx = (x / self.hx() - i as f64).abs();
        let ty = (y / self.hy() - j as f64).abs();
        (1.0 - tx).max(0.0) * (1.0 - ty).max(0.0)
    }

    /// Sum over all coarse hat functions of `|∇χ|²` at a point strictly inside
    /// a coarse cell.
    pub fn hat_gradient_energy(&self, x: f64, y: f64) -> f64 {
        let (hx, hy) = (self.hx(), self.hy());
        let ci = ((x / hx).floor() as usize).min(self.nx - 1);
        let cj = ((y / hy).floor() as usize).min(self.ny - 1);
        let xi = x / hx - ci as f64;
        let eta = y / hy - cj as f64;
        let mut total = 0.0;
        for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (fx, dfx) = if a == 0 { (1.0 - xi, -1.0 / hx) } else { (xi, 1.0 / hx) };
            let (fy, dfy) = if b == 0 { (1.0 - eta, -1.0 / hy) } else { (eta, 1.0 / hy) };
            let gx = dfx * fy;
            let gy = fx * dfy;
            total += gx * gx + gy * gy;
        }
        total
    }
}

/// Builds a square fine grid of `nx × nx` cells and the coarse grid obtained
/// by merging `factor × factor` fine cells.
pub fn build_grids(nx: usize, factor: usize) -> Result<CoarseGrid> {
    if factor == 0 || nx == 0 || nx % factor != 0 {
        return Err(Error::DimensionMismatch(format!(
            "coarsening factor {factor} does not divide {nx} fine cells"
        )));
    }
    let fine = FineGrid::new(nx, nx)?;
    Ok(CoarseGrid {
        nx: nx / factor,
        ny: nx / factor,
        factor,
        fine,
    })
}

/// Axis-aligned rectangle of fine cells with a local row-major numbering of
/// its cells and nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellBlock {
    pub x0: usize,
    pub y0: usize,
    pub ncx: usize,
    pub ncy: usize,
}

impl CellBlock {
    pub fn cell_count(&self) -> usize {
        self.ncx * self.ncy
    }

    pub fn node_count(&self) -> usize {
        (self.ncx + 1) * (self.ncy + 1)
    }

    pub fn nodes_x(&self) -> usize {
        self.ncx + 1
    }

    pub fn nodes_y(&self) -> usize {
        self.ncy + 1
    }

    pub fn local_node(&self, i: usize, j: usize) -> usize {
        j * (self.ncx + 1) + i
    }

    pub fn global_node(&self, fine: &FineGrid, local: usize) -> usize {
        let i = local % (self.ncx + 1);
        let j = local / (self.ncx + 1);
        fine.node(self.x0 + i, self.y0 + j)
    }

    pub fn global_cell(&self, fine: &FineGrid, local: usize) -> usize {
        let i = local % self.ncx;
        let j = local / self.ncx;
        fine.cell(self.x0 + i, self.y0 + j)
    }

    /// Local indices of the nodes on the rectangle's perimeter, counterclockwise
    /// from the lower-left corner.
    pub fn perimeter(&self) -> Vec<usize> {
        let (mx, my) = (self.ncx, self.ncy);
        let mut out = Vec::with_capacity(2 * (mx + my));
        for i in 0..mx {
            out.push(self.local_node(i, 0));
        }
        for j in 0..my {
            out.push(self.local_node(mx, j));
        }
        for i in (1..=mx).rev() {
            out.push(self.local_node(i, my));
        }
        for j in (1..=my).rev() {
            out.push(self.local_node(0, j));
        }
        out
    }
}

/// The patch `ω_i` of a coarse node: the union of the coarse cells sharing it.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub coarse_node: usize,
    pub block: CellBlock,
    /// Global fine cell ids in local order.
    pub fine_cells: Vec<usize>,
    /// Local-to-global node map.
    pub fine_nodes: Vec<usize>,
    /// Local ids of `J_h(ω_i)`, counterclockwise from the lower-left corner.
    pub boundary_nodes: Vec<usize>,
    /// Local ids of the remaining nodes, ascending.
    pub interior_nodes: Vec<usize>,
}

impl Neighborhood {
    pub fn node_count(&self) -> usize {
        self.fine_nodes.len()
    }

    pub fn cell_count(&self) -> usize {
        self.fine_cells.len()
    }
}

pub fn neighborhood(grid: &CoarseGrid, i: usize) -> Result<Neighborhood> {
    if i >= grid.node_count() {
        return Err(Error::InvalidArgument(format!(
            "coarse node {i} out of range (grid has {})",
            grid.node_count()
        )));
    }
    let (ci, cj) = grid.node_ij(i);
    let f = grid.factor;
    let cx_lo = ci.saturating_sub(1);
    let cx_hi = ci.min(grid.nx - 1);
    let cy_lo = cj.saturating_sub(1);
    let cy_hi = cj.min(grid.ny - 1);
    let block = CellBlock {
        x0: cx_lo * f,
        y0: cy_lo * f,
        ncx: (cx_hi - cx_lo + 1) * f,
        ncy: (cy_hi - cy_lo + 1) * f,
    };
    let fine = &grid.fine;
    let fine_cells = (0..block.cell_count())
        .map(|c| block.global_cell(fine, c))
        .collect();
    let fine_nodes = (0..block.node_count())
        .map(|n| block.global_node(fine, n))
        .collect();
    let boundary_nodes = block.perimeter();
    let mut on_boundary = vec![false; block.node_count()];
    for &b in &boundary_nodes {
        on_boundary[b] = true;
    }
    let interior_nodes = (0..block.node_count()).filter(|&n| !on_boundary[n]).collect();
    Ok(Neighborhood {
        coarse_node: i,
        block,
        fine_cells,
        fine_nodes,
        boundary_nodes,
        interior_nodes,
    })
}

pub fn all_neighborhoods(grid: &CoarseGrid) -> Vec<Neighborhood> {
    (0..grid.node_count())
        .map(|i| neighborhood(grid, i).expect("index in range"))
        .collect()
}

/// Coarse hat functions sampled at the fine nodes of each neighborhood.
#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    /// `chi[i][k]` is `χ_i` at local node `k` of neighborhood `i`.
    pub chi: Vec<Vec<f64>>,
}

impl PartitionOfUnity {
    /// `χ_i` as a vector over all fine nodes.
    pub fn global(&self, grid: &CoarseGrid, nbhd: &Neighborhood) -> Vec<f64> {
        let mut out = vec![0.0; grid.fine.node_count()];
        for (k, &g) in nbhd.fine_nodes.iter().enumerate() {
            out[g] = self.chi[nbhd.coarse_node][k];
        }
        out
    }
}

pub fn partition_of_unity(grid: &CoarseGrid) -> PartitionOfUnity {
    let chi = (0..grid.node_count())
        .map(|i| {
            let nb = neighborhood(grid, i).expect("index in range");
            nb.fine_nodes
                .iter()
                .map(|&g| {
                    let (x, y) = grid.fine.node_coords(g);
                    grid.hat(i, x, y)
                })
                .collect()
        })
        .collect();
    PartitionOfUnity { chi }
}

/// Which bilinear form to assemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormKind {
    /// `∫ κ ∇v·∇w`
    Stiffness,
    /// `∫ κ̃ v w` with `κ̃ = κ Σ_j |∇χ_j|²`
    Spectral,
    /// `∫ v w` (the coefficient is ignored)
    Mass,
}

/// Q1 element matrices on an `hx × hy` cell with local nodes ordered
/// `(0,0), (1,0), (0,1), (1,1)`.
pub fn element_stiffness(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let s = |h: f64| [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];
    let m = |h: f64| [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]];
    let (sx, sy, mx, my) = (s(hx), s(hy), m(hx), m(hy));
    let mut k = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            let (a, b, c, d) = (p % 2, p / 2, q % 2, q / 2);
            k[p][q] = sx[a][c] * my[b][d] + mx[a][c] * sy[b][d];
        }
    }
    k
}

pub fn element_mass(hx: f64, hy: f64) -> [[f64; 4]; 4] {
    let m = |h: f64| [[h / 3.0, h / 6.0], [h / 6.0, h / 3.0]];
    let (mx, my) = (m(hx), m(hy));
    let mut k = [[0.0; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            k[p][q] = mx[p % 2][q % 2] * my[p / 2][q / 2];
        }
    }
    k
}

/// Assembles a form over the nodes of `block` (local numbering) with a
/// per-cell coefficient given in the block's local cell order.
pub fn assemble_form(
    grid: &CoarseGrid,
    block: &CellBlock,
    kappa: &[f64],
    kind: FormKind,
) -> Result<CsrMatrix<f64>> {
    if kappa.len() != block.cell_count() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient has {} values, region has {} cells",
            kappa.len(),
            block.cell_count()
        )));
    }
    if block.x0 + block.ncx > grid.fine.nx || block.y0 + block.ncy > grid.fine.ny {
        return Err(Error::DimensionMismatch("region exceeds the fine grid".into()));
    }
    let fine = &grid.fine;
    let (hx, hy) = (fine.hx, fine.hy);
    let reference = match kind {
        FormKind::Stiffness => element_stiffness(hx, hy),
        FormKind::Spectral | FormKind::Mass => element_mass(hx, hy),
    };
    let mut coo = CooMatrix::new(block.node_count(), block.node_count());
    for cj in 0..block.ncy {
        for ci in 0..block.ncx {
            let weight = match kind {
                FormKind::Stiffness => kappa[cj * block.ncx + ci],
                FormKind::Mass => 1.0,
                FormKind::Spectral => {
                    let (x, y) = fine.cell_center(block.x0 + ci, block.y0 + cj);
                    kappa[cj * block.ncx + ci] * grid.hat_gradient_energy(x, y)
                }
            };
            let dofs = [
                block.local_node(ci, cj),
                block.local_node(ci + 1, cj),
                block.local_node(ci, cj + 1),
                block.local_node(ci + 1, cj + 1),
            ];
            for p in 0..4 {
                for q in 0..4 {
                    coo.push(dofs[p], dofs[q], weight * reference[p][q]);
                }
            }
        }
    }
    Ok(CsrMatrix::from(&coo))
}

/// Load vector `∫ f φ_k` for a per-cell constant source over the whole grid.
pub fn load_vector(fine: &FineGrid, source: &[f64]) -> Result<Vec<f64>> {
    if source.len() != fine.cell_count() {
        return Err(Error::DimensionMismatch(format!(
            "source has {} values, grid has {} cells",
            source.len(),
            fine.cell_count()
        )));
    }
    let quarter = fine.hx * fine.hy / 4.0;
    let mut b = vec![0.0; fine.node_count()];
    for j in 0..fine.ny {
        for i in 0..fine.nx {
            let f = source[fine.cell(i, j)] * quarter;
            for (a, c) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                b[fine.node(i + a, j + c)] += f;
            }
        }
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{spmv, to_dense};

    #[test]
    fn grid_sizes() {
        let g = build_grids(100, 5).unwrap();
        assert_eq!((g.nx, g.ny, g.node_count()), (20, 20, 441));
        let g = build_grids(10, 10).unwrap();
        assert_eq!((g.nx, g.node_count()), (1, 4));
        let g = build_grids(40, 5).unwrap();
        assert_eq!((g.cell_count(), g.node_count()), (64, 81));
        assert!(matches!(build_grids(42, 5), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn neighborhood_shapes() {
        let g = build_grids(40, 5).unwrap();
        let interior = neighborhood(&g, g.node(3, 4)).unwrap();
        assert_eq!(interior.cell_count(), 100);
        assert_eq!(interior.node_count(), 121);
        assert_eq!(interior.boundary_nodes.len(), 40);
        assert_eq!(interior.interior_nodes.len(), 81);
        let corner = neighborhood(&g, 0).unwrap();
        assert_eq!((corner.cell_count(), corner.node_count()), (25, 36));
        let edge = neighborhood(&g, g.node(3, 0)).unwrap();
        assert_eq!(edge.cell_count(), 50);
        assert!(neighborhood(&g, 81).is_err());
    }

    #[test]
    fn boundary_ordering_is_counterclockwise() {
        let g = build_grids(10, 5).unwrap();
        let nb = neighborhood(&g, g.node(1, 1)).unwrap();
        let b = &nb.boundary_nodes;
        assert_eq!(b[0], 0);
        assert_eq!(b[1], 1);
        // first corner turned is the lower-right one
        assert_eq!(b[10], nb.block.local_node(10, 0));
        assert_eq!(b[20], nb.block.local_node(10, 10));
        assert_eq!(b[30], nb.block.local_node(0, 10));
        assert_eq!(*b.last().unwrap(), nb.block.local_node(0, 1));
        let mut sorted = b.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), b.len());
    }

    #[test]
    fn node_membership_matches_hat_support() {
        let g = build_grids(20, 5).unwrap();
        for nb in all_neighborhoods(&g) {
            let i = nb.coarse_node;
            for n in 0..g.fine.node_count() {
                let (x, y) = g.fine.node_coords(n);
                let local = nb.fine_nodes.iter().position(|&m| m == n);
                if g.hat(i, x, y) > 0.0 {
                    assert!(local.is_some(), "node {n} outside patch {i}");
                }
                if let Some(k) = local {
                    if !nb.boundary_nodes.contains(&k) {
                        assert!(g.hat(i, x, y) > 0.0, "node {n} inside patch {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_properties() {
        let g = build_grids(20, 5).unwrap();
        let pou = partition_of_unity(&g);
        let nbs = all_neighborhoods(&g);
        let mut sum = vec![0.0; g.fine.node_count()];
        for nb in &nbs {
            let chi = &pou.chi[nb.coarse_node];
            for (k, &n) in nb.fine_nodes.iter().enumerate() {
                assert!((0.0..=1.0).contains(&chi[k]));
                sum[n] += chi[k];
            }
            for &b in &nb.boundary_nodes {
                let (x, y) = g.fine.node_coords(nb.fine_nodes[b]);
                let on_domain_edge = x == 0.0 || y == 0.0 || x == 1.0 || y == 1.0;
                if !on_domain_edge {
                    assert_eq!(chi[b], 0.0);
                }
            }
            let (ci, cj) = g.node_ij(nb.coarse_node);
            let apex = g.fine.node(ci * g.factor, cj * g.factor);
            for other in &nbs {
                if let Some(k) = other.fine_nodes.iter().position(|&m| m == apex) {
                    let expect = if other.coarse_node == nb.coarse_node { 1.0 } else { 0.0 };
                    assert_eq!(pou.chi[other.coarse_node][k], expect);
                }
            }
        }
        assert!(sum.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hat_gradient_energy_matches_closed_form() {
        let g = build_grids(20, 5).unwrap();
        let h = g.hx();
        for &(x, y) in &[(0.03, 0.17), (0.51, 0.77), (0.99, 0.01)] {
            let xi = (x / h).fract();
            let eta = (y / h).fract();
            let expect = 2.0 * ((1.0 - eta).powi(2) + eta * eta) / (h * h)
                + 2.0 * ((1.0 - xi).powi(2) + xi * xi) / (h * h);
            assert!((g.hat_gradient_energy(x, y) - expect).abs() < 1e-9 * expect);
        }
    }

    #[test]
    fn unit_cell_stiffness() {
        let g = build_grids(1, 1).unwrap();
        let a = to_dense(&assemble_form(&g, &g.fine.whole_domain(), &[1.0], FormKind::Stiffness).unwrap());
        // nodes: 0=(0,0) 1=(1,0) 2=(0,1) 3=(1,1)
        for i in 0..4 {
            assert!((a[(i, i)] - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((a[(0, 1)] + 1.0 / 6.0).abs() < 1e-15);
        assert!((a[(0, 2)] + 1.0 / 6.0).abs() < 1e-15);
        assert!((a[(0, 3)] + 1.0 / 3.0).abs() < 1e-15);
        assert!((a[(1, 2)] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stiffness_rows_sum_to_zero_and_spectral_form_is_definite() {
        let g = build_grids(20, 5).unwrap();
        let nb = neighborhood(&g, g.node(2, 1)).unwrap();
        let kappa: Vec<f64> = (0..nb.cell_count()).map(|c| 1.0 + ((c * 37) % 11) as f64 * 90.0).collect();
        let a = assemble_form(&g, &nb.block, &kappa, FormKind::Stiffness).unwrap();
        let ones = vec![1.0; nb.node_count()];
        assert!(spmv(&a, &ones).iter().all(|r| r.abs() < 1e-12 * 1000.0));
        let ad = to_dense(&a);
        assert!((&ad - ad.transpose()).amax() < 1e-12);

        let s = assemble_form(&g, &nb.block, &kappa, FormKind::Spectral).unwrap();
        let sd = to_dense(&s);
        assert!((&sd - sd.transpose()).amax() < 1e-9);
        let mut state = 17u64;
        for _ in 0..100 {
            let x: Vec<f64> = (0..nb.node_count())
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                    ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                })
                .collect();
            let sx = spmv(&s, &x);
            assert!(crate::linalg::dot(&x, &sx) > 0.0);
        }
    }

    #[test]
    fn region_size_mismatch_rejected() {
        let g = build_grids(10, 5).unwrap();
        let err = assemble_form(&g, &g.fine.whole_domain(), &[1.0; 3], FormKind::Stiffness);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn global_stiffness_is_sum_of_patch_forms() {
        // Each fine cell lies in exactly four patches when weighted by the
        // number of patches covering it; with factor f the interior coarse
        // cells are each covered by four neighborhoods.
        let g = build_grids(10, 5).unwrap();
        let kappa: Vec<f64> = (0..100).map(|c| 1.0 + (c % 7) as f64).collect();
        let global = to_dense(&assemble_form(&g, &g.fine.whole_domain(), &kappa, FormKind::Stiffness).unwrap());
        let mut summed = nalgebra::DMatrix::zeros(121, 121);
        for nb in all_neighborhoods(&g) {
            let local_kappa: Vec<f64> = nb.fine_cells.iter().map(|&c| kappa[c]).collect();
            let a = to_dense(&assemble_form(&g, &nb.block, &local_kappa, FormKind::Stiffness).unwrap());
            for (p, &gp) in nb.fine_nodes.iter().enumerate() {
                for (q, &gq) in nb.fine_nodes.iter().enumerate() {
                    summed[(gp, gq)] += a[(p, q)];
                }
            }
        }
        // 2x2 coarse cells, each covered by its 4 corner patches
        assert!((summed - global * 4.0).amax() < 1e-10);
    }
}
