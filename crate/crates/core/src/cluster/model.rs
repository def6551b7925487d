use std::path::Path;

use log::warn;
use nalgebra::DMatrix;

use super::arch::AutoEncoder;
use super::kmeans::nearest;
use crate::fem::Solution;
use crate::field::{restrict, Patch, PermeabilityField};
use crate::gmsfem::{solve_coarse, OfflineBasis};
use crate::grid::{CoarseGrid, Neighborhood};
use crate::io::{Reader, Writer};
use crate::nn::{Network, Tensor};
use crate::{Error, Result};

/// Log transform followed by an affine map of the training range to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub lo: f64,
    pub hi: f64,
}

impl Normalization {
    pub fn fit(patches: &[&Patch]) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in patches.iter().flat_map(|p| &p.values) {
            let l = v.ln();
            lo = lo.min(l);
            hi = hi.max(l);
        }
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        Self { lo, hi }
    }

    pub fn apply(&self, patch: &Patch) -> Vec<f64> {
        patch.values.iter().map(|v| (v.ln() - self.lo) / (self.hi - self.lo)).collect()
    }

    /// Normalized patches as a `[m, 1, ncy, ncx]` batch.
    pub fn tensor(&self, patches: &[&Patch]) -> Result<Tensor> {
        let first = patches
            .first()
            .ok_or_else(|| Error::InvalidArgument("no patches".into()))?;
        let rows: Vec<Vec<f64>> = patches.iter().map(|p| self.apply(p)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Tensor::stack(&refs, &[1, first.ncy, first.ncx])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBasis {
    pub mean_field: Patch,
    pub basis: OfflineBasis,
}

/// Trained clustering of one coarse neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub coarse_node: usize,
    pub ncx: usize,
    pub ncy: usize,
    pub norm: Normalization,
    pub net: AutoEncoder,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id of every training sample.
    pub assignment: Vec<usize>,
    /// Precomputed basis per cluster; `None` for clusters left empty.
    pub clusters: Vec<Option<ClusterBasis>>,
}

impl ClusterModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    fn check_patch(&self, patch: &Patch) -> Result<()> {
        if (patch.ncx, patch.ncy) != (self.ncx, self.ncy) {
            return Err(Error::DimensionMismatch(format!(
                "patch {}x{} for a {}x{} model",
                patch.ncx, patch.ncy, self.ncx, self.ncy
            )));
        }
        Ok(())
    }

    pub fn latent(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.check_patch(patch)?;
        Ok(self.net.latent(&self.norm.tensor(&[patch])?)?.data)
    }

    /// Cluster whose centroid is nearest to the latent code of `patch`.
    pub fn assign(&self, patch: &Patch) -> Result<usize> {
        Ok(nearest(&self.latent(patch)?, &self.centroids).0)
    }

    /// Learnt basis image for a patch, in normalized target units.
    pub fn generate(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.check_patch(patch)?;
        Ok(self.net.reconstruct(&self.norm.tensor(&[patch])?)?.data)
    }

    /// First `l` precomputed basis functions of `cluster`. An empty cluster
    /// falls back to the non-empty cluster with the nearest centroid.
    pub fn basis(&self, cluster: usize, l: usize) -> Result<(usize, DMatrix<f64>)> {
        let used = match self.clusters.get(cluster) {
            Some(Some(_)) => cluster,
            Some(None) => {
                let c = &self.centroids[cluster];
                let mut best = (usize::MAX, f64::INFINITY);
                for (j, other) in self.centroids.iter().enumerate() {
                    if self.clusters[j].is_none() {
                        continue;
                    }
                    let d: f64 = c.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                if best.0 == usize::MAX {
                    return Err(Error::InvalidArgument(format!("model {} has no basis", self.coarse_node)));
                }
                warn!(
                    "neighborhood {}: cluster {cluster} is empty, using cluster {}",
                    self.coarse_node, best.0
                );
                best.0
            }
            None => return Err(Error::InvalidArgument(format!("cluster {cluster} out of range"))),
        };
        let basis = &self.clusters[used].as_ref().expect("checked above").basis;
        if l == 0 || l > basis.len() {
            return Err(Error::InvalidArgument(format!(
                "basis count {l} but {} precomputed",
                basis.len()
            )));
        }
        Ok((used, basis.vectors.columns(0, l).into_owned()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(b"CLM1");
        w.u32(self.coarse_node);
        w.u32(self.ncx);
        w.u32(self.ncy);
        w.f64(self.norm.lo);
        w.f64(self.norm.hi);
        for blob in [self.net.encoder.to_bytes(), self.net.generator.to_bytes()] {
            w.u32(blob.len());
            w.bytes(&blob);
        }
        let dim = self.centroids.first().map_or(0, Vec::len);
        w.u32(self.centroids.len());
        w.u32(dim);
        for c in &self.centroids {
            w.f64s(c);
        }
        w.u32(self.assignment.len());
        for &a in &self.assignment {
            w.u32(a);
        }
        for slot in &self.clusters {
            let Some(cb) = slot else {
                w.bytes(&[0]);
                continue;
            };
            w.bytes(&[1]);
            w.f64s(&cb.mean_field.values);
            let b = &cb.basis;
            w.u32(b.vectors.nrows());
            w.u32(b.len());
            w.f64s(&b.eigenvalues);
            w.f64s(b.raw.as_slice());
            w.f64s(b.vectors.as_slice());
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect(b"CLM1")?;
        let coarse_node = r.u32()?;
        let (ncx, ncy) = (r.u32()?, r.u32()?);
        let norm = Normalization { lo: r.f64()?, hi: r.f64()? };
        let mut nets = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.u32()?;
            nets.push(Network::from_bytes(r.take(len)?)?);
        }
        let generator = nets.pop().expect("two blobs");
        let encoder = nets.pop().expect("two blobs");
        let (k, dim) = (r.u32()?, r.u32()?);
        let centroids = (0..k).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        let m = r.u32()?;
        let assignment = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if assignment.iter().any(|&a| a >= k) {
            return Err(Error::Parse("assignment refers to a missing cluster".into()));
        }
        let mut clusters = Vec::with_capacity(k);
        for _ in 0..k {
            if r.u8()? == 0 {
                clusters.push(None);
                continue;
            }
            let values = r.f64s(ncx * ncy)?;
            let (rows, l) = (r.u32()?, r.u32()?);
            let eigenvalues = r.f64s(l)?;
            let raw = DMatrix::from_column_slice(rows, l, &r.f64s(rows * l)?);
            let vectors = DMatrix::from_column_slice(rows, l, &r.f64s(rows * l)?);
            clusters.push(Some(ClusterBasis {
                mean_field: Patch { values, ncx, ncy },
                basis: OfflineBasis {
                    coarse_node,
                    eigenvalues,
                    raw,
                    vectors,
                    pou_applied: true,
                },
            }));
        }
        if !r.finished() {
            return Err(Error::Parse("trailing bytes after model".into()));
        }
        Ok(Self {
            coarse_node,
            ncx,
            ncy,
            norm,
            net: AutoEncoder { encoder, generator },
            centroids,
            assignment,
            clusters,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Coarse solve of a new realization with precomputed cluster bases: each
/// neighborhood patch is assigned by its model and the assigned cluster's
/// first `l` basis functions are used. No eigenproblem is solved.
pub fn solve_clustered(
    grid: &CoarseGrid,
    nbhds: &[Neighborhood],
    models: &[ClusterModel],
    field: &PermeabilityField,
    source: &[f64],
    l: usize,
) -> Result<Solution> {
    if models.len() != nbhds.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} models for {} neighborhoods",
            models.len(),
            nbhds.len()
        )));
    }
    let mut bases = Vec::with_capacity(nbhds.len());
    for (nb, model) in nbhds.iter().zip(models) {
        if model.coarse_node != nb.coarse_node {
            return Err(Error::InvalidArgument(format!(
                "model for node {} given for node {}",
                model.coarse_node, nb.coarse_node
            )));
        }
        let patch = restrict(field, nb)?;
        let cluster = model.assign(&patch)?;
        bases.push(model.basis(cluster, l)?.1);
    }
    let refs: Vec<&DMatrix<f64>> = bases.iter().collect();
    solve_coarse(grid, nbhds, &refs, field, source)
}
