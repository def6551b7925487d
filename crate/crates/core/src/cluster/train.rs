use log::{debug, info};

use super::arch::{self, AutoEncoder};
use super::kmeans::kmeans;
use super::loss::{adversary_taps, loss_a, loss_c, loss_r};
use super::model::{ClusterBasis, ClusterModel, Normalization};
use crate::field::{mean_field, Patch};
use crate::gmsfem::{offline_basis, snapshot_space, OfflineBasis};
use crate::grid::{CoarseGrid, Neighborhood, PartitionOfUnity};
use crate::nn::{AdamState, Network, Parameterized, Taps, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub n_clusters: usize,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub max_epochs: usize,
    /// Consecutive epochs without assignment changes that end training.
    pub stable_epochs: usize,
    /// Full-batch Adam steps per epoch.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Basis counts precomputed for every cluster; the largest is stored.
    pub basis_counts: Vec<usize>,
    /// Run exactly `max_epochs` epochs regardless of assignment stability.
    pub fixed_epochs: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            lambda_c: 1.0,
            lambda_r: 1.0,
            lambda_a: 1.0,
            max_epochs: 200,
            stable_epochs: 20,
            steps_per_epoch: 1,
            lr: 1e-3,
            seed: 0,
            basis_counts: vec![2, 3, 4],
            fixed_epochs: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_clusters == 0 {
            return bad("n_clusters must be at least 1");
        }
        if [self.lambda_c, self.lambda_r, self.lambda_a].iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.max_epochs == 0 || self.stable_epochs == 0 || self.stable_epochs > self.max_epochs {
            return bad("need 1 <= stable_epochs <= max_epochs");
        }
        if self.steps_per_epoch == 0 || !(self.lr > 0.0) {
            return bad("need at least one step per epoch and a positive learning rate");
        }
        if self.basis_counts.is_empty() || self.basis_counts.contains(&0) {
            return bad("basis counts must be non-empty and positive");
        }
        Ok(())
    }

    pub fn max_basis(&self) -> usize {
        self.basis_counts.iter().copied().max().unwrap_or(1)
    }
}

/// One offline basis column as a training target: the localized basis
/// function scaled to unit maximum magnitude.
pub fn training_target(basis: &OfflineBasis, index: usize) -> Result<Vec<f64>> {
    if index >= basis.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {index} but only {} basis functions",
            basis.len()
        )));
    }
    let col = basis.vectors.column(index);
    let scale = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(Error::InvalidArgument("target basis function vanishes".into()));
    }
    Ok(col.iter().map(|v| v / scale).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub history: Vec<f64>,
}

fn reconstruction_mse(net: &mut Network, groups: &[Tensor], grads: bool) -> Result<f64> {
    let total: usize = groups.iter().map(|g| g.batch()).sum();
    let mut loss = 0.0;
    for g in groups {
        net.set_input_shape(&g.shape[1..])?;
        let (y, _) = net.forward(g)?;
        let diff: Vec<f64> = y.data.iter().zip(&g.data).map(|(a, b)| a - b).collect();
        loss += diff.iter().map(|r| r * r).sum::<f64>();
        if grads {
            let grad = Tensor::new(&y.shape, diff.iter().map(|r| 2.0 * r / total as f64).collect())?;
            net.backward(&grad)?;
        }
    }
    Ok(loss / total as f64)
}

/// Fits the reconstruction network `f(φ) ≈ φ` on batches of bases, one
/// tensor `[m, 1, h, w]` per image shape, and returns it frozen.
pub fn pretrain_adversary(groups: &[Tensor], epochs: usize, lr: f64, seed: u64) -> Result<(Network, PretrainReport)> {
    let total: usize = groups.iter().map(|g| g.batch()).sum();
    if total < 2 {
        return Err(Error::InvalidArgument("adversary pretraining needs at least two bases".into()));
    }
    if groups.iter().any(|g| g.shape.len() != 4 || g.shape[1] != 1) {
        return Err(Error::DimensionMismatch("adversary inputs must be [m, 1, h, w]".into()));
    }
    let mut net = arch::adversary(groups[0].shape[2], groups[0].shape[3], seed)?;
    let mut adam = AdamState::new(lr);
    let mut history = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        net.zero_grad();
        let mse = reconstruction_mse(&mut net, groups, true)?;
        if !mse.is_finite() {
            return Err(Error::Training(format!("adversary loss became {mse}")));
        }
        history.push(mse);
        adam.step(&mut net.params_mut())?;
    }
    net.zero_grad();
    let final_mse = reconstruction_mse(&mut net, groups, false)?;
    history.push(final_mse);
    let initial_mse = history[0];
    net.set_trainable(false);
    net.set_input_shape(&groups[0].shape[1..])?;
    info!("adversary pretraining: mse {initial_mse:.4e} -> {final_mse:.4e}");
    if !(final_mse <= 0.5 * initial_mse) {
        return Err(Error::Training(format!(
            "adversary pretraining failed: mse {initial_mse:.4e} -> {final_mse:.4e}"
        )));
    }
    Ok((
        net,
        PretrainReport {
            initial_mse,
            final_mse,
            history,
        },
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub c: f64,
    pub r: f64,
    /// Not evaluated (reported as zero) when its weight is zero.
    pub a: f64,
    pub total: f64,
}

/// Total loss `λ_C C + λ_R R + λ_A A` on a fixed training batch.
pub struct Objective {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lambda: [f64; 3],
    pub n_clusters: usize,
    adversary: Option<(Network, Taps)>,
}

impl Objective {
    /// `adversary` is required when the perceptual weight is positive; its
    /// target activations are computed once here.
    pub fn new(inputs: Tensor, targets: Tensor, lambda: [f64; 3], n_clusters: usize, adversary: Option<&Network>) -> Result<Self> {
        if inputs.batch() != targets.batch() {
            return Err(Error::DimensionMismatch("inputs and targets differ in count".into()));
        }
        let adversary = match (lambda[2] > 0.0, adversary) {
            (false, _) => None,
            (true, None) => return Err(Error::InvalidArgument("perceptual loss needs an adversary".into())),
            (true, Some(net)) => {
                let mut net = net.with_input_shape(&targets.shape[1..])?;
                net.set_trainable(false);
                let taps = adversary_taps(&net, &targets)?;
                Some((net, taps))
            }
        };
        Ok(Self {
            inputs,
            targets,
            lambda,
            n_clusters,
            adversary,
        })
    }

    /// Evaluates the loss; with `backward` the gradients are accumulated into
    /// the model parameters.
    pub fn evaluate(&mut self, model: &mut AutoEncoder, assignment: &[usize], backward: bool) -> Result<LossParts> {
        let (z, _) = model.encoder.forward(&self.inputs)?;
        let (y, _) = model.generator.forward(&z)?;
        let [lc, lr, la] = self.lambda;
        let (c, gc) = loss_c(&y, assignment, self.n_clusters)?;
        let (r, gr) = loss_r(&y, &self.targets)?;
        let (a, ga) = match &mut self.adversary {
            Some((net, taps)) => loss_a(net, &y, taps)?,
            None => (0.0, vec![0.0; y.len()]),
        };
        let parts = LossParts {
            c,
            r,
            a,
            total: lc * c + lr * r + la * a,
        };
        if backward {
            let grad: Vec<f64> = (0..y.len()).map(|i| lc * gc[i] + lr * gr[i] + la * ga[i]).collect();
            let dz = model.generator.backward(&Tensor::new(&y.shape, grad)?)?;
            model.encoder.backward(&dz)?;
        }
        Ok(parts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossParts,
    pub changes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Stable,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub coarse_node: usize,
    pub records: Vec<EpochRecord>,
    pub stop: StopReason,
    /// Loss before the first update, under the initial assignment.
    pub initial: LossParts,
}

impl TrainingLog {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,C,R,A,total,assignment_changes\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.11e},{:.11e},{:.11e},{:.11e},{}\n",
                r.epoch, r.loss.c, r.loss.r, r.loss.a, r.loss.total, r.changes
            ));
        }
        s
    }
}

/// Geometry a neighborhood model needs to precompute cluster bases.
#[derive(Clone, Copy)]
pub struct NeighborhoodContext<'a> {
    pub grid: &'a CoarseGrid,
    pub nbhd: &'a Neighborhood,
    pub pou: &'a PartitionOfUnity,
}

/// Offline basis of the cluster-mean field for every non-empty cluster.
pub fn cluster_bases(
    ctx: NeighborhoodContext<'_>,
    patches: &[Patch],
    assignment: &[usize],
    n_clusters: usize,
    l: usize,
) -> Result<Vec<Option<ClusterBasis>>> {
    (0..n_clusters)
        .map(|c| {
            let members: Vec<&Patch> = patches.iter().zip(assignment).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                return Ok(None);
            }
            let mean = mean_field(&members)?;
            let snap = snapshot_space(ctx.grid, ctx.nbhd, &mean.values)?;
            let basis = offline_basis(ctx.grid, ctx.nbhd, &snap, &mean.values, ctx.pou, l)?;
            Ok(Some(ClusterBasis {
                mean_field: mean,
                basis,
            }))
        })
        .collect()
}

/// Alternating training of one neighborhood: gradient steps on the total
/// loss under the current assignment, then K-means on the latent codes warm
/// started from that assignment, until the assignment has been stable for
/// the configured window or the epoch cap is hit.
pub fn train_neighborhood(
    ctx: NeighborhoodContext<'_>,
    patches: &[Patch],
    targets: &[Vec<f64>],
    adversary: Option<&Network>,
    config: &TrainingConfig,
    init: Option<&AutoEncoder>,
) -> Result<(ClusterModel, TrainingLog)> {
    config.validate()?;
    let node = ctx.nbhd.coarse_node;
    if patches.len() != targets.len() || patches.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} patches and {} targets",
            patches.len(),
            targets.len()
        )));
    }
    let (ncx, ncy) = (ctx.nbhd.block.ncx, ctx.nbhd.block.ncy);
    if patches.iter().any(|p| (p.ncx, p.ncy) != (ncx, ncy)) {
        return Err(Error::DimensionMismatch("patch shape differs from the neighborhood".into()));
    }
    let refs: Vec<&Patch> = patches.iter().collect();
    let norm = Normalization::fit(&refs);
    let inputs = norm.tensor(&refs)?;
    let rows: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let targets_t = Tensor::stack(&rows, &[1, ncy + 1, ncx + 1])?;

    let mut net = match init {
        Some(net) => {
            if net.encoder.input_shape() != [1, ncy, ncx] {
                return Err(Error::DimensionMismatch("transfer model has another patch shape".into()));
            }
            net.clone()
        }
        None => AutoEncoder::new(ncy, ncx, config.seed)?,
    };
    let lambda = [config.lambda_c, config.lambda_r, config.lambda_a];
    let k = config.n_clusters.min(patches.len());
    let mut objective = Objective::new(inputs, targets_t, lambda, k, adversary)?;

    let mut assignment = kmeans(targets, k, None)?.assignment;
    let initial = objective.evaluate(&mut net, &assignment, false)?;
    let mut adam = AdamState::new(config.lr);
    let mut records = Vec::new();
    let mut stable = 0;
    let mut stop = StopReason::MaxEpochs;
    let mut centroids = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut first = None;
        for _ in 0..config.steps_per_epoch {
            net.zero_grad();
            let parts = objective.evaluate(&mut net, &assignment, true)?;
            if !parts.total.is_finite() {
                return Err(Error::Training(format!(
                    "neighborhood {node}: non-finite loss at epoch {epoch} (C {}, R {}, A {})",
                    parts.c, parts.r, parts.a
                )));
            }
            first.get_or_insert(parts);
            adam.step(&mut net.params_mut())
                .map_err(|e| Error::Training(format!("neighborhood {node}, epoch {epoch}: {e}")))?;
        }
        let latent = net.latent(&objective.inputs)?;
        let points: Vec<Vec<f64>> = (0..latent.batch()).map(|i| latent.sample(i).to_vec()).collect();
        let km = kmeans(&points, k, Some(&assignment))?;
        let changes = km.assignment.iter().zip(&assignment).filter(|(a, b)| a != b).count();
        assignment = km.assignment;
        centroids = km.centroids;
        let loss = first.expect("at least one step");
        debug!("nbhd {node} epoch {epoch}: total {:.4e} changes {changes}", loss.total);
        records.push(EpochRecord { epoch, loss, changes });
        stable = if changes == 0 { stable + 1 } else { 0 };
        if !config.fixed_epochs && stable >= config.stable_epochs {
            stop = StopReason::Stable;
            break;
        }
    }
    net.zero_grad();
    let clusters = cluster_bases(ctx, patches, &assignment, k, config.max_basis())?;
    let model = ClusterModel {
        coarse_node: node,
        ncx,
        ncy,
        norm,
        net,
        centroids,
        assignment,
        clusters,
    };
    let log = TrainingLog {
        coarse_node: node,
        records,
        stop,
        initial,
    };
    Ok((model, log))
}
