use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;

use super::spec::ExperimentSpec;
use crate::cluster::{
    pretrain_adversary, solve_clustered, train_neighborhood, training_target, AutoEncoder, ClusterModel,
    NeighborhoodContext, StopReason, TrainingConfig, TrainingLog,
};
use crate::fem::{error_ratio, solve_fine, Solution};
use crate::field::{restrict, sample_field, FieldConfig, Patch, PermeabilityField};
use crate::gmsfem::{local_basis, offline_basis_calls, solve_coarse};
use crate::grid::{all_neighborhoods, build_grids, partition_of_unity, CoarseGrid, Neighborhood, PartitionOfUnity};
use crate::nn::{Network, Tensor};
use crate::{Error, Result};

/// Outcome of a command that may fail for some neighborhoods only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Partial { failures: usize },
}

/// Runs `f` on a pool capped by `MSC_THREADS` when that variable is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var("MSC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("MSC_THREADS=`{v}` is not a count")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn field_config(spec: &ExperimentSpec) -> FieldConfig {
    FieldConfig::channelized(spec.nx, spec.nx)
}

fn fields_dir(out: &Path) -> PathBuf {
    out.join("fields")
}

fn field_path(out: &Path, set: &str, i: usize) -> PathBuf {
    fields_dir(out).join(format!("{set}_{i:04}.field"))
}

fn models_dir(out: &Path, k: usize) -> PathBuf {
    out.join("models").join(format!("k{k}"))
}

pub fn model_path(out: &Path, k: usize, node: usize) -> PathBuf {
    models_dir(out, k).join(format!("nbhd_{node:03}.clm"))
}

pub fn log_path(out: &Path, k: usize, node: usize) -> PathBuf {
    out.join("logs").join(format!("k{k}")).join(format!("nbhd_{node:03}.csv"))
}

pub fn adversary_path(out: &Path) -> PathBuf {
    out.join("models").join("adversary.nnm")
}

/// Writes every training and test field plus a manifest that parses back
/// to the same experiment.
pub fn cmd_generate(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let cfg = field_config(spec);
    fs::create_dir_all(fields_dir(out))?;
    let mut manifest = String::from("# fields generated from this spec\n");
    manifest.push_str(&spec.to_text());
    for (set, seeds) in [("train", spec.train_seeds().collect::<Vec<_>>()), ("test", spec.test_seeds().collect())] {
        let fields: Vec<PermeabilityField> = seeds.par_iter().map(|&s| sample_field(&cfg, s)).collect::<Result<_>>()?;
        for (i, f) in fields.iter().enumerate() {
            f.write(&field_path(out, set, i))?;
            manifest.push_str(&format!("# {set}_{i:04}.field seed {}\n", f.seed));
        }
    }
    fs::write(out.join("manifest.txt"), manifest)?;
    info!("generated {} training and {} test fields", spec.n_train, spec.n_test);
    Ok(())
}

/// Grid, neighborhoods and fields of a generated experiment.
pub struct Dataset {
    pub grid: CoarseGrid,
    pub nbhds: Vec<Neighborhood>,
    pub pou: PartitionOfUnity,
    pub train: Vec<PermeabilityField>,
    pub test: Vec<PermeabilityField>,
    pub source: Vec<f64>,
}

impl Dataset {
    pub fn context(&self, i: usize) -> NeighborhoodContext<'_> {
        NeighborhoodContext {
            grid: &self.grid,
            nbhd: &self.nbhds[i],
            pou: &self.pou,
        }
    }

    pub fn patches(&self, fields: &[PermeabilityField], i: usize) -> Result<Vec<Patch>> {
        fields.iter().map(|f| restrict(f, &self.nbhds[i])).collect()
    }
}

pub fn load_dataset(spec: &ExperimentSpec, out: &Path) -> Result<Dataset> {
    spec.validate()?;
    let manifest = fs::read_to_string(out.join("manifest.txt"))
        .map_err(|e| Error::InvalidArgument(format!("no generated fields in {}: {e}", out.display())))?;
    let stored = ExperimentSpec::parse(&manifest)?;
    let same_data = (stored.nx, stored.factor, stored.n_train, stored.n_test, stored.train_seed, stored.test_seed)
        == (spec.nx, spec.factor, spec.n_train, spec.n_test, spec.train_seed, spec.test_seed);
    if !same_data {
        return Err(Error::InvalidArgument("fields on disk were generated from a different spec".into()));
    }
    let grid = build_grids(spec.nx, spec.factor)?;
    let read = |set: &str, n: usize| -> Result<Vec<PermeabilityField>> {
        (0..n).map(|i| PermeabilityField::read(&field_path(out, set, i))).collect()
    };
    let train = read("train", spec.n_train)?;
    let test = read("test", spec.n_test)?;
    Ok(Dataset {
        nbhds: all_neighborhoods(&grid),
        pou: partition_of_unity(&grid),
        source: vec![spec.source; grid.fine.cell_count()],
        grid,
        train,
        test,
    })
}

/// Training targets `[neighborhood][sample]` from per-realization offline
/// bases.
pub fn targets(spec: &ExperimentSpec, ds: &Dataset, fields: &[PermeabilityField]) -> Result<Vec<Vec<Vec<f64>>>> {
    let l = spec.target_index + 1;
    ds.nbhds
        .par_iter()
        .map(|nb| {
            fields
                .iter()
                .map(|f| training_target(&local_basis(&ds.grid, nb, &ds.pou, f, l)?, spec.target_index))
                .collect()
        })
        .collect()
}

/// Adversary training set: targets grouped by image shape, at most
/// `per_shape` of each, taken at an even stride.
fn adversary_groups(ds: &Dataset, targets: &[Vec<Vec<f64>>], per_shape: usize) -> Result<Vec<Tensor>> {
    let mut by_shape: BTreeMap<(usize, usize), Vec<&[f64]>> = BTreeMap::new();
    for (nb, t) in ds.nbhds.iter().zip(targets) {
        let shape = (nb.block.nodes_y(), nb.block.nodes_x());
        by_shape.entry(shape).or_default().extend(t.iter().map(Vec::as_slice));
    }
    by_shape
        .into_iter()
        .map(|((h, w), rows)| {
            let take = per_shape.max(1).min(rows.len());
            let picked: Vec<&[f64]> = (0..take).map(|i| rows[i * rows.len() / take]).collect();
            Tensor::stack(&picked, &[1, h, w])
        })
        .collect()
}

fn write_log(out: &Path, k: usize, log: &TrainingLog) -> Result<()> {
    let path = log_path(out, k, log.coarse_node);
    fs::create_dir_all(path.parent().expect("log file has a parent"))?;
    fs::write(path, log.to_csv())?;
    Ok(())
}

type Trained = Result<(ClusterModel, TrainingLog)>;

fn train_all(
    ds: &Dataset,
    patches: &[Vec<Patch>],
    targets: &[Vec<Vec<f64>>],
    adversary: &Network,
    config: &TrainingConfig,
    transfer: bool,
) -> Vec<Trained> {
    let adv = (config.lambda_a > 0.0).then_some(adversary);
    let job = |i: usize, init: Option<&AutoEncoder>| train_neighborhood(ds.context(i), &patches[i], &targets[i], adv, config, init);
    let n = ds.nbhds.len();
    if !transfer {
        return (0..n).into_par_iter().map(|i| job(i, None)).collect();
    }
    let shape = |i: usize| (ds.nbhds[i].block.ncx, ds.nbhds[i].block.ncy);
    let mut leaders: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for i in 0..n {
        leaders.entry(shape(i)).or_insert(i);
    }
    let leader_ids: Vec<usize> = leaders.values().copied().collect();
    let lead: BTreeMap<usize, Trained> = leader_ids.par_iter().map(|&i| (i, job(i, None))).collect();
    let mut results: Vec<Option<Trained>> = (0..n).into_par_iter().map(|i| {
        if lead.contains_key(&i) {
            return None;
        }
        let init = match &lead[&leaders[&shape(i)]] {
            Ok((m, _)) => Some(&m.net),
            Err(_) => None,
        };
        Some(job(i, init))
    }).collect();
    for (i, r) in lead {
        results[i] = Some(r);
    }
    results.into_iter().map(|r| r.expect("every neighborhood trained")).collect()
}

/// Pretrains the adversary and trains one model per neighborhood for every
/// cluster count in the sweep.
pub fn cmd_train(spec: &ExperimentSpec, out: &Path) -> Result<Status> {
    let ds = load_dataset(spec, out)?;
    let targets = targets(spec, &ds, &ds.train)?;
    let patches: Vec<Vec<Patch>> = (0..ds.nbhds.len()).map(|i| ds.patches(&ds.train, i)).collect::<Result<_>>()?;

    let groups = adversary_groups(&ds, &targets, spec.adversary_samples)?;
    let (adversary, report) = pretrain_adversary(&groups, spec.adversary_epochs, spec.adversary_lr, spec.net_seed)?;
    fs::create_dir_all(out.join("models"))?;
    fs::write(adversary_path(out), adversary.to_bytes())?;
    fs::write(
        out.join("models").join("adversary.csv"),
        format!(
            "initial_mse,final_mse,epochs\n{:.11e},{:.11e},{}\n",
            report.initial_mse, report.final_mse, spec.adversary_epochs
        ),
    )?;

    let mut failures = 0;
    let mut summary = String::from("n_clusters,coarse_node,epochs,stop,status\n");
    for &k in &spec.clusters {
        let config = spec.training(k);
        info!("training {} neighborhoods with {k} clusters", ds.nbhds.len());
        let results = train_all(&ds, &patches, &targets, &adversary, &config, spec.transfer_init);
        fs::create_dir_all(models_dir(out, k))?;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((model, log)) => {
                    model.write(&model_path(out, k, i))?;
                    write_log(out, k, &log)?;
                    let stop = match log.stop {
                        StopReason::Stable => "stable",
                        StopReason::MaxEpochs => "max_epochs",
                    };
                    summary.push_str(&format!("{k},{i},{},{stop},ok\n", log.epochs()));
                }
                Err(e) => {
                    error!("neighborhood {i} with {k} clusters failed: {e}");
                    failures += 1;
                    summary.push_str(&format!("{k},{i},0,none,failed\n"));
                }
            }
        }
    }
    fs::write(out.join("models").join("train_summary.csv"), summary)?;
    Ok(if failures == 0 { Status::Ok } else { Status::Partial { failures } })
}

pub fn load_models(out: &Path, k: usize, n_nbhds: usize) -> Result<Vec<ClusterModel>> {
    (0..n_nbhds)
        .map(|i| {
            let path = model_path(out, k, i);
            ClusterModel::read(&path).map_err(|e| Error::InvalidArgument(format!("missing model {}: {e}", path.display())))
        })
        .collect()
}

pub fn reference_solutions(ds: &Dataset, fields: &[PermeabilityField]) -> Result<Vec<Solution>> {
    fields.par_iter().map(|f| solve_fine(&ds.grid.fine, f, &ds.source)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cluster_errors(ds: &Dataset, models: &[ClusterModel], refs: &[Solution], l: usize) -> Result<Vec<f64>> {
    ds.test
        .par_iter()
        .zip(refs)
        .map(|(f, u)| error_ratio(u, &solve_clustered(&ds.grid, &ds.nbhds, models, f, &ds.source, l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub n_clusters: usize,
    pub l: usize,
    pub mean_error_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub l: usize,
    pub cluster_error: f64,
    pub realization_error: f64,
}

/// Result of a sweep or comparison plus the number of offline basis
/// computations performed by the cluster-method solves.
#[derive(Clone, Debug, PartialEq)]
pub struct Report<T> {
    pub rows: Vec<T>,
    pub cluster_offline_calls: u64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("n_clusters,L,mean_error_ratio\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.11e}\n", r.n_clusters, r.l, r.mean_error_ratio));
    }
    s
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("L,cluster_error,realization_error\n");
    for r in rows {
        s.push_str(&format!("{},{:.11e},{:.11e}\n", r.l, r.cluster_error, r.realization_error));
    }
    s
}

/// Header and numeric rows of a CSV written by this module.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: Vec<f64> = l
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Parse(format!("bad number `{v}`"))))
                .collect::<Result<_>>()?;
            if row.len() != header.len() {
                return Err(Error::Parse(format!("row `{l}` has {} fields", row.len())));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let (header, rows) = parse_csv(text)?;
    if header != ["n_clusters", "L", "mean_error_ratio"] {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    Ok(rows
        .into_iter()
        .map(|r| SweepRow {
            n_clusters: r[0] as usize,
            l: r[1] as usize,
            mean_error_ratio: r[2],
        })
        .collect())
}

pub fn parse_compare_csv(text: &str) -> Result<Vec<CompareRow>> {
    let (header, rows) = parse_csv(text)?;
    if header != ["L", "cluster_error", "realization_error"] {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    Ok(rows
        .into_iter()
        .map(|r| CompareRow {
            l: r[0] as usize,
            cluster_error: r[1],
            realization_error: r[2],
        })
        .collect())
}

/// Mean test-set error ratio for every (cluster count, basis count) pair.
pub fn cmd_sweep_clusters(spec: &ExperimentSpec, out: &Path) -> Result<Report<SweepRow>> {
    let ds = load_dataset(spec, out)?;
    let all_models: Vec<Vec<ClusterModel>> = spec
        .clusters
        .iter()
        .map(|&k| load_models(out, k, ds.nbhds.len()))
        .collect::<Result<_>>()?;
    let refs = reference_solutions(&ds, &ds.test)?;
    let before = offline_basis_calls();
    let mut rows = Vec::new();
    for (&k, models) in spec.clusters.iter().zip(&all_models) {
        for &l in &spec.basis {
            let errs = cluster_errors(&ds, models, &refs, l)?;
            let row = SweepRow {
                n_clusters: k,
                l,
                mean_error_ratio: mean(&errs),
            };
            info!("clusters {k} L {l}: mean error ratio {:.4e}", row.mean_error_ratio);
            rows.push(row);
        }
    }
    let calls = offline_basis_calls() - before;
    fs::write(out.join("sweep_clusters.csv"), sweep_csv(&rows))?;
    Ok(Report {
        rows,
        cluster_offline_calls: calls,
    })
}

/// Cluster method at the largest cluster count against bases computed from
/// each test realization itself.
pub fn cmd_compare(spec: &ExperimentSpec, out: &Path) -> Result<Report<CompareRow>> {
    let ds = load_dataset(spec, out)?;
    let k = spec.largest_clusters();
    let models = load_models(out, k, ds.nbhds.len())?;
    let refs = reference_solutions(&ds, &ds.test)?;
    let before = offline_basis_calls();
    let cluster: Vec<f64> = spec
        .basis
        .iter()
        .map(|&l| cluster_errors(&ds, &models, &refs, l).map(|e| mean(&e)))
        .collect::<Result<_>>()?;
    let calls = offline_basis_calls() - before;

    let lmax = spec.largest_basis();
    let per_field: Vec<Vec<f64>> = ds
        .test
        .par_iter()
        .zip(&refs)
        .map(|(f, u)| {
            let full: Vec<DMatrix<f64>> = ds
                .nbhds
                .iter()
                .map(|nb| local_basis(&ds.grid, nb, &ds.pou, f, lmax).map(|b| b.vectors))
                .collect::<Result<_>>()?;
            spec.basis
                .iter()
                .map(|&l| {
                    let cols: Vec<DMatrix<f64>> = full.iter().map(|b| b.columns(0, l).into_owned()).collect();
                    let refs: Vec<&DMatrix<f64>> = cols.iter().collect();
                    error_ratio(u, &solve_coarse(&ds.grid, &ds.nbhds, &refs, f, &ds.source)?)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<CompareRow> = spec
        .basis
        .iter()
        .enumerate()
        .map(|(j, &l)| CompareRow {
            l,
            cluster_error: cluster[j],
            realization_error: mean(&per_field.iter().map(|e| e[j]).collect::<Vec<_>>()),
        })
        .collect();
    for r in &rows {
        info!("L {}: cluster {:.4e} realization {:.4e}", r.l, r.cluster_error, r.realization_error);
    }
    fs::write(out.join("compare.csv"), compare_csv(&rows))?;
    Ok(Report {
        rows,
        cluster_offline_calls: calls,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub lambda: [f64; 3],
    pub epochs: usize,
    pub heldout_basis_mse: f64,
    pub mean_error_ratio: f64,
    pub failures: usize,
}

/// Coarse solve whose per-neighborhood space is the partition-of-unity
/// function plus one learnt basis function, both vanishing on `∂ω_i`.
pub fn solve_learnt(ds: &Dataset, learnt: &[Vec<f64>], field: &PermeabilityField) -> Result<Solution> {
    let bases: Vec<DMatrix<f64>> = ds
        .nbhds
        .iter()
        .zip(learnt)
        .map(|(nb, g)| {
            let chi = &ds.pou.chi[nb.coarse_node];
            let mut b = DMatrix::from_fn(nb.node_count(), 2, |i, k| if k == 0 { chi[i] } else { g[i] });
            for &p in &nb.boundary_nodes {
                b[(p, 0)] = 0.0;
                b[(p, 1)] = 0.0;
            }
            b
        })
        .collect();
    let refs: Vec<&DMatrix<f64>> = bases.iter().collect();
    solve_coarse(&ds.grid, &ds.nbhds, &refs, field, &ds.source)
}

/// Trains every neighborhood twice with the clustering loss disabled, once
/// on the reconstruction loss alone and once adding the perceptual loss, and
/// reports held-out basis error and solve error for both.
pub fn cmd_ablate(spec: &ExperimentSpec, out: &Path) -> Result<(Vec<AblationArm>, Status)> {
    let ds = load_dataset(spec, out)?;
    let adversary = Network::from_bytes(&fs::read(adversary_path(out)).map_err(|e| {
        Error::InvalidArgument(format!("no pretrained adversary (run train first): {e}"))
    })?)?;
    let train_targets = targets(spec, &ds, &ds.train)?;
    let test_targets = targets(spec, &ds, &ds.test)?;
    let patches: Vec<Vec<Patch>> = (0..ds.nbhds.len()).map(|i| ds.patches(&ds.train, i)).collect::<Result<_>>()?;
    let test_patches: Vec<Vec<Patch>> = (0..ds.nbhds.len()).map(|i| ds.patches(&ds.test, i)).collect::<Result<_>>()?;
    let refs = reference_solutions(&ds, &ds.test)?;

    let arms = [("R-only", [0.0, spec.lambda_r, 0.0]), ("R+A", [0.0, spec.lambda_r, spec.lambda_a])];
    let mut text = String::from("# ablation arms, clustering loss disabled, single cluster, fixed epochs\n");
    let mut report = Vec::new();
    let mut total_failures = 0;
    for (name, lambda) in arms {
        let line = format!(
            "arm {name}: lambda_c = {}, lambda_r = {}, lambda_a = {}, epochs = {}",
            lambda[0], lambda[1], lambda[2], spec.ablation_epochs
        );
        info!("{line}");
        text.push_str(&line);
        text.push('\n');
        let config = TrainingConfig {
            n_clusters: 1,
            lambda_c: lambda[0],
            lambda_r: lambda[1],
            lambda_a: lambda[2],
            max_epochs: spec.ablation_epochs,
            stable_epochs: spec.ablation_epochs,
            fixed_epochs: true,
            basis_counts: vec![1],
            ..spec.training(1)
        };
        let results = train_all(&ds, &patches, &train_targets, &adversary, &config, false);
        let mut failures = 0;
        let mut models = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((m, _)) => models.push(Some(m)),
                Err(e) => {
                    error!("ablation arm {name}, neighborhood {i}: {e}");
                    failures += 1;
                    models.push(None);
                }
            }
        }
        total_failures += failures;
        if failures == models.len() {
            return Err(Error::Training(format!("ablation arm {name} failed everywhere")));
        }
        // learnt bases [neighborhood][test sample]; failed neighborhoods use the
        // partition of unity only
        let learnt: Vec<Vec<Vec<f64>>> = models
            .par_iter()
            .zip(&test_patches)
            .enumerate()
            .map(|(i, (m, ps))| match m {
                Some(m) => ps.iter().map(|p| m.generate(p)).collect(),
                None => Ok(vec![vec![0.0; ds.nbhds[i].node_count()]; ps.len()]),
            })
            .collect::<Result<_>>()?;
        let mut sq = Vec::new();
        for (i, m) in models.iter().enumerate() {
            if m.is_none() {
                continue;
            }
            for (g, t) in learnt[i].iter().zip(&test_targets[i]) {
                sq.push(g.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
            }
        }
        let errs: Vec<f64> = (0..ds.test.len())
            .into_par_iter()
            .map(|s| {
                let per_nbhd: Vec<Vec<f64>> = learnt.iter().map(|l| l[s].clone()).collect();
                error_ratio(&refs[s], &solve_learnt(&ds, &per_nbhd, &ds.test[s])?)
            })
            .collect::<Result<_>>()?;
        report.push(AblationArm {
            name: name.to_string(),
            lambda,
            epochs: spec.ablation_epochs,
            heldout_basis_mse: mean(&sq),
            mean_error_ratio: mean(&errs),
            failures,
        });
    }
    let mut csv = String::from("arm,lambda_c,lambda_r,lambda_a,epochs,heldout_basis_mse,mean_error_ratio\n");
    for a in &report {
        csv.push_str(&format!(
            "{},{},{},{},{},{:.11e},{:.11e}\n",
            a.name, a.lambda[0], a.lambda[1], a.lambda[2], a.epochs, a.heldout_basis_mse, a.mean_error_ratio
        ));
        text.push_str(&format!(
            "{}: held-out basis mse {:.6e}, mean error ratio {:.6e}\n",
            a.name, a.heldout_basis_mse, a.mean_error_ratio
        ));
    }
    fs::write(out.join("ablation.csv"), csv)?;
    fs::write(out.join("ablation.txt"), text)?;
    if total_failures > 0 {
        warn!("{total_failures} ablation trainings failed");
    }
    let status = if total_failures == 0 { Status::Ok } else { Status::Partial { failures: total_failures } };
    Ok((report, status))
}
