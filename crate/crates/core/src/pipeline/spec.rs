use std::fmt::Write as _;
use std::str::FromStr;

use crate::cluster::TrainingConfig;
use crate::{Error, Result};

/// Everything that defines an experiment. Parsed from and printed to a
/// `key = value` text format with `#` comments.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub nx: usize,
    pub factor: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Training fields use seeds `train_seed..train_seed + n_train`.
    pub train_seed: u64,
    pub test_seed: u64,
    pub clusters: Vec<usize>,
    pub basis: Vec<usize>,
    /// Constant source term.
    pub source: f64,
    /// Which offline basis function the generator learns (0 = first).
    pub target_index: usize,
    pub max_epochs: usize,
    pub stable_epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub net_seed: u64,
    pub adversary_epochs: usize,
    pub adversary_lr: f64,
    /// Upper bound on bases used to pretrain the adversary per patch shape.
    pub adversary_samples: usize,
    pub ablation_epochs: usize,
    /// Initialize each neighborhood from the first trained neighborhood of
    /// the same patch shape.
    pub transfer_init: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            nx: 40,
            factor: 5,
            n_train: 100,
            n_test: 50,
            train_seed: 1000,
            test_seed: 900_000,
            clusters: vec![2, 4, 6, 8],
            basis: vec![2, 3, 4],
            source: 1.0,
            target_index: 1,
            max_epochs: 200,
            stable_epochs: 20,
            steps_per_epoch: 1,
            lr: 1e-2,
            lambda_c: 1.0,
            lambda_r: 1.0,
            lambda_a: 1.0,
            net_seed: 7,
            adversary_epochs: 200,
            adversary_lr: 5e-3,
            adversary_samples: 128,
            ablation_epochs: 400,
            transfer_init: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "nx" => spec.nx = parse_value(key, value)?,
                "factor" => spec.factor = parse_value(key, value)?,
                "n_train" => spec.n_train = parse_value(key, value)?,
                "n_test" => spec.n_test = parse_value(key, value)?,
                "train_seed" => spec.train_seed = parse_value(key, value)?,
                "test_seed" => spec.test_seed = parse_value(key, value)?,
                "clusters" => spec.clusters = parse_list(key, value)?,
                "basis" => spec.basis = parse_list(key, value)?,
                "source" => spec.source = parse_value(key, value)?,
                "target_index" => spec.target_index = parse_value(key, value)?,
                "max_epochs" => spec.max_epochs = parse_value(key, value)?,
                "stable_epochs" => spec.stable_epochs = parse_value(key, value)?,
                "steps_per_epoch" => spec.steps_per_epoch = parse_value(key, value)?,
                "lr" => spec.lr = parse_value(key, value)?,
                "lambda_c" => spec.lambda_c = parse_value(key, value)?,
                "lambda_r" => spec.lambda_r = parse_value(key, value)?,
                "lambda_a" => spec.lambda_a = parse_value(key, value)?,
                "net_seed" => spec.net_seed = parse_value(key, value)?,
                "adversary_epochs" => spec.adversary_epochs = parse_value(key, value)?,
                "adversary_lr" => spec.adversary_lr = parse_value(key, value)?,
                "adversary_samples" => spec.adversary_samples = parse_value(key, value)?,
                "ablation_epochs" => spec.ablation_epochs = parse_value(key, value)?,
                "transfer_init" => spec.transfer_init = parse_value(key, value)?,
                other => return Err(Error::Parse(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("nx", self.nx.to_string());
        kv("factor", self.factor.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("train_seed", self.train_seed.to_string());
        kv("test_seed", self.test_seed.to_string());
        kv("clusters", join(&self.clusters));
        kv("basis", join(&self.basis));
        kv("source", format!("{:?}", self.source));
        kv("target_index", self.target_index.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("stable_epochs", self.stable_epochs.to_string());
        kv("steps_per_epoch", self.steps_per_epoch.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lambda_c", format!("{:?}", self.lambda_c));
        kv("lambda_r", format!("{:?}", self.lambda_r));
        kv("lambda_a", format!("{:?}", self.lambda_a));
        kv("net_seed", self.net_seed.to_string());
        kv("adversary_epochs", self.adversary_epochs.to_string());
        kv("adversary_lr", format!("{:?}", self.adversary_lr));
        kv("adversary_samples", self.adversary_samples.to_string());
        kv("ablation_epochs", self.ablation_epochs.to_string());
        kv("transfer_init", self.transfer_init.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.nx == 0 || self.factor == 0 || self.nx % self.factor != 0 {
            return bad(format!("factor {} must divide nx {}", self.factor, self.nx));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("training and test sets must be non-empty".into());
        }
        if self.clusters.is_empty() || self.basis.is_empty() {
            return bad("cluster and basis sweeps must be non-empty".into());
        }
        if self.clusters.iter().any(|&k| k == 0 || k > self.n_train) {
            return bad("cluster counts must lie in 1..=n_train".into());
        }
        let overlap = self.train_seed < self.test_seed + self.n_test as u64
            && self.test_seed < self.train_seed + self.n_train as u64;
        if overlap {
            return bad("training and test seed ranges overlap".into());
        }
        if !(self.source.is_finite() && self.source != 0.0) {
            return bad("source must be finite and non-zero".into());
        }
        self.training(self.clusters[0]).validate()
    }

    pub fn train_seeds(&self) -> impl Iterator<Item = u64> {
        self.train_seed..self.train_seed + self.n_train as u64
    }

    pub fn test_seeds(&self) -> impl Iterator<Item = u64> {
        self.test_seed..self.test_seed + self.n_test as u64
    }

    pub fn largest_basis(&self) -> usize {
        self.basis.iter().copied().max().unwrap_or(1)
    }

    pub fn largest_clusters(&self) -> usize {
        self.clusters.iter().copied().max().unwrap_or(1)
    }

    pub fn training(&self, n_clusters: usize) -> TrainingConfig {
        TrainingConfig {
            n_clusters,
            lambda_c: self.lambda_c,
            lambda_r: self.lambda_r,
            lambda_a: self.lambda_a,
            max_epochs: self.max_epochs,
            stable_epochs: self.stable_epochs,
            steps_per_epoch: self.steps_per_epoch,
            lr: self.lr,
            seed: self.net_seed,
            basis_counts: self.basis.clone(),
            fixed_epochs: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn print_parse_round_trip() {
        let mut spec = ExperimentSpec::default();
        spec.lr = 0.0037;
        spec.clusters = vec![3, 5];
        spec.transfer_init = true;
        assert_eq!(ExperimentSpec::parse(&spec.to_text()).unwrap(), spec);
    }

    #[test]
    fn comments_and_defaults() {
        let spec = ExperimentSpec::parse("# desk\nnx = 20 # fine cells\n\nn_train=10\nclusters = 2, 4\n").unwrap();
        assert_eq!(spec.nx, 20);
        assert_eq!(spec.n_train, 10);
        assert_eq!(spec.clusters, vec![2, 4]);
        assert_eq!(spec.factor, 5);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ExperimentSpec::parse("nx = 41").is_err());
        assert!(ExperimentSpec::parse("bogus = 1").is_err());
        assert!(ExperimentSpec::parse("nx 40").is_err());
        assert!(ExperimentSpec::parse("train_seed = 10\ntest_seed = 50").is_err());
        assert!(ExperimentSpec::parse("clusters =").is_err());
    }
}
