//! Deep clustering of permeability patches per coarse neighborhood: an
//! encoder/generator pair trained against precomputed bases, K-means in the
//! latent space, and one precomputed basis per cluster.

mod arch;
mod kmeans;
mod loss;
mod model;
mod train;

pub use arch::{adversary, encoder, generator, AutoEncoder, ADVERSARY_TAPS, LATENT_DIM, LEAKY_SLOPE};
pub use kmeans::{kmeans, nearest, KMeans, MAX_LLOYD_ITERATIONS};
pub use loss::{adversary_taps, loss_a, loss_c, loss_r};
pub use model::{solve_clustered, ClusterBasis, ClusterModel, Normalization};
pub use train::{
    cluster_bases, pretrain_adversary, train_neighborhood, training_target, EpochRecord, LossParts, NeighborhoodContext,
    Objective, PretrainReport, StopReason, TrainingConfig, TrainingLog,
};
