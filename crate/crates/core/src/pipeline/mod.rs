//! Experiment harness: field generation, training, cluster sweeps,
//! comparison with per-realization bases and the perceptual-loss ablation.
//! All outputs are written below one output directory.

mod run;
mod spec;

pub use run::{
    adversary_path, cmd_ablate, cmd_compare, cmd_generate, cmd_sweep_clusters, cmd_train, compare_csv, field_config,
    load_dataset, load_models, log_path, model_path, parse_compare_csv, parse_csv, parse_sweep_csv, reference_solutions,
    solve_learnt, sweep_csv, targets, with_pool, AblationArm, CompareRow, Dataset, Report, Status, SweepRow,
};
pub use spec::ExperimentSpec;
