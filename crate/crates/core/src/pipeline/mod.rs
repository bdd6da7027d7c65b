//! Experiment pipeline: data preparation, answering, partitioning,
//! elicitation, rectification and evaluation.

pub mod world;

mod config;
mod infer;
mod pretrain;
mod run;
mod sweep;

pub use config::{AttributionConfig, BootstrapConfig, ConfigError, DataConfig, DataSource, Method, RunConfig, ENV_PREFIX};
pub use infer::{
    answer_inference, check_disjoint, make_splits, membership_filter, partition_by_correctness, partition_from_predictions,
    predict_all, DatasetSplits, DecodeConfig, InsufficientData, Partition,
};
pub use pretrain::{pretrain, PretrainConfig, PretrainLog};
pub use run::{
    baseline_eval, elicit_stage, evaluate_stage, evidence_pool, hash_file, prepare, prepare_shared, rectify_stage, run_rectification,
    run_stages, run_through, run_variant, sha256_hex, Baseline, BuiltinElicitor, Elicited, Elicitor, HeldOutMonitor, Manifest,
    Prepared, Progress, Rectified, RunDir, RunError, RunResult, Stage, StageRecord, MANIFEST, RUN_FORMAT,
};
pub use sweep::{
    cross_domain, cross_evaluate, generator_comparison, generator_comparison_on, top_n_sweep, top_n_sweep_on, variant_config,
    CrossError, CrossMatrix, TOP_N_VALUES,
};
