//! Optimisation of the negative ELBO, checkpoints, and per-horizon
//! evaluation against simple kinematic baselines.

mod adam;
mod checkpoint;
mod eval;
mod trainer;

pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2, DEFAULT_LR};
pub use checkpoint::{
    decode_params, encode_params, Checkpoint, Manifest, ParamEntry, TrainingSummary,
    CHECKPOINT_VERSION, MANIFEST_FILE, PARAMS_FILE,
};
pub use eval::{
    constant_position, cv_baseline, evaluate, evaluate_with, gaussian_nll, horizon_metrics,
    horizon_step, predict_scenes, EvalReport, CV_SIGMA, DEFAULT_SAMPLES, HORIZONS_S,
};
pub use trainer::{
    batch_ranges, loss_history_csv, split_indices, train, train_with, write_loss_history,
    DataSplit, EpochStats, TrainConfig, TrainOutput,
};
