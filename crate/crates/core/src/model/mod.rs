//! The graph-attentive neural process: pair encoder, deterministic and
//! latent paths, Gaussian decoder, ELBO and sampled prediction.

mod batch;
mod config;
pub(crate) mod granp;
mod latent;
mod predict;

pub use batch::{prepare_scenes, EpisodeBatch, PreparedScene};
pub use config::{ModelConfig, GAT_LAYERS, STATE_DIM, SUPPORTED_HEADS, SUPPORTED_HIDDEN};
pub use granp::{DecodedVars, ElboOutput, Granp, HistoryEncoding, LatentVars};
pub use latent::{
    kl_diag, kl_diag_tape, latent_sigma, observation_sigma, sample_latent, LatentDistribution,
    LATENT_SIGMA_MAX, LATENT_SIGMA_MIN, OBS_SIGMA_FLOOR,
};
pub use predict::{
    attention_weights, latent_noise, AttentionExport, Prediction, PredictiveDistribution,
    Predictor, CI_Z,
};
