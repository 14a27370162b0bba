use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::{TrajectoryScene, FUTURE_LEN, RATE_HZ};
use crate::error::{Error, Result};
use crate::model::{latent_noise, ModelConfig, PredictiveDistribution, PreparedScene};
use crate::train::checkpoint::Checkpoint;

/// Reported horizons in seconds.
pub const HORIZONS_S: [usize; 5] = [1, 2, 3, 4, 5];
/// Fixed spread of the constant-velocity baseline, meters.
pub const CV_SIGMA: f64 = 0.5;
/// Latent draws per scene when not specified.
pub const DEFAULT_SAMPLES: usize = 30;

/// Future step index (1-based) of a horizon in seconds.
pub fn horizon_step(seconds: usize) -> usize {
    seconds * RATE_HZ as usize
}

fn horizon_key(seconds: usize) -> String {
    format!("{seconds}s")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse_m: BTreeMap<String, f64>,
    pub nll_nats: BTreeMap<String, f64>,
    pub n_scenes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
}

impl EvalReport {
    pub fn rmse(&self, seconds: usize) -> f64 {
        self.rmse_m[&horizon_key(seconds)]
    }

    pub fn nll(&self, seconds: usize) -> f64 {
        self.nll_nats[&horizon_key(seconds)]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `-log N(y; mu, sigma^2)` for one axis.
pub fn gaussian_nll(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    0.5 * (2.0 * PI).ln() + sigma.ln() + 0.5 * z * z
}

/// Per-horizon RMSE and diagonal bivariate NLL of `predictions` against
/// ground-truth futures, both in meters. Sums run in scene order.
pub fn horizon_metrics(
    predictions: &[PredictiveDistribution],
    truths: &[&[[f64; 2]]],
) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Invalid("no scenes to evaluate".into()));
    }
    let n = predictions.len() as f64;
    let mut rmse_m = BTreeMap::new();
    let mut nll_nats = BTreeMap::new();
    for s in HORIZONS_S {
        let step = horizon_step(s);
        let (mut se, mut nll) = (0.0, 0.0);
        for (p, y) in predictions.iter().zip(truths) {
            let len = p.mean.len().min(p.std.len()).min(y.len());
            if step > len {
                return Err(Error::Invalid(format!(
                    "horizon {s} s needs step {step}, only {len} available"
                )));
            }
            let (m, sd, y) = (p.mean[step - 1], p.std[step - 1], y[step - 1]);
            se += (m[0] - y[0]).powi(2) + (m[1] - y[1]).powi(2);
            nll += gaussian_nll(y[0], m[0], sd[0]) + gaussian_nll(y[1], m[1], sd[1]);
        }
        rmse_m.insert(horizon_key(s), (se / n).sqrt());
        nll_nats.insert(horizon_key(s), nll / n);
    }
    Ok(EvalReport {
        rmse_m,
        nll_nats,
        n_scenes: predictions.len(),
        config: None,
    })
}

fn ego_last_two(scene: &TrajectoryScene) -> Result<([f64; 4], [f64; 4])> {
    let h = scene.ego_history();
    if h.len() < 2 {
        return Err(Error::EmptySequence("ego history"));
    }
    Ok((h[h.len() - 2], h[h.len() - 1]))
}

/// Extrapolates the last observed ego velocity (from the last two history
/// positions) over the future horizon, with a fixed 0.5 m spread.
pub fn cv_baseline(scene: &TrajectoryScene) -> Result<PredictiveDistribution> {
    let (prev, last) = ego_last_two(scene)?;
    let (dx, dy) = (last[0] - prev[0], last[1] - prev[1]);
    let mean = (1..=FUTURE_LEN)
        .map(|t| [last[0] + t as f64 * dx, last[1] + t as f64 * dy])
        .collect();
    Ok(PredictiveDistribution {
        mean,
        std: vec![[CV_SIGMA; 2]; FUTURE_LEN],
    })
}

/// The last observed ego position forever.
pub fn constant_position(scene: &TrajectoryScene) -> Result<PredictiveDistribution> {
    let (_, last) = ego_last_two(scene)?;
    Ok(PredictiveDistribution {
        mean: vec![[last[0], last[1]]; FUTURE_LEN],
        std: vec![[CV_SIGMA; 2]; FUTURE_LEN],
    })
}

/// Metrics of any per-scene predictor.
pub fn evaluate_with<F>(scenes: &[TrajectoryScene], mut predictor: F) -> Result<EvalReport>
where
    F: FnMut(&TrajectoryScene) -> Result<PredictiveDistribution>,
{
    let preds = scenes
        .iter()
        .map(&mut predictor)
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<&[[f64; 2]]> = scenes.iter().map(|s| s.future.as_slice()).collect();
    horizon_metrics(&preds, &truths)
}

/// Pooled predictive distributions of the checkpoint for every scene,
/// conditioned on its reference context with `samples` seeded latent draws.
pub fn predict_scenes<R: Real>(
    ckpt: &Checkpoint<R>,
    scenes: &[TrajectoryScene],
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictiveDistribution>> {
    let prepared = ckpt.prepare(scenes)?;
    let queries: Vec<&PreparedScene> = prepared.iter().collect();
    let noise = latent_noise(seed, samples, ckpt.config().latent);
    let predictor = ckpt.predictor()?;
    Ok(predictor
        .predict(&queries, &noise)?
        .into_iter()
        .map(|p| p.pooled)
        .collect())
}

/// Checkpoint metrics on scenes with known futures.
pub fn evaluate<R: Real>(
    ckpt: &Checkpoint<R>,
    scenes: &[TrajectoryScene],
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let preds = predict_scenes(ckpt, scenes, samples, seed)?;
    let truths: Vec<&[[f64; 2]]> = scenes.iter().map(|s| s.future.as_slice()).collect();
    let mut report = horizon_metrics(&preds, &truths)?;
    report.config = Some(ckpt.config());
    Ok(report)
}
