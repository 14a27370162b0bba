use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{ParamStore, Real, Tape};
use crate::data::{
    center_on_ego, make_episode_with, NormalizationStats, TrajectoryScene, MIN_EPISODE,
};
use crate::error::{Error, Result};
use crate::graph::OccupancyGrid;
use crate::model::{
    latent_noise, prepare_scenes, EpisodeBatch, Granp, ModelConfig, Predictor, PreparedScene,
};
use crate::train::adam::{AdamState, DEFAULT_LR};
use crate::train::checkpoint::{Checkpoint, TrainingSummary};
use crate::train::eval::gaussian_nll;

/// RNG streams derived from the run seed.
const STREAM_SPLIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_REFERENCE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of scenes held out for checkpoint selection.
    pub val_fraction: f64,
    /// Training pairs kept as the inference context.
    pub reference_size: usize,
    /// Latent draws per validation scene.
    pub val_samples: usize,
    /// Stop after this many epochs without a better validation NLL.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 200,
            lr: DEFAULT_LR,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.1,
            reference_size: 64,
            val_samples: 8,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size < MIN_EPISODE {
            return Err(Error::Invalid(format!(
                "batch size must be at least {MIN_EPISODE}"
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Invalid(
                "validation fraction must be in [0, 1)".into(),
            ));
        }
        if self.reference_size == 0 || self.val_samples == 0 {
            return Err(Error::Invalid(
                "reference size and validation samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Means over the epoch's batches, plus the held-out score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub recon_nll: f64,
    pub kl: f64,
    /// Mean per-step bivariate NLL of validation futures, nats, meters.
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded 1 - f / f split; at least one validation scene.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<DataSplit> {
    let n_val = ((n as f64 * val_fraction).round() as usize).max(1);
    if n < n_val + MIN_EPISODE {
        return Err(Error::Invalid(format!(
            "{n} scenes leave fewer than {MIN_EPISODE} for training after a {n_val}-scene validation split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SPLIT);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok(DataSplit { train, val })
}

/// Fixed-size chunks of a shuffled order; a remainder too small for an
/// episode joins the previous chunk.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch)
        .map(|s| s..(s + batch).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < MIN_EPISODE) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("more than one").end = last.end;
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput<R: Real> {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint<R>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub split: DataSplit,
}

/// Mean per-step NLL of the validation futures under the pooled
/// prediction from the reference context.
fn validation_nll<R: Real>(
    model: &Granp,
    store: &ParamStore<R>,
    stats: &NormalizationStats,
    reference: &[&PreparedScene],
    val: &[&PreparedScene],
    truths: &[&[[f64; 2]]],
    noise: &[Vec<f64>],
) -> Result<f64> {
    let predictor = Predictor::new(model, store, *stats, reference)?;
    let preds = predictor.predict(val, noise)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, y) in preds.iter().zip(truths) {
        for ((m, s), y) in p.pooled.mean.iter().zip(&p.pooled.std).zip(y.iter()) {
            total += gaussian_nll(y[0], m[0], s[0]) + gaussian_nll(y[1], m[1], s[1]);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// [`train_with`] without progress reporting.
pub fn train<R: Real>(config: &TrainConfig, scenes: &[TrajectoryScene]) -> Result<TrainOutput<R>> {
    train_with(config, scenes, |_| {})
}

/// Fits normalisation on the training split, then per epoch: seeded
/// shuffle, one episode per batch, negative ELBO, backward, Adam. The
/// returned checkpoint holds the epoch with the lowest validation NLL.
pub fn train_with<R: Real, F: FnMut(&EpochStats)>(
    config: &TrainConfig,
    scenes: &[TrajectoryScene],
    mut on_epoch: F,
) -> Result<TrainOutput<R>> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("training needs a non-empty dataset".into()));
    }
    let split = split_indices(scenes.len(), config.val_fraction, config.seed)?;
    let train_raw: Vec<TrajectoryScene> = split.train.iter().map(|&i| scenes[i].clone()).collect();
    let val_raw: Vec<TrajectoryScene> = split.val.iter().map(|&i| scenes[i].clone()).collect();
    let centred: Vec<TrajectoryScene> = train_raw.iter().map(|s| center_on_ego(s).0).collect();
    let stats = NormalizationStats::fit(&centred)?;
    let grid = OccupancyGrid::default();
    let train_set = prepare_scenes(&train_raw, &stats, &grid)?;
    let val_set = prepare_scenes(&val_raw, &stats, &grid)?;

    let mut ref_rng = ChaCha8Rng::seed_from_u64(config.seed);
    ref_rng.set_stream(STREAM_REFERENCE);
    let mut ref_pos: Vec<usize> = (0..train_set.len()).collect();
    ref_pos.shuffle(&mut ref_rng);
    ref_pos.truncate(config.reference_size);
    ref_pos.sort_unstable();
    let reference: Vec<&PreparedScene> = ref_pos.iter().map(|&i| &train_set[i]).collect();
    let val_refs: Vec<&PreparedScene> = val_set.iter().collect();
    let val_truths: Vec<&[[f64; 2]]> = val_raw.iter().map(|s| s.future.as_slice()).collect();

    let (model, mut store) = Granp::init::<R>(config.model, config.seed)?;
    let mut adam = AdamState::new(&store, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_BATCHES);
    let val_noise = latent_noise(config.seed, config.val_samples, config.model.latent);
    let latent = config.model.latent;

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore<R>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let ranges = batch_ranges(order.len(), config.batch_size);
        let (mut loss_sum, mut nll_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for (b, range) in ranges.iter().enumerate() {
            let pairs: Vec<&PreparedScene> = order[range.clone()]
                .iter()
                .map(|&i| &train_set[i])
                .collect();
            let episode = make_episode_with(pairs.len(), &mut rng)?;
            let noise: Vec<f64> = (0..latent)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let batch = EpisodeBatch::new(pairs, episode.context, episode.targets)?;
            let grads = {
                let mut g = Tape::with_params(&store, true);
                let out = model.elbo_loss(&mut g, &batch, &noise)?;
                let loss = g.value(out.loss).item().as_f64();
                if !loss.is_finite() {
                    return Err(Error::NanLoss {
                        epoch,
                        batch: b + 1,
                    });
                }
                loss_sum += loss;
                nll_sum += out.recon_nll;
                kl_sum += out.kl;
                g.backward(out.loss)?
            };
            adam.step(&mut store, &grads)?;
        }
        let nb = ranges.len() as f64;
        let val_nll = validation_nll(
            &model,
            &store,
            &stats,
            &reference,
            &val_refs,
            &val_truths,
            &val_noise,
        )?;
        let stats_row = EpochStats {
            epoch,
            loss: loss_sum / nb,
            recon_nll: nll_sum / nb,
            kl: kl_sum / nb,
            val_nll,
        };
        on_epoch(&stats_row);
        history.push(stats_row);
        if best.as_ref().is_none_or(|(_, v, _)| val_nll < *v) {
            best = Some((epoch, val_nll, store.clone()));
        }
        if let (Some(p), Some((e, _, _))) = (config.patience, best.as_ref()) {
            if epoch - e >= p {
                break;
            }
        }
    }

    let (best_epoch, best_val_nll, best_store) = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        model,
        store: best_store,
        stats,
        reference_ids: ref_pos.iter().map(|&i| split.train[i]).collect(),
        reference: ref_pos.iter().map(|&i| train_raw[i].clone()).collect(),
        training: Some(TrainingSummary {
            seed: config.seed,
            epochs_run: history.len(),
            best_epoch,
            best_val_nll,
            lr: config.lr,
            batch_size: config.batch_size,
        }),
    };
    Ok(TrainOutput {
        checkpoint,
        history,
        best_epoch,
        split,
    })
}

/// `epoch,loss,recon_nll,kl`, one row per epoch.
pub fn loss_history_csv(history: &[EpochStats]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Format(format!("loss history: {e}"));
    w.write_record(["epoch", "loss", "recon_nll", "kl"])
        .map_err(io)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.loss.to_string(),
            h.recon_nll.to_string(),
            h.kl.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("loss history: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of numbers is utf-8"))
}

pub fn write_loss_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    std::fs::write(path, loss_history_csv(history)?).map_err(|e| Error::io(path, e))
}
