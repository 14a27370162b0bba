use serde::{Deserialize, Serialize};

use crate::data::TrajectoryScene;
use crate::error::{Error, Result};

/// Features whose spread is below this get unit scale.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics for `[x, y, s, a]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl NormalizationStats {
    /// Fits on every history state of every vehicle.
    pub fn fit(scenes: &[TrajectoryScene]) -> Result<Self> {
        if scenes.len() < 2 {
            return Err(Error::Invalid(format!(
                "normalization needs at least 2 scenes, got {}",
                scenes.len()
            )));
        }
        let states = || scenes.iter().flat_map(|s| s.history.values()).flatten();
        let count = states().count() as f64;
        let mut mean = [0.0; 4];
        for s in states() {
            for f in 0..4 {
                mean[f] += s[f];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = [0.0; 4];
        for s in states() {
            for f in 0..4 {
                var[f] += (s[f] - mean[f]).powi(2);
            }
        }
        let std = var.map(|v| {
            let sd = (v / count).sqrt();
            if sd < STD_FLOOR {
                1.0
            } else {
                sd
            }
        });
        Ok(NormalizationStats { mean, std })
    }

    pub fn apply_state(&self, s: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|f| (s[f] - self.mean[f]) / self.std[f])
    }

    pub fn invert_state(&self, s: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|f| s[f] * self.std[f] + self.mean[f])
    }

    /// Positions use the x and y statistics.
    pub fn apply_position(&self, p: [f64; 2]) -> [f64; 2] {
        std::array::from_fn(|f| (p[f] - self.mean[f]) / self.std[f])
    }

    pub fn invert_position(&self, p: [f64; 2]) -> [f64; 2] {
        std::array::from_fn(|f| p[f] * self.std[f] + self.mean[f])
    }

    pub fn apply(&self, scene: &TrajectoryScene) -> TrajectoryScene {
        TrajectoryScene {
            ego: scene.ego,
            history: scene
                .history
                .iter()
                .map(|(&id, st)| (id, st.iter().map(|&s| self.apply_state(s)).collect()))
                .collect(),
            future: scene
                .future
                .iter()
                .map(|&p| self.apply_position(p))
                .collect(),
        }
    }

    pub fn invert(&self, scene: &TrajectoryScene) -> TrajectoryScene {
        TrajectoryScene {
            ego: scene.ego,
            history: scene
                .history
                .iter()
                .map(|(&id, st)| (id, st.iter().map(|&s| self.invert_state(s)).collect()))
                .collect(),
            future: scene
                .future
                .iter()
                .map(|&p| self.invert_position(p))
                .collect(),
        }
    }
}

/// Fit-then-apply wrapper that refuses to apply unfitted statistics.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    stats: Option<NormalizationStats>,
}

impl Normalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fitted(stats: NormalizationStats) -> Self {
        Normalizer { stats: Some(stats) }
    }

    pub fn fit(&mut self, scenes: &[TrajectoryScene]) -> Result<NormalizationStats> {
        let stats = NormalizationStats::fit(scenes)?;
        self.stats = Some(stats);
        Ok(stats)
    }

    pub fn stats(&self) -> Result<&NormalizationStats> {
        self.stats.as_ref().ok_or(Error::NotFitted)
    }

    pub fn apply(&self, scenes: &[TrajectoryScene]) -> Result<Vec<TrajectoryScene>> {
        let stats = self.stats()?;
        Ok(scenes.iter().map(|s| stats.apply(s)).collect())
    }

    pub fn invert(&self, scenes: &[TrajectoryScene]) -> Result<Vec<TrajectoryScene>> {
        let stats = self.stats()?;
        Ok(scenes.iter().map(|s| stats.invert(s)).collect())
    }
}
