use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per second after resampling.
pub const RATE_HZ: u32 = 5;
/// 3 s of history at 5 Hz.
pub const HISTORY_LEN: usize = 15;
/// 5 s of future at 5 Hz.
pub const FUTURE_LEN: usize = 25;
pub const WINDOW_LEN: usize = HISTORY_LEN + FUTURE_LEN;

/// One prediction instance. `history` maps vehicle id to `[x, y, s, a]`
/// per step; `future` is the ego's `[x, y]` after the last history step.
/// x is lateral, y longitudinal, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScene {
    pub ego: u64,
    pub history: BTreeMap<u64, Vec<[f64; 4]>>,
    pub future: Vec<[f64; 2]>,
}

impl TrajectoryScene {
    pub fn history_len(&self) -> usize {
        self.history.get(&self.ego).map_or(0, Vec::len)
    }

    pub fn ego_history(&self) -> &[[f64; 4]] {
        self.history.get(&self.ego).map_or(&[], Vec::as_slice)
    }

    pub fn neighbor_count(&self) -> usize {
        self.history.len().saturating_sub(1)
    }

    /// Ego position at the last history step.
    pub fn anchor(&self) -> (f64, f64) {
        let last = self.ego_history().last().copied().unwrap_or_default();
        (last[0], last[1])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.history.contains_key(&self.ego) {
            return Err(Error::Format(format!("ego {} has no history", self.ego)));
        }
        for (id, states) in &self.history {
            if states.len() != HISTORY_LEN {
                return Err(Error::Format(format!(
                    "vehicle {id}: history has {} steps, expected {HISTORY_LEN}",
                    states.len()
                )));
            }
            if states.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("vehicle {id}: non-finite state")));
            }
        }
        if self.future.len() != FUTURE_LEN {
            return Err(Error::Format(format!(
                "future has {} steps, expected {FUTURE_LEN}",
                self.future.len()
            )));
        }
        Ok(())
    }
}

/// Translates every position so the ego sits at the origin at its last
/// history step. Returns the removed offset.
pub fn center_on_ego(scene: &TrajectoryScene) -> (TrajectoryScene, (f64, f64)) {
    let (ox, oy) = scene.anchor();
    let history = scene
        .history
        .iter()
        .map(|(&id, states)| {
            (
                id,
                states
                    .iter()
                    .map(|s| [s[0] - ox, s[1] - oy, s[2], s[3]])
                    .collect(),
            )
        })
        .collect();
    let future = scene
        .future
        .iter()
        .map(|p| [p[0] - ox, p[1] - oy])
        .collect();
    (
        TrajectoryScene {
            ego: scene.ego,
            history,
            future,
        },
        (ox, oy),
    )
}

/// The JSON scene archive written by `synth` and read by the other commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneArchive {
    pub rate_hz: u32,
    pub scenes: Vec<TrajectoryScene>,
}

impl SceneArchive {
    pub const FILE_NAME: &'static str = "scenes.json";

    pub fn new(scenes: Vec<TrajectoryScene>) -> Self {
        SceneArchive {
            rate_hz: RATE_HZ,
            scenes,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let archive: SceneArchive =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("scene archive: {e}")))?;
        if archive.rate_hz != RATE_HZ {
            return Err(Error::Format(format!(
                "archive rate {} Hz, expected {RATE_HZ}",
                archive.rate_hz
            )));
        }
        for (i, s) in archive.scenes.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::Format(format!("scene {i}: {e}")))?;
        }
        Ok(archive)
    }

    /// Writes `dir/scenes.json`, creating `dir` if needed.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE_NAME);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }

    /// Reads `path` directly, or `path/scenes.json` when `path` is a directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_json(&text)
    }
}
