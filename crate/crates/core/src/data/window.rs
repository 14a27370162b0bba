use std::collections::BTreeMap;

use crate::data::scene::{TrajectoryScene, FUTURE_LEN, HISTORY_LEN, RATE_HZ, WINDOW_LEN};
use crate::data::RawTrack;
use crate::error::{Error, Result};
use crate::graph::{select_grid_nodes, OccupancyGrid};

/// Which vehicles act as ego.
#[derive(Debug, Clone, Default)]
pub enum EgoPolicy {
    #[default]
    All,
    Ids(Vec<u64>),
}

impl EgoPolicy {
    fn includes(&self, id: u64) -> bool {
        match self {
            EgoPolicy::All => true,
            EgoPolicy::Ids(ids) => ids.contains(&id),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WindowOptions {
    pub source_hz: u32,
    pub ego: EgoPolicy,
    /// Anchor stride in resampled steps.
    pub stride: usize,
    pub grid: OccupancyGrid,
}

impl Default for WindowOptions {
    fn default() -> Self {
        WindowOptions {
            source_hz: 25,
            ego: EgoPolicy::All,
            stride: 1,
            grid: OccupancyGrid::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Windowed {
    pub scenes: Vec<TrajectoryScene>,
    /// Ego tracks shorter than one full window.
    pub skipped_short: usize,
}

/// Downsamples to 5 Hz and cuts every ego track into 15 + 25 step windows.
///
/// A resampled step covers `source_hz / 5` source frames and only complete
/// steps count, so a 200-frame 25 Hz track gives 40 steps (one window) and
/// a 199-frame track gives 39 (none). Neighbours are sampled at the ego's
/// frames, must exist for the whole history and lie in the grid at the
/// last history step.
pub fn resample_and_window(tracks: &[RawTrack], opts: &WindowOptions) -> Result<Windowed> {
    if opts.source_hz == 0 || !opts.source_hz.is_multiple_of(RATE_HZ) {
        return Err(Error::Invalid(format!(
            "source rate {} Hz is not a multiple of {RATE_HZ} Hz",
            opts.source_hz
        )));
    }
    if opts.stride == 0 {
        return Err(Error::Invalid("window stride must be positive".into()));
    }
    let step = (opts.source_hz / RATE_HZ) as i64;
    let mut out = Windowed::default();
    for ego in tracks.iter().filter(|t| opts.ego.includes(t.id)) {
        let samples = ego.records.len() / step as usize;
        if samples < WINDOW_LEN {
            out.skipped_short += 1;
            continue;
        }
        let f0 = ego.first_frame();
        let frame_of = |k: usize| f0 + k as i64 * step;
        for anchor in (0..=samples - WINDOW_LEN).step_by(opts.stride) {
            let mut history = BTreeMap::new();
            for track in tracks {
                let states: Option<Vec<[f64; 4]>> = (0..HISTORY_LEN)
                    .map(|i| track.at_frame(frame_of(anchor + i)).map(|r| r.state()))
                    .collect();
                if let Some(states) = states {
                    history.insert(track.id, states);
                }
            }
            let future = (HISTORY_LEN..WINDOW_LEN)
                .map(|i| {
                    let r = ego
                        .at_frame(frame_of(anchor + i))
                        .expect("ego covers its windows");
                    [r.x, r.y]
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(future.len(), FUTURE_LEN);
            let mut scene = TrajectoryScene {
                ego: ego.id,
                history,
                future,
            };
            let keep = select_grid_nodes(&scene, HISTORY_LEN - 1, &opts.grid)?;
            scene.history.retain(|id, _| keep.contains(id));
            out.scenes.push(scene);
        }
    }
    Ok(out)
}
