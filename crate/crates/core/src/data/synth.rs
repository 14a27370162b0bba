//! Three-lane synthetic highway scenes.

use std::f64::consts::{PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::scene::HISTORY_LEN;
use crate::data::window::{resample_and_window, EgoPolicy, WindowOptions};
use crate::data::{RawTrack, TrackRecord, TrajectoryScene};
use crate::error::{Error, Result};

pub const LANE_WIDTH: f64 = 3.5;
pub const LANES: usize = 3;
pub const SYNTH_HZ: u32 = 25;
/// 8 s at 25 Hz: exactly one 15 + 25 step window after resampling.
pub const SYNTH_FRAMES: usize = 200;
/// Standard deviation of the lane-keeping lateral jitter, meters.
pub const JITTER_STD: f64 = 0.05;

const EGO_ID: u64 = 0;
/// Source frame of the last history step.
const ANCHOR_FRAME: usize = (HISTORY_LEN - 1) * (SYNTH_HZ as usize / 5);

pub fn lane_center(lane: usize) -> f64 {
    (lane as f64 + 0.5) * LANE_WIDTH
}

fn lane_of(x: f64) -> i64 {
    ((x / LANE_WIDTH).floor() as i64).clamp(0, LANES as i64 - 1) + 1
}

/// Smooth step `3u^2 - 2u^3` on `u = clamp(t, 0, 1)`.
pub fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    3.0 * u * u - 2.0 * u * u * u
}

/// Ego motion models. Longitudinal speed is constant in both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EgoMotion {
    /// Lateral position `x0 + amplitude * sin(2 pi f t + phase)`; a sinusoid
    /// with amplitude `sqrt(2) * 0.05` has standard deviation 0.05 m.
    LaneKeep {
        x0: f64,
        speed: f64,
        amplitude: f64,
        freq: f64,
        phase: f64,
    },
    /// Lateral position `x0 + delta * smoothstep((t - start) / duration)`.
    LaneChange {
        x0: f64,
        speed: f64,
        delta: f64,
        start: f64,
        duration: f64,
    },
}

impl EgoMotion {
    /// `(x, y)` at time `t` seconds.
    pub fn position(&self, t: f64) -> (f64, f64) {
        match *self {
            EgoMotion::LaneKeep {
                x0,
                speed,
                amplitude,
                freq,
                phase,
            } => (
                x0 + amplitude * (2.0 * PI * freq * t + phase).sin(),
                speed * t,
            ),
            EgoMotion::LaneChange {
                x0,
                speed,
                delta,
                start,
                duration,
            } => (x0 + delta * smoothstep((t - start) / duration), speed * t),
        }
    }
}

/// Builds a 25 Hz track from sampled positions. Velocity and acceleration
/// are central differences (one-sided at the ends).
pub fn track_from_positions(id: u64, positions: &[(f64, f64)]) -> RawTrack {
    let dt = 1.0 / SYNTH_HZ as f64;
    let diff = |v: &[f64]| -> Vec<f64> {
        let n = v.len();
        (0..n)
            .map(|i| match i {
                0 => (v[1] - v[0]) / dt,
                _ if i == n - 1 => (v[n - 1] - v[n - 2]) / dt,
                _ => (v[i + 1] - v[i - 1]) / (2.0 * dt),
            })
            .collect()
    };
    let xs: Vec<f64> = positions.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = positions.iter().map(|p| p.1).collect();
    let (vx, vy) = (diff(&xs), diff(&ys));
    let (ax, ay) = (diff(&vx), diff(&vy));
    let records = (0..positions.len())
        .map(|i| TrackRecord {
            frame: i as i64,
            x: xs[i],
            y: ys[i],
            vx: vx[i],
            vy: vy[i],
            ax: ax[i],
            ay: ay[i],
            lane: lane_of(xs[i]),
        })
        .collect();
    RawTrack { id, records }
}

/// The ego's 200-frame track for a motion model.
pub fn ego_track(motion: &EgoMotion) -> RawTrack {
    let positions: Vec<(f64, f64)> = (0..SYNTH_FRAMES)
        .map(|i| motion.position(i as f64 / SYNTH_HZ as f64))
        .collect();
    track_from_positions(EGO_ID, &positions)
}

fn sample_motion(rng: &mut impl Rng, lane_keep: bool) -> EgoMotion {
    let lane = rng.random_range(0..LANES);
    let speed = rng.random_range(25.0..=35.0);
    if lane_keep {
        EgoMotion::LaneKeep {
            x0: lane_center(lane),
            speed,
            amplitude: JITTER_STD * SQRT_2,
            freq: rng.random_range(0.1..=0.3),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    } else {
        let delta = match lane {
            0 => LANE_WIDTH,
            l if l == LANES - 1 => -LANE_WIDTH,
            _ if rng.random_bool(0.5) => LANE_WIDTH,
            _ => -LANE_WIDTH,
        };
        EgoMotion::LaneChange {
            x0: lane_center(lane),
            speed,
            delta,
            start: rng.random_range(0.5..=2.5),
            duration: rng.random_range(3.0..=5.0),
        }
    }
}

fn one_scene(rng: &mut impl Rng, lane_keep: bool) -> Result<TrajectoryScene> {
    let motion = sample_motion(rng, lane_keep);
    let ego = ego_track(&motion);
    let anchor = ego.records[ANCHOR_FRAME];
    let t_anchor = ANCHOR_FRAME as f64 / SYNTH_HZ as f64;
    // Lanes whose centre is close enough laterally to be in the grid.
    let lanes: Vec<usize> = (0..LANES)
        .filter(|&l| (lane_center(l) - anchor.x).abs() <= LANE_WIDTH + 0.5)
        .collect();
    let count = rng.random_range(2..=6);
    let mut tracks = vec![ego];
    for id in 1..=count as u64 {
        let lane = lanes[rng.random_range(0..lanes.len())];
        let x = lane_center(lane);
        let same_lane = (x - anchor.x).abs() < LANE_WIDTH / 2.0;
        let offset = loop {
            let o: f64 = rng.random_range(-28.0..=28.0);
            if !same_lane || o.abs() >= 8.0 {
                break o;
            }
        };
        let speed = rng.random_range(25.0..=35.0);
        let y_anchor = anchor.y + offset;
        let positions: Vec<(f64, f64)> = (0..SYNTH_FRAMES)
            .map(|i| {
                (
                    x,
                    y_anchor + speed * (i as f64 / SYNTH_HZ as f64 - t_anchor),
                )
            })
            .collect();
        tracks.push(track_from_positions(id, &positions));
    }
    let opts = WindowOptions {
        source_hz: SYNTH_HZ,
        ego: EgoPolicy::Ids(vec![EGO_ID]),
        ..Default::default()
    };
    let mut windowed = resample_and_window(&tracks, &opts)?;
    windowed
        .scenes
        .pop()
        .ok_or_else(|| Error::Invalid("synthetic ego produced no window".into()))
}

/// `count` scenes, exactly `round(mix * count)` of them lane-keeping, in a
/// seeded order.
pub fn synth_scenes(count: usize, seed: u64, mix: f64) -> Result<Vec<TrajectoryScene>> {
    if count == 0 {
        return Err(Error::Invalid("scene count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Invalid(format!(
            "lane-keep fraction {mix} is outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (mix * count as f64).round() as usize;
    let mut kinds: Vec<bool> = (0..count).map(|i| i < keep).collect();
    kinds.shuffle(&mut rng);
    kinds.into_iter().map(|k| one_scene(&mut rng, k)).collect()
}
