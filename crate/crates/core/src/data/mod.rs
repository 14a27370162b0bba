//! Scene construction: track ingestion, resampling and windowing,
//! normalization, episode splits and the synthetic highway generator.

mod episode;
mod normalize;
mod scene;
mod synth;
mod tracks;
mod window;

pub use episode::{make_episode, make_episode_with, EpisodeSplit, MIN_EPISODE};
pub use normalize::{NormalizationStats, Normalizer, STD_FLOOR};
pub use scene::{
    center_on_ego, SceneArchive, TrajectoryScene, FUTURE_LEN, HISTORY_LEN, RATE_HZ, WINDOW_LEN,
};
pub use synth::{
    ego_track, lane_center, smoothstep, synth_scenes, track_from_positions, EgoMotion, JITTER_STD,
    LANES, LANE_WIDTH, SYNTH_FRAMES, SYNTH_HZ,
};
pub use tracks::{ingest_tracks, parse_tracks, write_tracks, RawTrack, TrackRecord, TRACKS_HEADER};
pub use window::{resample_and_window, EgoPolicy, WindowOptions, Windowed};
