use std::sync::Arc;

use crate::data::{center_on_ego, NormalizationStats, TrajectoryScene, FUTURE_LEN, HISTORY_LEN};
use crate::error::{Error, Result};
use crate::graph::{scene_graph, OccupancyGrid};
use crate::model::config::STATE_DIM;
use crate::nn::EdgeIndex;

/// A scene in model units: ego-centred, z-scored, grid-gated.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    /// Node vehicle ids, ego first.
    pub ids: Vec<u64>,
    /// `[T_N, n, 4]` normalised states, time-major.
    pub states: Vec<f64>,
    /// Directed neighbourhood edges `(dst, src)` in local node indices.
    pub edges: Vec<(usize, usize)>,
    /// `[T_F]` normalised future positions when known.
    pub future: Option<Vec<[f64; 2]>>,
    /// Ego position removed by centring, meters.
    pub offset: (f64, f64),
}

impl PreparedScene {
    pub fn new(
        scene: &TrajectoryScene,
        stats: &NormalizationStats,
        grid: &OccupancyGrid,
    ) -> Result<Self> {
        scene.validate()?;
        let (centred, offset) = center_on_ego(scene);
        let adj = scene_graph(&centred, grid)?;
        let ids = adj.ids().to_vec();
        let n = ids.len();
        let mut states = Vec::with_capacity(HISTORY_LEN * n * STATE_DIM);
        for t in 0..HISTORY_LEN {
            for id in &ids {
                states.extend(stats.apply_state(centred.history[id][t]));
            }
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if adj.get(i, j) > 0.0 {
                    edges.push((i, j));
                }
            }
        }
        let future = centred
            .future
            .iter()
            .map(|&p| stats.apply_position(p))
            .collect();
        Ok(PreparedScene {
            ids,
            states,
            edges,
            future: Some(future),
            offset,
        })
    }

    /// Same scene with the future hidden, as seen at inference.
    pub fn without_future(mut self) -> Self {
        self.future = None;
        self
    }

    pub fn nodes(&self) -> usize {
        self.ids.len()
    }

    pub fn require_future(&self) -> Result<&[[f64; 2]]> {
        self.future
            .as_deref()
            .ok_or_else(|| Error::Invalid("pair has no future".into()))
    }
}

pub fn prepare_scenes(
    scenes: &[TrajectoryScene],
    stats: &NormalizationStats,
    grid: &OccupancyGrid,
) -> Result<Vec<PreparedScene>> {
    scenes
        .iter()
        .map(|s| PreparedScene::new(s, stats, grid))
        .collect()
}

/// Context and target index sets into `pairs`.
#[derive(Debug, Clone)]
pub struct EpisodeBatch<'a> {
    pub pairs: Vec<&'a PreparedScene>,
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
}

impl<'a> EpisodeBatch<'a> {
    pub fn new(
        pairs: Vec<&'a PreparedScene>,
        context: Vec<usize>,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        if targets.is_empty() {
            return Err(Error::Invalid("episode has no targets".into()));
        }
        if let Some(&i) = context.iter().chain(&targets).find(|&&i| i >= pairs.len()) {
            return Err(Error::Invalid(format!(
                "pair index {i} out of range for {} pairs",
                pairs.len()
            )));
        }
        for &i in &context {
            pairs[i].require_future()?;
        }
        Ok(EpisodeBatch {
            pairs,
            context,
            targets,
        })
    }

    /// Context pairs first, then the queries as targets.
    pub fn inference(context: &[&'a PreparedScene], queries: &[&'a PreparedScene]) -> Result<Self> {
        let m = context.len();
        let pairs = context.iter().chain(queries).copied().collect();
        Self::new(pairs, (0..m).collect(), (m..m + queries.len()).collect())
    }
}

/// All timesteps of all pairs as one disconnected graph. Rows are ordered
/// by time, then pair, then node.
#[derive(Debug, Clone)]
pub(crate) struct BatchGraph {
    pub rows: usize,
    pub features: Vec<f64>,
    pub layer1: EdgeIndex,
    /// Only the edges entering ego rows; the second layer is read at the ego.
    pub layer2: EdgeIndex,
    /// Ego row of each `(t, pair)`, time-major.
    pub ego_rows: Arc<[usize]>,
}

impl BatchGraph {
    pub fn new(pairs: &[&PreparedScene]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Invalid("no pairs to encode".into()));
        }
        let per_step: usize = pairs.iter().map(|p| p.nodes()).sum();
        let rows = per_step * HISTORY_LEN;
        let mut features = Vec::with_capacity(rows * STATE_DIM);
        let (mut d1, mut s1, mut d2, mut s2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut ego_rows = Vec::with_capacity(HISTORY_LEN * pairs.len());
        let mut base = 0;
        for t in 0..HISTORY_LEN {
            for p in pairs {
                let n = p.nodes();
                features.extend_from_slice(&p.states[t * n * STATE_DIM..(t + 1) * n * STATE_DIM]);
                for &(i, j) in &p.edges {
                    d1.push(base + i);
                    s1.push(base + j);
                    if i == 0 {
                        d2.push(base);
                        s2.push(base + j);
                    }
                }
                ego_rows.push(base);
                base += n;
            }
        }
        Ok(BatchGraph {
            rows,
            features,
            layer1: EdgeIndex::new(d1, s1, rows)?,
            layer2: EdgeIndex::new(d2, s2, rows)?,
            ego_rows: ego_rows.into(),
        })
    }
}

/// Future positions as `[pairs, 2, T_F]` channel-major values.
pub(crate) fn futures_channel_major(pairs: &[&PreparedScene], idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len() * 2 * FUTURE_LEN);
    for &i in idx {
        let f = pairs[i].require_future()?;
        for c in 0..2 {
            out.extend(f.iter().map(|p| p[c]));
        }
    }
    Ok(out)
}

/// Future positions as `[pairs, T_F, 2]` values.
pub(crate) fn futures_time_major(pairs: &[&PreparedScene], idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len() * 2 * FUTURE_LEN);
    for &i in idx {
        out.extend(pairs[i].require_future()?.iter().flatten());
    }
    Ok(out)
}
