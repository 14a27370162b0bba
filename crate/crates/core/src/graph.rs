//! Ego-centred interaction graph with RBF edge weights.

use serde::{Deserialize, Serialize};

use crate::data::TrajectoryScene;
use crate::error::{Error, Result};

pub const METERS_PER_FOOT: f64 = 0.3048;

/// Rectangle centred on the ego vehicle. `length` runs along the road
/// (y axis), `width` across it (x axis). Meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub length: f64,
    pub width: f64,
}

impl Default for OccupancyGrid {
    /// 200 ft x 35 ft.
    fn default() -> Self {
        OccupancyGrid {
            length: 200.0 * METERS_PER_FOOT,
            width: 35.0 * METERS_PER_FOOT,
        }
    }
}

impl OccupancyGrid {
    pub fn new(length: f64, width: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0) {
            return Err(Error::Invalid(format!(
                "grid extents must be positive, got {length} x {width}"
            )));
        }
        Ok(OccupancyGrid { length, width })
    }

    /// RBF bandwidth: the largest distance from the grid centre to a point
    /// of the grid, i.e. the half-diagonal.
    pub fn bandwidth(&self) -> f64 {
        (self.length / 2.0).hypot(self.width / 2.0)
    }

    /// Whether an offset `(dx lateral, dy longitudinal)` from the ego lies inside.
    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        dy.abs() <= self.length / 2.0 && dx.abs() <= self.width / 2.0
    }
}

/// Symmetric `n x n` weights, node 0 is the ego vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    ids: Vec<u64>,
    weights: Vec<f64>,
    delta: f64,
}

impl AdjacencyMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.ids.len() + j]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Ego plus every vehicle whose position at `reference_time` falls inside
/// the grid around the ego. Ego first, the rest in id order.
pub fn select_grid_nodes(
    scene: &TrajectoryScene,
    reference_time: usize,
    grid: &OccupancyGrid,
) -> Result<Vec<u64>> {
    let ego = scene
        .history
        .get(&scene.ego)
        .ok_or_else(|| Error::Invalid(format!("scene has no history for ego {}", scene.ego)))?;
    let Some(e) = ego.get(reference_time) else {
        return Err(Error::Invalid(format!(
            "reference time {reference_time} outside a {}-step history",
            ego.len()
        )));
    };
    let mut nodes = vec![scene.ego];
    for (&id, states) in &scene.history {
        if id == scene.ego {
            continue;
        }
        if let Some(s) = states.get(reference_time) {
            if grid.contains(s[0] - e[0], s[1] - e[1]) {
                nodes.push(id);
            }
        }
    }
    Ok(nodes)
}

/// `A_ij = exp(-dist^2 / delta^2)` for pairs inside the grid, 0 otherwise.
/// `positions[i]` is `(x, y)` of `nodes[i]`; `nodes[0]` is the grid centre.
pub fn build_adjacency(
    nodes: &[u64],
    positions: &[(f64, f64)],
    grid: &OccupancyGrid,
) -> Result<AdjacencyMatrix> {
    if nodes.len() != positions.len() || nodes.is_empty() {
        return Err(Error::Invalid(format!(
            "{} nodes but {} positions",
            nodes.len(),
            positions.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = nodes.iter().find(|id| !seen.insert(**id)) {
        return Err(Error::Invalid(format!("duplicate node id {dup}")));
    }
    let n = nodes.len();
    let delta = grid.bandwidth();
    let (cx, cy) = positions[0];
    let inside: Vec<bool> = positions
        .iter()
        .map(|&(x, y)| grid.contains(x - cx, y - cy))
        .collect();
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            if !(inside[i] && inside[j]) {
                continue;
            }
            let (xi, yi) = positions[i];
            let (xj, yj) = positions[j];
            let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
            let w = (-d2 / (delta * delta)).exp();
            weights[i * n + j] = w;
            weights[j * n + i] = w;
        }
    }
    Ok(AdjacencyMatrix {
        ids: nodes.to_vec(),
        weights,
        delta,
    })
}

/// Graph of a scene at its last history step.
pub fn scene_graph(scene: &TrajectoryScene, grid: &OccupancyGrid) -> Result<AdjacencyMatrix> {
    let t = scene
        .history_len()
        .checked_sub(1)
        .ok_or(Error::EmptySequence("scene history"))?;
    let nodes = select_grid_nodes(scene, t, grid)?;
    let positions: Vec<(f64, f64)> = nodes
        .iter()
        .map(|id| {
            let s = scene.history[id][t];
            (s[0], s[1])
        })
        .collect();
    build_adjacency(&nodes, &positions, grid)
}
