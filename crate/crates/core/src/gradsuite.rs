//! The 64-bit finite-difference suite: every tape primitive, every layer,
//! and the full negative ELBO on a two-scene micro-batch.
//!
//! Each check reads its output through a fixed random linear functional so
//! that no gradient vanishes by symmetry (a plain sum of softmax rows, for
//! instance, is constant).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{
    grad_check, Attrs, GradCheckOptions, GradCheckRow, ParamStore, PrimitiveKind, Tape, Tensor,
    Var, REL_TOL,
};
use crate::data::{center_on_ego, synth_scenes, NormalizationStats, TrajectoryScene};
use crate::error::Result;
use crate::graph::OccupancyGrid;
use crate::model::{latent_noise, prepare_scenes, EpisodeBatch, Granp, ModelConfig};
use crate::nn::{
    ConvMlpEncoder, CrossAttention, EdgeIndex, GatLayer, Linear, LstmEncoder, MlpBlock,
};

/// Random inputs drawn per primitive.
pub const PRIMITIVE_SEEDS: u64 = 10;
/// Random initialisations per layer.
pub const LAYER_SEEDS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Primitive,
    Layer,
    Elbo,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Primitive => "primitive",
            Group::Layer => "layer",
            Group::Elbo => "elbo",
        }
    }
}

/// Worst case of one suite entry over all its parameters and seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub group: Group,
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Failures not accounted for by difference-quotient roundoff or a
    /// kink inside the step; see [`GradCheckRow::unexplained`].
    pub unexplained: usize,
}

impl SuiteRow {
    fn new(group: Group, name: &str) -> Self {
        SuiteRow {
            group,
            name: name.to_string(),
            entries: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            unexplained: 0,
        }
    }

    fn absorb(&mut self, rows: &[GradCheckRow]) {
        for r in rows {
            self.entries += r.entries;
            self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
            self.max_abs_err = self.max_abs_err.max(r.max_abs_err);
            self.unexplained += r.unexplained;
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Magnitudes in `[lo, hi]` with random signs, keeping clear of zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `sum(w * y)` for a fixed random `w` shaped like `y`.
fn readout(g: &mut Tape<'_, f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p, None)
}

fn weights_like(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape, -1.0, 1.0)
}

fn indices(v: &[usize]) -> Arc<[usize]> {
    v.iter().copied().collect()
}

/// Inputs and attributes exercising one primitive.
fn primitive_case(kind: PrimitiveKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Attrs) {
    use PrimitiveKind as P;
    let free = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    match kind {
        P::Add => (vec![free(rng, &[3, 4]), free(rng, &[4])], Attrs::default()),
        P::Sub => (
            vec![free(rng, &[3, 4]), free(rng, &[3, 1])],
            Attrs::default(),
        ),
        P::Mul => (
            vec![free(rng, &[3, 4]), free(rng, &[3, 4])],
            Attrs::default(),
        ),
        P::Div => (
            vec![free(rng, &[3, 4]), signed(rng, &[3, 4], 0.5, 1.5)],
            Attrs::default(),
        ),
        P::MatMul => (
            vec![free(rng, &[3, 5]), free(rng, &[5, 4])],
            Attrs::default(),
        ),
        P::Conv1d => (
            vec![
                free(rng, &[2, 3, 7]),
                free(rng, &[4, 3, 3]),
                free(rng, &[4]),
            ],
            Attrs::default(),
        ),
        P::Concat => (vec![free(rng, &[2, 3]), free(rng, &[2, 2])], Attrs::axis(1)),
        P::Slice => (vec![free(rng, &[4, 5])], Attrs::range(1, 1, 4)),
        P::Reshape => (vec![free(rng, &[3, 4])], Attrs::shape(vec![2, 6])),
        P::Transpose => (
            vec![free(rng, &[2, 3, 4])],
            Attrs {
                perm: Some(vec![2, 0, 1]),
                ..Default::default()
            },
        ),
        P::Sum => (vec![free(rng, &[3, 4])], Attrs::axis(1)),
        P::Mean => (vec![free(rng, &[3, 4])], Attrs::axis(0)),
        P::Exp => (vec![free(rng, &[3, 4])], Attrs::default()),
        P::Log => (vec![uniform(rng, &[3, 4], 0.5, 2.0)], Attrs::default()),
        P::Sigmoid | P::Tanh | P::Softplus | P::SoftmaxRows => {
            (vec![uniform(rng, &[3, 5], -2.0, 2.0)], Attrs::default())
        }
        P::Relu => (vec![signed(rng, &[3, 4], 0.1, 1.0)], Attrs::default()),
        P::LeakyRelu => (
            vec![signed(rng, &[3, 4], 0.1, 1.0)],
            Attrs {
                slope: Some(0.2),
                ..Default::default()
            },
        ),
        P::GatherRows => (
            vec![free(rng, &[4, 3])],
            Attrs {
                indices: Some(indices(&[2, 0, 2, 3, 1])),
                ..Default::default()
            },
        ),
        P::ScatterAddRows => (
            vec![free(rng, &[5, 3])],
            Attrs {
                indices: Some(indices(&[0, 2, 0, 1, 2])),
                rows: Some(3),
                ..Default::default()
            },
        ),
    }
}

/// One row per primitive, worst case over [`PRIMITIVE_SEEDS`] inputs.
pub fn check_primitives(options: GradCheckOptions) -> Result<Vec<SuiteRow>> {
    let mut out = Vec::with_capacity(PrimitiveKind::ALL.len());
    for (k, &kind) in PrimitiveKind::ALL.iter().enumerate() {
        let mut row = SuiteRow::new(Group::Primitive, kind.name());
        for seed in 0..PRIMITIVE_SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * k as u64 + seed);
            let (inputs, attrs) = primitive_case(kind, &mut rng);
            let mut store = ParamStore::new();
            let ids = inputs
                .into_iter()
                .enumerate()
                .map(|(i, t)| store.add(format!("x{i}"), t))
                .collect::<Result<Vec<_>>>()?;
            let shape = {
                let mut g = Tape::with_params(&store, false);
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let y = g.forward_op(kind, &vars, &attrs)?;
                g.shape(y).to_vec()
            };
            let w = weights_like(&mut rng, &shape);
            let rows = grad_check(&mut store, options, |g| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let y = g.forward_op(kind, &vars, &attrs)?;
                readout(g, y, &w)
            })?;
            row.absorb(&rows);
        }
        out.push(row);
    }
    Ok(out)
}

fn layer_row<F>(name: &str, options: GradCheckOptions, mut case: F) -> Result<SuiteRow>
where
    F: FnMut(&mut ChaCha8Rng, GradCheckOptions) -> Result<Vec<GradCheckRow>>,
{
    let mut row = SuiteRow::new(Group::Layer, name);
    for seed in 0..LAYER_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(7919 + seed);
        row.absorb(&case(&mut rng, options)?);
    }
    Ok(row)
}

/// Every edge of a complete graph on `n` nodes, self-loops included.
fn complete_edges(n: usize) -> Result<EdgeIndex> {
    let (dst, src) = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).unzip();
    EdgeIndex::new(dst, src, n)
}

/// One row per layer type, worst case over [`LAYER_SEEDS`] initialisations.
pub fn check_layers(options: GradCheckOptions) -> Result<Vec<SuiteRow>> {
    let linear = layer_row("linear", options, |rng, opt| {
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "linear", 4, 3, rng)?;
        let x = uniform(rng, &[5, 4], -1.0, 1.0);
        let w = weights_like(rng, &[5, 3]);
        grad_check(&mut store, opt, |g| {
            let x = g.constant(x.clone());
            let y = layer.forward(g, x)?;
            readout(g, y, &w)
        })
    })?;
    let mlp = layer_row("mlp", options, |rng, opt| {
        let mut store = ParamStore::new();
        let mlp = MlpBlock::new(&mut store, "mlp", &[4, 6, 3], rng)?;
        let x = uniform(rng, &[5, 4], -1.0, 1.0);
        let w = weights_like(rng, &[5, 3]);
        grad_check(&mut store, opt, |g| {
            let x = g.constant(x.clone());
            let y = mlp.forward(g, x)?;
            readout(g, y, &w)
        })
    })?;
    let lstm = layer_row("lstm", options, |rng, opt| {
        let mut store = ParamStore::new();
        let lstm = LstmEncoder::new(&mut store, "lstm", 3, 4, rng)?;
        let seq = uniform(rng, &[5, 2, 3], -1.0, 1.0);
        let w = weights_like(rng, &[2, 4]);
        grad_check(&mut store, opt, |g| {
            let s = g.constant(seq.clone());
            let h = lstm.encode(g, s)?;
            readout(g, h, &w)
        })
    })?;
    let conv = layer_row("conv_mlp", options, |rng, opt| {
        let mut store = ParamStore::new();
        let enc = ConvMlpEncoder::new(&mut store, "conv", 3, 4, 3, rng)?;
        let x = uniform(rng, &[2, 3, 6], -1.0, 1.0);
        let w = weights_like(rng, &[2, 4]);
        grad_check(&mut store, opt, |g| {
            let x = g.constant(x.clone());
            let y = enc.encode(g, x)?;
            readout(g, y, &w)
        })
    })?;
    let gat = layer_row("gat", options, |rng, opt| {
        let mut store = ParamStore::new();
        let gat = GatLayer::new(&mut store, "gat", 3, 4, 2, rng)?;
        let edges = complete_edges(5)?;
        let x = uniform(rng, &[5, 3], -1.0, 1.0);
        let w = weights_like(rng, &[5, 4]);
        grad_check(&mut store, opt, |g| {
            let x = g.constant(x.clone());
            let y = gat.forward_edges(g, x, &edges)?;
            readout(g, y.nodes, &w)
        })
    })?;
    let cross = layer_row("cross_attention", options, |rng, opt| {
        let mut store = ParamStore::new();
        let att = CrossAttention::new(&mut store, "cross", 4, 2, rng)?;
        let q = uniform(rng, &[3, 4], -1.0, 1.0);
        let k = uniform(rng, &[5, 4], -1.0, 1.0);
        let v = uniform(rng, &[5, 4], -1.0, 1.0);
        let w = weights_like(rng, &[3, 4]);
        grad_check(&mut store, opt, |g| {
            let (q, k, v) = (
                g.constant(q.clone()),
                g.constant(k.clone()),
                g.constant(v.clone()),
            );
            let out = att.attend(g, q, k, v)?;
            readout(g, out.values, &w)
        })
    })?;
    Ok(vec![linear, mlp, lstm, conv, gat, cross])
}

/// Negative ELBO over all model parameters on two synthetic scenes, one
/// of them the context.
pub fn check_elbo(options: GradCheckOptions, seed: u64) -> Result<SuiteRow> {
    let raw = synth_scenes(2, seed, 0.5)?;
    let centred: Vec<TrajectoryScene> = raw.iter().map(|s| center_on_ego(s).0).collect();
    let stats = NormalizationStats::fit(&centred)?;
    let scenes = prepare_scenes(&raw, &stats, &OccupancyGrid::default())?;
    let config = ModelConfig::new(16, 2)?;
    let (model, mut store) = Granp::init::<f64>(config, seed)?;
    let noise = latent_noise(seed, 1, config.latent).remove(0);
    let rows = grad_check(&mut store, options, |g| {
        let batch = EpisodeBatch::new(scenes.iter().collect(), vec![1], vec![0, 1])?;
        Ok(model.elbo_loss(g, &batch, &noise)?.loss)
    })?;
    let mut row = SuiteRow::new(Group::Elbo, "elbo_micro_batch");
    row.absorb(&rows);
    Ok(row)
}

/// The whole suite at the default step.
pub fn run_suite() -> Result<Vec<SuiteRow>> {
    let options = GradCheckOptions::default();
    let mut rows = check_primitives(options)?;
    rows.extend(check_layers(options)?);
    rows.push(check_elbo(options, 13)?);
    Ok(rows)
}

/// Fixed-width table, one line per row.
pub fn format_table(rows: &[SuiteRow]) -> String {
    let mut s = format!(
        "{:<10} {:<18} {:>7} {:>12} {:>12} {:>11}  {}\n",
        "group", "name", "entries", "max_rel_err", "max_abs_err", "unexplained", "status"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<10} {:<18} {:>7} {:>12.3e} {:>12.3e} {:>11}  {}\n",
            r.group.name(),
            r.name,
            r.entries,
            r.max_rel_err,
            r.max_abs_err,
            r.unexplained,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
