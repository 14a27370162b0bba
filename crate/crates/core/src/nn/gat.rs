//! Multi-head graph attention over explicit edge lists.
//!
//! For edge `i <- j` and head `k` the score is
//! `leaky_relu(a_k . [W_k s_i || W_k s_j])`, normalised with a softmax over
//! the edges entering `i`. Heads are averaged and passed through ReLU.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;
use crate::nn::init;

/// Directed edges `dst <- src` over `nodes` rows. Every edge of a node's
/// neighborhood, self-loop included, appears once.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub dst: Arc<[usize]>,
    pub src: Arc<[usize]>,
    pub nodes: usize,
}

impl EdgeIndex {
    pub fn new(dst: Vec<usize>, src: Vec<usize>, nodes: usize) -> Result<Self> {
        if dst.len() != src.len() || dst.is_empty() {
            return Err(Error::Invalid(
                "edge lists must be non-empty and equally long".into(),
            ));
        }
        if dst.iter().chain(&src).any(|&i| i >= nodes) {
            return Err(Error::Invalid(format!(
                "edge endpoint out of range for {nodes} nodes"
            )));
        }
        Ok(EdgeIndex {
            dst: dst.into(),
            src: src.into(),
            nodes,
        })
    }

    /// All pairs with positive adjacency weight.
    pub fn from_adjacency(adj: &AdjacencyMatrix) -> Self {
        let n = adj.len();
        let (mut dst, mut src) = (Vec::new(), Vec::new());
        for i in 0..n {
            for j in 0..n {
                if adj.get(i, j) > 0.0 {
                    dst.push(i);
                    src.push(j);
                }
            }
        }
        EdgeIndex {
            dst: dst.into(),
            src: src.into(),
            nodes: n,
        }
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GatLayer {
    /// `[d_in, heads * d_out]`, head `k` owns columns `k*d_out..(k+1)*d_out`.
    pub weight: ParamId,
    /// `[heads, 2 * d_out]`; the first half scores the receiving node.
    pub attn: ParamId,
    pub heads: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub slope: f64,
}

/// Output of a GAT layer plus per-edge, per-head attention `[E, heads]`.
#[derive(Debug, Clone, Copy)]
pub struct GatOutput {
    pub nodes: Var,
    pub attention: Var,
}

impl GatLayer {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Invalid("GAT needs at least one head".into()));
        }
        let weight = store.add(
            format!("{name}.W"),
            init::uniform(rng, &[in_dim, heads * out_dim], in_dim),
        )?;
        let attn = store.add(
            format!("{name}.a"),
            init::uniform(rng, &[heads, 2 * out_dim], 2 * out_dim),
        )?;
        Ok(GatLayer {
            weight,
            attn,
            heads,
            in_dim,
            out_dim,
            slope: LEAKY_SLOPE,
        })
    }

    /// `nodes: [N, d_in] -> [N, d_out]`. Rows with no incoming edge yield 0.
    pub fn forward_edges<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        nodes: Var,
        edges: &EdgeIndex,
    ) -> Result<GatOutput> {
        let s = g.shape(nodes).to_vec();
        if s.len() != 2 || s[1] != self.in_dim || s[0] != edges.nodes {
            return Err(Error::Shape {
                kind: "gat",
                shapes: vec![s, vec![edges.nodes, self.in_dim]],
            });
        }
        let (n, k, d) = (s[0], self.heads, self.out_dim);
        let e = edges.len();
        let w = g.param(self.weight);
        let a = g.param(self.attn);

        let wh = g.matmul(nodes, w)?;
        let a_dst = g.slice(a, 1, 0, d)?;
        let a_dst = g.reshape(a_dst, &[k * d])?;
        let a_src = g.slice(a, 1, d, 2 * d)?;
        let a_src = g.reshape(a_src, &[k * d])?;

        let score_dst = self.head_scores(g, wh, a_dst, n)?;
        let score_src = self.head_scores(g, wh, a_src, n)?;
        let sd = g.gather_rows(score_dst, edges.dst.clone())?;
        let ss = g.gather_rows(score_src, edges.src.clone())?;
        let logits = g.add(sd, ss)?;
        let logits = g.leaky_relu(logits, self.slope)?;

        // Softmax over each receiving node's incoming edges. The shift is a
        // constant per (node, head) and leaves the result unchanged.
        let shift = segment_max(g.value(logits), &edges.dst, n, k);
        let shift = g.constant(shift);
        let shifted = g.sub(logits, shift)?;
        let ex = g.exp(shifted)?;
        let denom = g.scatter_add_rows(ex, edges.dst.clone(), n)?;
        let denom = g.gather_rows(denom, edges.dst.clone())?;
        let alpha = g.div(ex, denom)?;

        let msg = g.gather_rows(wh, edges.src.clone())?;
        let msg = g.reshape(msg, &[e, k, d])?;
        let weights = g.reshape(alpha, &[e, k, 1])?;
        let msg = g.mul(msg, weights)?;
        let msg = g.mean(msg, Some(1))?;
        let agg = g.scatter_add_rows(msg, edges.dst.clone(), n)?;
        let out = g.relu(agg)?;
        Ok(GatOutput {
            nodes: out,
            attention: alpha,
        })
    }

    /// Per-head dot products `[N, heads]` of the projected rows with `vec`.
    fn head_scores<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        wh: Var,
        vec: Var,
        n: usize,
    ) -> Result<Var> {
        let prod = g.mul(wh, vec)?;
        let prod = g.reshape(prod, &[n, self.heads, self.out_dim])?;
        g.sum(prod, Some(2))
    }

    /// Dense single-graph entry point. Returns the node outputs and, per
    /// head, the `n x n` attention matrix (zero where adjacency is zero).
    pub fn forward<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        nodes: Var,
        adjacency: &AdjacencyMatrix,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let n = g.shape(nodes)[0];
        if adjacency.len() != n {
            return Err(Error::Shape {
                kind: "gat",
                shapes: vec![
                    g.shape(nodes).to_vec(),
                    vec![adjacency.len(), adjacency.len()],
                ],
            });
        }
        let edges = EdgeIndex::from_adjacency(adjacency);
        let out = self.forward_edges(g, nodes, &edges)?;
        let alpha = g.value(out.attention).to_f64();
        let mut dense = vec![vec![0.0; n * n]; self.heads];
        for (eidx, (&i, &j)) in edges.dst.iter().zip(edges.src.iter()).enumerate() {
            for (h, m) in dense.iter_mut().enumerate() {
                m[i * n + j] = alpha[eidx * self.heads + h];
            }
        }
        Ok((out.nodes, dense))
    }
}

fn segment_max<R: Real>(
    logits: &Tensor<R>,
    dst: &[usize],
    nodes: usize,
    heads: usize,
) -> Tensor<R> {
    let vals = logits.data();
    let mut best = vec![R::neg_infinity(); nodes * heads];
    for (e, &i) in dst.iter().enumerate() {
        for h in 0..heads {
            let v = vals[e * heads + h];
            if v > best[i * heads + h] {
                best[i * heads + h] = v;
            }
        }
    }
    let data = dst
        .iter()
        .flat_map(|&i| best[i * heads..(i + 1) * heads].iter().copied())
        .collect();
    Tensor::new(vec![dst.len(), heads], data).expect("edge count and heads are positive")
}
