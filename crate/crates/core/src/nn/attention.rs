use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init, Linear};

/// Multi-head scaled dot-product attention from target queries to context
/// keys/values.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub values: Var,
    /// One `[k, m]` weight matrix per head.
    pub weights: Vec<Var>,
}

impl CrossAttention {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Invalid(format!(
                "{dim} is not divisible into {heads} heads"
            )));
        }
        let query = store.add(format!("{name}.Wq"), init::uniform(rng, &[dim, dim], dim))?;
        let key = store.add(format!("{name}.Wk"), init::uniform(rng, &[dim, dim], dim))?;
        let value = store.add(format!("{name}.Wv"), init::uniform(rng, &[dim, dim], dim))?;
        let output = Linear::new(store, &format!("{name}.out"), dim, dim, rng)?;
        Ok(CrossAttention {
            heads,
            dim,
            query,
            key,
            value,
            output,
        })
    }

    /// `queries: [k, d]`, `keys, values: [m, d]` -> `[k, d]`.
    pub fn attend<R: Real>(
        &self,
        g: &mut Tape<'_, R>,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<AttentionOutput> {
        let (sq, sk, sv) = (
            g.shape(queries).to_vec(),
            g.shape(keys).to_vec(),
            g.shape(values).to_vec(),
        );
        let ok = sq.len() == 2 && sk.len() == 2 && sv.len() == 2;
        if !ok || sq[1] != self.dim || sk[1] != self.dim || sv[1] != self.dim || sk[0] != sv[0] {
            return Err(Error::Shape {
                kind: "cross_attend",
                shapes: vec![sq, sk, sv],
            });
        }
        let head_dim = self.dim / self.heads;
        let wq = g.param(self.query);
        let wk = g.param(self.key);
        let wv = g.param(self.value);
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys, wk)?;
        let v = g.matmul(values, wv)?;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice(q, 1, lo, hi)?;
            let kh = g.slice(k, 1, lo, hi)?;
            let vh = g.slice(v, 1, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let w = g.softmax_rows(scores)?;
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        let values = self.output.forward(g, merged)?;
        Ok(AttentionOutput { values, weights })
    }
}
