use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::init;

/// Affine map `x W + b` on row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.W"),
            init::uniform(rng, &[in_dim, out_dim], in_dim),
        )?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward<R: Real>(&self, g: &mut Tape<'_, R>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Stack of linear layers with ReLU between them and identity on the output.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub widths: Vec<usize>,
    pub layers: Vec<Linear>,
}

impl MlpBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid(format!(
                "{name}: MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.layer{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(MlpBlock {
            widths: widths.to_vec(),
            layers,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// `x: [batch, in] -> [batch, out]`.
    pub fn forward<R: Real>(&self, g: &mut Tape<'_, R>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_dim() {
            return Err(Error::Shape {
                kind: "mlp",
                shapes: vec![s.to_vec(), self.widths.clone()],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}
