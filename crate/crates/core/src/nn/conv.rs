use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{init, MlpBlock};

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1dLayer {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel;
        let weight = store.add(
            format!("{name}.W"),
            init::uniform(rng, &[out_channels, in_channels, kernel], fan_in),
        )?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![out_channels]))?;
        Ok(Conv1dLayer {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Tape<'_, R>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b))
    }
}

/// Three same-padded convolutions with ReLU, a mean over time, then four
/// fully connected layers.
#[derive(Debug, Clone)]
pub struct ConvMlpEncoder {
    pub convs: [Conv1dLayer; 3],
    pub head: MlpBlock,
}

impl ConvMlpEncoder {
    /// `channels` are the input channels; every later stage has width `dim`.
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        dim: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let convs = [
            Conv1dLayer::new(store, &format!("{name}.conv0"), channels, dim, kernel, rng)?,
            Conv1dLayer::new(store, &format!("{name}.conv1"), dim, dim, kernel, rng)?,
            Conv1dLayer::new(store, &format!("{name}.conv2"), dim, dim, kernel, rng)?,
        ];
        let head = MlpBlock::new(store, &format!("{name}.fc"), &[dim; 5], rng)?;
        Ok(ConvMlpEncoder { convs, head })
    }

    pub fn kernel(&self) -> usize {
        self.convs[0].kernel
    }

    /// `seq: [batch, channels, T] -> [batch, d]`.
    pub fn encode<R: Real>(&self, g: &mut Tape<'_, R>, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[1] != self.convs[0].in_channels {
            return Err(Error::Shape {
                kind: "conv_mlp",
                shapes: vec![s, vec![self.convs[0].in_channels]],
            });
        }
        if s[2] < self.kernel() {
            return Err(Error::Invalid(format!(
                "conv_mlp: sequence length {} is shorter than kernel {}",
                s[2],
                self.kernel()
            )));
        }
        let mut h = seq;
        for conv in &self.convs {
            h = conv.forward(g, h)?;
            h = g.relu(h)?;
        }
        let pooled = g.mean(h, Some(2))?;
        self.head.forward(g, pooled)
    }
}
