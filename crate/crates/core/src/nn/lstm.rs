use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::init;

/// Single-layer LSTM returning the last hidden state.
///
/// Gate blocks are packed along the output axis in the order
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmEncoder {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl LstmEncoder {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = hidden_dim;
        let w_ih = store.add(
            format!("{name}.W_ih"),
            init::uniform(rng, &[input_dim, 4 * h], input_dim),
        )?;
        let w_hh = store.add(format!("{name}.W_hh"), init::uniform(rng, &[h, 4 * h], h))?;
        let mut b = vec![R::zero(); 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = R::one());
        let bias = store.add(format!("{name}.b"), Tensor::new(vec![4 * h], b)?)?;
        Ok(LstmEncoder {
            input_dim,
            hidden_dim,
            w_ih,
            w_hh,
            bias,
        })
    }

    /// Same as [`encode`](Self::encode) for a list of `[batch, in]` steps.
    pub fn encode_steps<R: Real>(&self, g: &mut Tape<'_, R>, steps: &[Var]) -> Result<Var> {
        if steps.is_empty() {
            return Err(Error::EmptySequence("lstm input"));
        }
        let s = g.shape(steps[0]).to_vec();
        let mut expanded = Vec::with_capacity(steps.len());
        for &x in steps {
            let shape = g.shape(x).to_vec();
            if shape != s || shape.len() != 2 {
                return Err(Error::Shape {
                    kind: "lstm",
                    shapes: vec![s, shape],
                });
            }
            expanded.push(g.reshape(x, &[1, s[0], s[1]])?);
        }
        let seq = g.concat(&expanded, 0)?;
        self.encode(g, seq)
    }

    /// `seq: [T, batch, in] -> [batch, H]`.
    pub fn encode<R: Real>(&self, g: &mut Tape<'_, R>, seq: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        if s.len() != 3 || s[2] != self.input_dim {
            return Err(Error::Shape {
                kind: "lstm",
                shapes: vec![s, vec![self.input_dim]],
            });
        }
        let (steps, batch) = (s[0], s[1]);
        if steps == 0 {
            return Err(Error::EmptySequence("lstm input"));
        }
        let h_dim = self.hidden_dim;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);

        let flat = g.reshape(seq, &[steps * batch, self.input_dim])?;
        let proj = g.matmul(flat, w_ih)?;
        let proj = g.add(proj, bias)?;

        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        for t in 0..steps {
            let mut z = g.slice(proj, 0, t * batch, (t + 1) * batch)?;
            if let Some(hp) = h {
                let rec = g.matmul(hp, w_hh)?;
                z = g.add(z, rec)?;
            }
            let i = g.slice(z, 1, 0, h_dim)?;
            let i = g.sigmoid(i)?;
            let f = g.slice(z, 1, h_dim, 2 * h_dim)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice(z, 1, 2 * h_dim, 3 * h_dim)?;
            let cand = g.tanh(cand)?;
            let o = g.slice(z, 1, 3 * h_dim, 4 * h_dim)?;
            let o = g.sigmoid(o)?;
            let ic = g.mul(i, cand)?;
            let c_new = match c {
                Some(cp) => {
                    let fc = g.mul(f, cp)?;
                    g.add(fc, ic)?
                }
                None => ic,
            };
            let tc = g.tanh(c_new)?;
            h = Some(g.mul(o, tc)?);
            c = Some(c_new);
        }
        Ok(h.expect("at least one step"))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::<f64>::new();
        let lstm =
            LstmEncoder::new(&mut store, "lstm", 3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = store.value(lstm.bias).data();
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert_eq!(&b[..4], &[0.0; 4]);
        assert_eq!(&b[8..], &[0.0; 8]);
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_state() {
        let mut store = ParamStore::<f64>::new();
        let lstm =
            LstmEncoder::new(&mut store, "lstm", 2, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in [lstm.w_ih, lstm.w_hh, lstm.bias] {
            store
                .value_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut g = Tape::with_params(&store, false);
        let seq = g.constant(Tensor::zeros(vec![4, 2, 2]));
        let h = lstm.encode(&mut g, seq).unwrap();
        assert_eq!(g.shape(h), &[2, 3]);
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_cell_formula() {
        let mut store = ParamStore::<f64>::new();
        let lstm =
            LstmEncoder::new(&mut store, "lstm", 2, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = [0.4, -0.7];
        let mut g = Tape::with_params(&store, false);
        let seq = g.constant(Tensor::from_f64(vec![1, 1, 2], &x).unwrap());
        let h = lstm.encode(&mut g, seq).unwrap();
        let w = store.value(lstm.w_ih).data();
        let b = store.value(lstm.bias).data();
        let pre = |k: usize| x[0] * w[k] + x[1] * w[4 + k] + b[k];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = sig(pre(0)) * pre(2).tanh();
        let expected = sig(pre(3)) * c.tanh();
        assert!((g.value(h).item() - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let lstm =
            LstmEncoder::new(&mut store, "lstm", 2, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Tape::with_params(&store, false);
        assert!(matches!(
            lstm.encode_steps(&mut g, &[]),
            Err(Error::EmptySequence(_))
        ));
        let seq = g.constant(Tensor::zeros(vec![1, 2, 5]));
        assert!(matches!(
            lstm.encode(&mut g, seq),
            Err(Error::Shape { kind: "lstm", .. })
        ));
    }
}
