use crate::autodiff::{GradMap, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 5e-4;

/// Moment accumulators aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(store: &ParamStore<R>, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        AdamState {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self) -> &[Tensor<R>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Tensor<R>] {
        &self.v
    }

    /// One bias-corrected update of every parameter. Nothing is modified
    /// unless every parameter has a gradient of its own shape.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &GradMap<R>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", &[g.shape(), p.value.shape()]));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::from_f64(self.beta1), R::from_f64(self.beta2));
        let (a1, a2) = (R::from_f64(1.0 - self.beta1), R::from_f64(1.0 - self.beta2));
        let (c1, c2) = (R::from_f64(c1), R::from_f64(c2));
        let (lr, eps) = (R::from_f64(self.lr), R::from_f64(self.eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).expect("checked above").data();
            let (m, v) = (self.m[id.index()].data_mut(), self.v[id.index()].data_mut());
            let theta = store.value_mut(id).data_mut();
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + a1 * g[i];
                v[i] = b2 * v[i] + a2 * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step<R: Real>(
    state: &mut AdamState<R>,
    store: &mut ParamStore<R>,
    grads: &GradMap<R>,
) -> Result<()> {
    state.step(store, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64([values.len()], values).unwrap())
            .unwrap();
        s
    }

    fn grads(store: &ParamStore<f64>, values: &[f64]) -> GradMap<f64> {
        GradMap::from_store(
            store,
            vec![Some(Tensor::from_f64([values.len()], values).unwrap())],
        )
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.3, -1.2]);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        for _ in 0..5 {
            let gm = grads(&s, &[0.0, 0.0]);
            adam.step(&mut s, &gm).unwrap();
        }
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[0.3, -1.2]);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(&[1.0]);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        let gm = grads(&s, &[2.0]);
        adam.step(&mut s, &gm).unwrap();
        let moved = 1.0 - s.value(s.id("w").unwrap()).data()[0];
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        assert!(
            (moved - DEFAULT_LR * 2.0 / (2.0 + ADAM_EPS)).abs() < 1e-15,
            "{moved}"
        );
    }

    #[test]
    fn matches_hand_rolled_second_step() {
        let mut s = store(&[0.0]);
        let mut adam = AdamState::new(&s, 0.1);
        let gm = grads(&s, &[1.0]);
        adam.step(&mut s, &gm).unwrap();
        let gm = grads(&s, &[-3.0]);
        adam.step(&mut s, &gm).unwrap();
        let m = 0.9 * 0.1 * 1.0 + 0.1 * -3.0;
        let v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0;
        let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expect = -0.1 * 1.0 / (1.0 + 1e-8) - step2;
        assert!((s.value(s.id("w").unwrap()).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_named_and_nothing_moves() {
        let mut s = store(&[1.0]);
        s.add("b", Tensor::from_f64([1], &[2.0]).unwrap()).unwrap();
        let g = GradMap::from_store(&s, vec![Some(Tensor::from_f64([1], &[1.0]).unwrap()), None]);
        let mut adam = AdamState::new(&s, DEFAULT_LR);
        let err = adam.step(&mut s, &g).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "b"));
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.0]);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store(&[0.5, -0.25, 2.0]);
            let mut adam = AdamState::new(&s, DEFAULT_LR);
            for k in 0..20 {
                let g: Vec<f64> = (0..3).map(|i| ((k * 3 + i) as f64).sin()).collect();
                let gm = grads(&s, &g);
                adam.step(&mut s, &gm).unwrap();
            }
            s.value(s.id("w").unwrap()).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn accumulators_follow_parameter_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![2, 3])).unwrap();
        s.add("b", Tensor::zeros(vec![4])).unwrap();
        let adam = AdamState::new(&s, DEFAULT_LR);
        let shapes: Vec<_> = adam
            .first_moment()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        assert_eq!(shapes, vec![vec![2, 3], vec![4]]);
        assert_eq!(adam.second_moment().len(), 2);
    }
}
