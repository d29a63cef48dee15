use rand::Rng;

use crate::error::Result;
use crate::grad::nn::{Init, Linear};
use crate::grad::{Bound, Graph, ParamStore, Var};
use crate::scalar::Scalar;

/// Regresses a continuous action directly from a hidden state (optionally
/// concatenated with proprioception): `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl RegressionHead {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        width: usize,
        action_dim: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = Linear::new(store, &format!("{name}.0"), input, width, Init::FanIn, rng);
        let out = Linear::new(
            store,
            &format!("{name}.1"),
            width,
            action_dim,
            Init::FanIn,
            rng,
        );
        Self { hidden, out }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.fan_in
    }

    pub fn action_dim(&self) -> usize {
        self.out.fan_out
    }

    /// `[rows, input] -> [rows, action_dim]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{AdamW, AdamWConfig, CosineSchedule, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64) -> (ParamStore<f64>, RegressionHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = RegressionHead::new(&mut store, "pred", 5, 16, 3, &mut rng);
        (store, h)
    }

    fn inputs(seed: u64, rows: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            5,
            (0..rows * 5).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let (mut store, h) = head(0);
        for id in store.ids().collect::<Vec<_>>() {
            for x in store.get_mut(id).data_mut() {
                *x = 0.0;
            }
        }
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(inputs(1, 4));
        let y = h.forward(&mut g, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fits_a_constant_action() {
        let (mut store, h) = head(2);
        let target = [0.3, -0.7, 0.05];
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let sched = CosineSchedule {
            peak_lr: 1e-2,
            total: 1500,
            warmup_frac: 0.1,
        };
        let mut loss = f64::INFINITY;
        for step in 0..1500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(inputs(100 + step as u64, 32));
            let y = h.forward(&mut g, &p, x).unwrap();
            let t = g.constant(Tensor::matrix(32, 3, target.repeat(32)).unwrap());
            let l = g.mse(y, t).unwrap();
            loss = g.value(l).item();
            let mut grads = g.backward(l).unwrap();
            let grads = store.collect_grads(&p, &mut grads);
            opt.step(&mut store, &grads, sched.lr(step));
        }
        assert!(loss < 1e-4, "loss {loss}");
    }
}
