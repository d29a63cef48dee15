use rand::Rng;

use crate::error::Result;
use crate::grad::nn::{Init, Linear};
use crate::grad::{Bound, Graph, ParamStore, Var};
use crate::scalar::Scalar;

/// Logits over a discrete action set from a hidden state:
/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct CategoricalHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl CategoricalHead {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        width: usize,
        actions: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = Linear::new(store, &format!("{name}.0"), input, width, Init::FanIn, rng);
        let out = Linear::new(
            store,
            &format!("{name}.1"),
            width,
            actions,
            Init::FanIn,
            rng,
        );
        Self { hidden, out }
    }

    pub fn num_actions(&self) -> usize {
        self.out.fan_out
    }

    pub fn logits<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }
}

/// Row softmax with optional mask (masked entries get probability 0).
pub fn masked_softmax<S: Scalar>(logits: &[S], allowed: Option<&[bool]>) -> Vec<S> {
    let ok = |i: usize| allowed.is_none_or(|a| a[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| ok(i))
        .map(|(_, &x)| x)
        .fold(S::neg_infinity(), S::max);
    let mut p: Vec<S> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if ok(i) { (x - max).exp() } else { S::zero() })
        .collect();
    let z: S = p.iter().copied().sum();
    for x in &mut p {
        *x /= z;
    }
    p
}
