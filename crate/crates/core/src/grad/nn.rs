//! Parameterised building blocks on top of the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn,
    Normal(f64),
    Zeros,
}

fn init_tensor<S: Scalar, R: Rng>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Tensor<S> {
    let data = match init {
        Init::FanIn => {
            let b = 1.0 / (rows.max(1) as f64).sqrt();
            let u = Uniform::new_inclusive(-b, b).expect("finite bound");
            (0..rows * cols).map(|_| S::of(u.sample(rng))).collect()
        }
        Init::Normal(std) => {
            let n = Normal::new(0.0, std).expect("finite std");
            (0..rows * cols).map(|_| S::of(n.sample(rng))).collect()
        }
        Init::Zeros => vec![S::zero(); rows * cols],
    };
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Registers a `[rows, cols]` parameter.
pub fn matrix_param<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    name: &str,
    rows: usize,
    cols: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    store.add(name, init_tensor(rows, cols, init, rng))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = matrix_param(store, &format!("{name}.w"), fan_in, fan_out, init, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        g.add_row(y, p.var(self.b))
    }
}

/// Fully connected stack with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width from input to output.
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        sizes: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[width], S::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}
