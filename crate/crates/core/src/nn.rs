//! Small fully connected networks used by coupling layers and critics.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    fn apply<B: Backend>(self, b: &mut B, x: &B::Value) -> B::Value {
        match self {
            Activation::Tanh => b.tanh(x),
            Activation::LeakyRelu(slope) => b.leaky_relu(x, slope),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers an `inputs x outputs` layer. Weights are drawn from
    /// `N(0, gain^2 / inputs)`; `zero` makes the layer output exactly zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero {
            vec![0.0; inputs * outputs]
        } else {
            let normal = Normal::new(0.0, gain / (inputs as f64).sqrt()).expect("finite std");
            (0..inputs * outputs).map(|_| normal.sample(rng)).collect()
        };
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::matrix(inputs, outputs, w).expect("consistent shape"),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Value) -> Result<B::Value> {
        let w = b.param(store, self.weight);
        let bias = b.param(store, self.bias);
        let h = b.matmul(x, &w)?;
        b.add(&h, &bias)
    }
}

/// Multi-layer perceptron with a shared hidden activation and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    /// With `zero_head` the final layer starts at exactly zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        zero_head: bool,
        rng: &mut R,
    ) -> Self {
        let gain = match activation {
            Activation::Tanh => 1.0,
            Activation::LeakyRelu(_) => std::f64::consts::SQRT_2,
        };
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    widths[i],
                    widths[i + 1],
                    gain,
                    last && zero_head,
                    rng,
                )
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Value) -> Result<B::Value> {
        let mut h = x.clone();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(b, store, &h)?;
            if i + 1 < n {
                h = self.activation.apply(b, &h);
            }
        }
        Ok(h)
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}
