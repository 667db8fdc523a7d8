//! Transformer building blocks over a bound [`ParamStore`](crate::params::ParamStore).

mod attention;
mod encoder;

pub use attention::{attention_weights, averaged_cross_weights, cross_attention, cross_attention_weights, self_attention, AttentionParams};
pub use encoder::{encoder_layer, AttentionMode, EncoderLayerParams};

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// `y = x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::fan_in_uniform(rng, fan_in, &[fan_in, fan_out]),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.matmul(&g.param(self.weight))?;
        match self.bias {
            Some(b) => {
                let shape = y.shape();
                let b = g.param(b).expand_leading(&shape[..shape.len() - 1]);
                y.add(&b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], S::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layernorm(&g.param(self.gamma), &g.param(self.beta), S::of(LAYERNORM_EPS))
    }
}

/// Two-layer perceptron `d → r·d → d` with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.fc1.forward(g, x)?.gelu();
        self.fc2.forward(g, h)
    }
}
