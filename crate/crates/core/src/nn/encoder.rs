use rand_chacha::ChaCha8Rng;

use super::attention::{cross_attention, self_attention, AttentionParams};
use super::{LayerNorm, Mlp};
use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Pre-norm transformer encoder layer:
/// `x + Attn(LN1(x))`, then `+ MLP(LN2(·))`.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

/// Which attention the layer runs.
#[derive(Clone, Copy, Debug)]
pub enum AttentionMode<'a, 't, S: Scalar> {
    SelfAttention,
    /// Cross-modal attention as receiver `index`; `queries[i]` come from
    /// [`EncoderLayerParams::cross_queries`] of modality `i`'s own layer.
    Cross {
        queries: &'a [Var<'t, S>],
        index: usize,
    },
}

impl EncoderLayerParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, mlp_ratio),
        })
    }

    /// Queries this layer exports to other modalities: its own `W_q` applied
    /// to its own normalized input.
    pub fn cross_queries<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.norm1.forward(g, x)?;
        self.attn.queries(g, h)
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        g: &Bound<'t, S>,
        x: Var<'t, S>,
        mode: AttentionMode<'_, 't, S>,
    ) -> Result<Var<'t, S>> {
        let h = self.norm1.forward(g, x)?;
        let a = match mode {
            AttentionMode::SelfAttention => self_attention(g, h, &self.attn)?,
            AttentionMode::Cross { queries, index } => {
                let k = self.attn.keys(g, h)?;
                let v = self.attn.values(g, h)?;
                cross_attention(g, queries, k, v, &self.attn, index)?
            }
        };
        let x = x.add(&a)?;
        let m = self.mlp.forward(g, self.norm2.forward(g, x)?)?;
        x.add(&m)
    }
}

pub fn encoder_layer<'t, S: Scalar>(
    g: &Bound<'t, S>,
    x: Var<'t, S>,
    p: &EncoderLayerParams,
    mode: AttentionMode<'_, 't, S>,
) -> Result<Var<'t, S>> {
    p.forward(g, x, mode)
}
