//! Multi-head scaled dot-product attention, in self and cross-modal form.
//!
//! Cross-modal attention for modality `j` averages the attention weight
//! matrices obtained from every other modality's queries against `j`'s keys,
//! then applies the average to `j`'s values:
//!
//! ```text
//! a_ij = softmax(Q_i K_jᵀ / sqrt(d_h))
//! A_j  = (1/(M-1) · Σ_{i≠j} a_ij) · V_j
//! ```
//!
//! With one head `d_h = d`.

use rand_chacha::ChaCha8Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "token dimension {dim} not divisible by {heads} heads"
            )));
        }
        let mut proj = |n: &str| store.add(format!("{name}.{n}"), init::fan_in_uniform(rng, dim, &[dim, dim]));
        let w_q = proj("w_q");
        let w_k = proj("w_k");
        let w_v = proj("w_v");
        let out = Linear::new(store, rng, &format!("{name}.out"), dim, dim, true);
        Ok(Self {
            w_q,
            w_k,
            w_v,
            out,
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[B, S, d] → [B, H, S, d/H]`
    fn split_heads<'t, S: Scalar>(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::dim(
                "attention",
                format!("expected [B, S, {}] tokens, got {:?}", self.dim, s),
            ));
        }
        x.reshape(&[s[0], s[1], self.heads, self.head_dim()])?
            .transpose(&[0, 2, 1, 3])
    }

    /// `[B, H, S, d/H] → [B, S, d]`
    fn merge_heads<'t, S: Scalar>(&self, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let s = x.shape();
        x.transpose(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], self.dim])
    }

    fn project<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>, w: ParamId) -> Result<Var<'t, S>> {
        self.split_heads(x.matmul(&g.param(w))?)
    }

    /// Per-head queries `[B, H, S, d/H]` from (normalized) tokens.
    pub fn queries<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.project(g, x, self.w_q)
    }

    pub fn keys<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.project(g, x, self.w_k)
    }

    pub fn values<'t, S: Scalar>(&self, g: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        self.project(g, x, self.w_v)
    }

    /// Applies per-head weights to values, merges heads and projects out.
    pub fn attend<'t, S: Scalar>(
        &self,
        g: &Bound<'t, S>,
        weights: Var<'t, S>,
        values: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let mixed = weights.matmul(&values)?;
        self.out.forward(g, self.merge_heads(mixed)?)
    }
}

/// `softmax(q kᵀ / sqrt(d_h))` over the last axis; `d_h` is the last axis of `q`.
pub fn attention_weights<'t, S: Scalar>(q: Var<'t, S>, k: Var<'t, S>) -> Result<Var<'t, S>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs != ks {
        return Err(Error::dim(
            "attention_weights",
            format!("query {:?} and key {:?} differ", qs, ks),
        ));
    }
    let dh = *qs.last().ok_or_else(|| Error::dim("attention_weights", "scalar query"))?;
    let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
    q.matmul(&k.t()?)?.scale(scale).softmax_lastdim()
}

/// Cross-attention weights between the queries of modality `i` and the keys
/// of modality `j`.
pub fn cross_attention_weights<'t, S: Scalar>(q_i: Var<'t, S>, k_j: Var<'t, S>) -> Result<Var<'t, S>> {
    attention_weights(q_i, k_j)
}

/// Multi-head self-attention on `[B, S, d]` tokens.
pub fn self_attention<'t, S: Scalar>(g: &Bound<'t, S>, x: Var<'t, S>, p: &AttentionParams) -> Result<Var<'t, S>> {
    let q = p.queries(g, x)?;
    let k = p.keys(g, x)?;
    let v = p.values(g, x)?;
    p.attend(g, attention_weights(q, k)?, v)
}

/// The averaged cross-attention weights for receiver `j`, `[B, H, S, S]`.
pub fn averaged_cross_weights<'t, S: Scalar>(
    queries: &[Var<'t, S>],
    k_j: Var<'t, S>,
    j: usize,
) -> Result<Var<'t, S>> {
    let m = queries.len();
    if m < 2 {
        return Err(Error::Config("CAF requires ≥ 2 modalities".into()));
    }
    if j >= m {
        return Err(Error::Config(format!("modality index {j} out of range for {m} modalities")));
    }
    let mut sum: Option<Var<'t, S>> = None;
    for (i, q_i) in queries.iter().enumerate() {
        if i == j {
            continue;
        }
        let a = cross_attention_weights(*q_i, k_j)?;
        sum = Some(match sum {
            Some(s) => s.add(&a)?,
            None => a,
        });
    }
    let sum = sum.expect("m ≥ 2 leaves at least one sender");
    Ok(sum.scale(S::one() / S::from_usize(m - 1).unwrap()))
}

/// Cross-modal attention for modality `j`. `queries[i]` are the per-head
/// queries of modality `i`; the entry at `j` is not used.
pub fn cross_attention<'t, S: Scalar>(
    g: &Bound<'t, S>,
    queries: &[Var<'t, S>],
    k_j: Var<'t, S>,
    v_j: Var<'t, S>,
    p_j: &AttentionParams,
    j: usize,
) -> Result<Var<'t, S>> {
    let weights = averaged_cross_weights(queries, k_j, j)?;
    p_j.attend(g, weights, v_j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;

    fn setup(dim: usize, heads: usize) -> (ParamStore<f64>, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::new(&mut store, &mut rng, "attn", dim, heads).unwrap();
        (store, p)
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            AttentionParams::new(&mut store, &mut rng, "a", 6, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, p) = setup(4, 2);
        let tape = Tape::new();
        let g = store.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4], |i| i as f64 - 1.5));
        let q = p.queries(&g, x).unwrap();
        let k = p.keys(&g, x).unwrap();
        let w = attention_weights(q, k).unwrap().value();
        assert!(w.data().iter().all(|&v| v == 1.0));
        // output = V row projected by W_o (+ zero bias)
        let out = self_attention(&g, x, &p).unwrap().value();
        let v = x.matmul(&g.param(p.w_v)).unwrap();
        let want = v.matmul(&g.param(p.out.weight)).unwrap().value();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let (store, p) = setup(4, 2);
        let tape = Tape::new();
        let g = store.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4], |i| [0.3, -0.1, 0.8, 0.5][i % 4]));
        let out = self_attention(&g, x, &p).unwrap().value();
        for s in 1..3 {
            for c in 0..4 {
                assert_eq!(out.at(&[0, s, c]), out.at(&[0, 0, c]));
            }
        }
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::<f64>::zeros(&[2, 1, 5, 3]));
        let k = tape.constant(Tensor::from_fn(&[2, 1, 5, 3], |i| (i as f64).sin()));
        let w = cross_attention_weights(q, k).unwrap().value();
        assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn cross_attention_needs_two_modalities() {
        let (store, p) = setup(4, 1);
        let tape = Tape::new();
        let g = store.bind(&tape, false);
        let x = tape.constant(Tensor::from_fn(&[1, 2, 4], |i| i as f64));
        let q = p.queries(&g, x).unwrap();
        let k = p.keys(&g, x).unwrap();
        let v = p.values(&g, x).unwrap();
        let err = cross_attention(&g, &[q], k, v, &p, 0).unwrap_err();
        assert!(err.to_string().contains("CAF requires ≥ 2 modalities"));
    }

    #[test]
    fn two_modalities_use_the_single_other_sender_exactly() {
        let (store, p) = setup(4, 2);
        let tape = Tape::new();
        let g = store.bind(&tape, false);
        let x1 = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin()));
        let x2 = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.3).cos()));
        let q1 = p.queries(&g, x1).unwrap();
        let q2 = p.queries(&g, x2).unwrap();
        let k1 = p.keys(&g, x1).unwrap();
        let avg = averaged_cross_weights(&[q1, q2], k1, 0).unwrap().value();
        let pair = cross_attention_weights(q2, k1).unwrap().value();
        assert_eq!(avg, pair);
    }
}
