//! Named parameter storage and binding onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Flat, ordered set of learnable tensors. Model structs hold [`ParamId`]s
/// into a store; optimizers, checkpoints and gradient checks iterate it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.find(name).map(|id| self.get(id))
    }

    /// Overwrites a parameter by name; the shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim(
                "assign",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        self.entries
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Binds every parameter as a leaf of `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, requires_grad: bool) -> Bound<'t, S> {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
            tape,
        }
    }
}

/// Parameters of a store as tape variables, indexed by [`ParamId`].
pub struct Bound<'t, S: Scalar> {
    tape: &'t Tape<S>,
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    /// Wraps variables created elsewhere, in store order.
    pub fn from_vars(tape: &'t Tape<S>, vars: Vec<Var<'t, S>>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t, S> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    /// Gradient per parameter in store order; unreachable parameters get zeros.
    pub fn collect_grads(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

/// Seeded initializers.
pub mod init {
    use super::*;

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor<S> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| S::of(rng.random_range(-bound..bound)))
    }

    pub fn normal<S: Scalar>(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Tensor<S> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::of(z * std)
        })
    }
}
