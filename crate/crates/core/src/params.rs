//! Named parameter storage, seeded initialization, and the per-pass graph that
//! binds parameters to tape leaves.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters in registration order. The order is part of the checkpoint
/// format and of the initialization stream.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar values, optionally counting only trainable ones.
    pub fn num_values(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Number of scalar values in parameters whose name starts with `prefix`.
    pub fn num_values_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.trainable == b.trainable && a.value.bitwise_eq(&b.value)
            })
    }
}

/// Seeded parameter initializer. ChaCha8 is a counter-based stream cipher
/// generator, so a seed gives the same stream on every platform.
pub struct Initializer {
    rng: ChaCha8Rng,
    proj_std: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed), proj_std: crate::nn::PROJ_STD }
    }

    pub fn with_proj_std(mut self, std: f64) -> Self {
        self.proj_std = std;
        self
    }

    /// Draw for a projection weight.
    pub fn projection(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, self.proj_std, &mut self.rng)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::randn(shape, std, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One forward pass: a tape plus the lazily created leaves for parameters.
pub struct Graph<'g, 'a> {
    tape: &'g mut Tape<'a>,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'g, 'a> Graph<'g, 'a> {
    /// With `track_grads == false` no parameter requires a gradient, which
    /// keeps inference passes free of backward bookkeeping.
    pub fn new(tape: &'g mut Tape<'a>, store: &'a ParamStore, track_grads: bool) -> Self {
        Graph { tape, store, vars: vec![None; store.len()], track_grads }
    }

    /// Uses caller-created leaves for the given parameters (gradient checking
    /// substitutes perturbed copies this way).
    pub fn with_vars(
        tape: &'g mut Tape<'a>,
        store: &'a ParamStore,
        bound: impl IntoIterator<Item = (ParamId, Var)>,
    ) -> Self {
        let mut g = Graph::new(tape, store, true);
        for (id, v) in bound {
            g.vars[id.0] = Some(v);
        }
        g
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = self.tape.leaf_ref(&p.value, self.track_grads && p.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Gradients of every parameter the backward pass reached.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| {
            v.and_then(|v| self.tape.grad(v)).map(|g| (ParamId(i), g))
        })
    }
}

impl<'a> Deref for Graph<'_, 'a> {
    type Target = Tape<'a>;

    fn deref(&self) -> &Tape<'a> {
        self.tape
    }
}

impl<'a> DerefMut for Graph<'_, 'a> {
    fn deref_mut(&mut self) -> &mut Tape<'a> {
        self.tape
    }
}
