//! Named parameter storage and the per-evaluation binding of parameters to
//! tape leaves.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{finite_difference_check_coords, FnObjective, GradCheckReport, Grads, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter list keyed by stable path names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::dim(format!(
                "flat vector has {} entries, store holds {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut hits = 0;
        for (name, v) in self.names.iter().zip(&mut self.values) {
            if name.starts_with(prefix) {
                v.data_mut().fill(0.0);
                hits += 1;
            }
        }
        hits
    }
}

/// Registers parameters under a dotted path prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let path = self.path(name);
        self.store.insert(path, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.tensor(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, value))
    }
}

/// One forward evaluation: a fresh tape plus lazily bound parameters.
pub struct Forward<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Forward<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Evaluation without gradient bookkeeping.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self {
            g: Graph::inference(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Backward from `output`, returning one gradient tensor per parameter
    /// (zeros for parameters the output does not touch).
    pub fn param_grads(&self, output: Var) -> Result<Vec<Tensor>> {
        let mut grads: Grads = self.g.backward(output)?;
        Ok(self
            .store
            .ids()
            .map(|id| {
                let shape = self.store.get(id).shape();
                match self.bound[id.0].and_then(|v| grads.take(v)) {
                    Some(data) => Tensor::new(shape.to_vec(), data).expect("matching extent"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }
}

fn flatten_grads(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

/// Central-difference check of every parameter in `store` for the scalar
/// built by `body`. With `coords = None` every scalar is probed.
pub fn check_store_gradients(
    store: &ParamStore,
    h: f64,
    coords: Option<&[usize]>,
    body: impl Fn(&mut Forward<'_>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let theta = store.flatten();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let probe = std::cell::RefCell::new(store.clone());
    let mut objective = FnObjective {
        value: |t: &[f64]| {
            let mut s = probe.borrow_mut();
            s.assign_flat(t)?;
            let mut f = Forward::new(&s);
            let out = body(&mut f)?;
            let v = f.value(out);
            if v.len() != 1 {
                return Err(Error::dim("gradient check needs a scalar objective"));
            }
            Ok(v.data()[0])
        },
        gradient: |t: &[f64]| {
            let mut s = probe.borrow_mut();
            s.assign_flat(t)?;
            let mut f = Forward::new(&s);
            let out = body(&mut f)?;
            Ok(flatten_grads(&f.param_grads(out)?))
        },
    };
    finite_difference_check_coords(&mut objective, &theta, h, coords)
}
