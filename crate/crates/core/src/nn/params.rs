//! Named parameter storage and seeded initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::catn::{to_any, AnyTensor};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors. Trainable entries carry
/// `requires_grad = true`; buffers such as running statistics do not.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.tensors[id.0].requires_grad)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[F]) {
        let t = &mut self.tensors[id.0];
        let n = t.len();
        let buf = t.grad.get_or_insert_with(|| vec![F::zero(); n]);
        for (a, &b) in buf.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn to_entries(&self) -> Vec<(String, AnyTensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), to_any(t)))
            .collect()
    }

    /// Overwrites values from named entries; every stored name must be
    /// present with a matching shape.
    pub fn load_entries(&mut self, entries: &[(String, AnyTensor)]) -> Result<()> {
        let by_name: HashMap<&str, &AnyTensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Input(format!("parameter {name} missing from file")))?;
            if src.shape() != t.shape() {
                return Err(Error::dim("load parameter", t.shape(), src.shape()));
            }
            let loaded = src.to::<F>();
            t.data_mut().copy_from_slice(loaded.data());
        }
        Ok(())
    }

    /// Same names and values in another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Seeded parameter factory. Values are drawn in 64-bit and rounded into the
/// store's precision, so 32- and 64-bit models built from one seed agree.
pub struct Init<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Scalar> Init<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    fn put(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<ParamId> {
        let mut t = Tensor::from_f64(shape, &data)?;
        t.requires_grad = trainable;
        self.store.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.put(name, shape, data, true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        self.put(name, shape, data, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.put(name, shape, vec![v; n], true)
    }

    /// Non-trainable state tensor.
    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.put(name, shape, vec![v; n], false)
    }
}
