use std::collections::HashMap;

use rand::Rng;

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<F>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "shape of `{name}` does not match data");
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, shape, value });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::zero(); n])
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::lit(v); n])
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| F::lit(rng.gen_range(-bound..=bound))).collect();
        self.add(name, shape, v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<F> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replace the value of `name`, checking shape.
    pub fn set(&mut self, name: &str, shape: &[usize], value: Vec<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let entry = &mut self.entries[id.0];
        if entry.shape != shape || entry.value.len() != value.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                shape, entry.shape
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Convert every tensor to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(
                e.name.clone(),
                e.shape.clone(),
                e.value.iter().map(|x| G::lit(x.to_f64().unwrap_or(f64::NAN))).collect(),
            );
        }
        out
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    pub values: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Gradients {
            values: store.entries().iter().map(|e| vec![F::zero(); e.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.values[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = *x * s);
        }
    }
}
