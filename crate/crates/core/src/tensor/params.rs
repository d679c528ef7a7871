use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::{Array, Real};
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Named, ordered parameter table.
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Rc<Array<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new((**v).clone())).collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Array<T>) -> usize {
        if let Some(&id) = self.index.get(name) {
            self.values[id] = Rc::new(value);
            return id;
        }
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.index.insert(name.to_string(), self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> usize {
        let normal = Normal::new(0.0, std).expect("valid std");
        let value = Array::from_fn(shape, |_| T::lit(normal.sample(rng)));
        self.insert(name, value)
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], v: f64) -> usize {
        self.insert(name, Array::full(shape, T::lit(v)))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: usize) -> &Array<T> {
        &self.values[id]
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>> {
        self.id(name)
            .map(|id| self.value(id))
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn value_rc(&self, id: usize) -> Rc<Array<T>> {
        Rc::clone(&self.values[id])
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array<T> {
        Rc::make_mut(&mut self.values[id])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Copy in a different precision; names and order are preserved.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, v) in self.iter() {
            out.insert(name, v.cast());
        }
        out
    }

    /// True when both stores hold identical names, shapes and bit patterns.
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && a.to_f64_vec() == b.to_f64_vec())
    }
}
