use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam moments for one parameter. Shapes always equal the parameter's.
#[derive(Clone, Debug, PartialEq)]
pub struct Slots<R> {
    pub m: Tensor<R>,
    pub v: Tensor<R>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<R> {
    value: Tensor<R>,
    slots: Slots<R>,
}

/// Named trainable parameters with their optimizer slots, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    entries: BTreeMap<String, Entry<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    /// Adds a new parameter. Names are unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::domain("param_store", format!("duplicate parameter `{name}`")));
        }
        let slots = Slots {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            step: 0,
        };
        self.entries.insert(name, Entry { value, slots });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Replaces a parameter's values; the shape may not change.
    pub fn set(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::domain("param_store", format!("unknown parameter `{name}`")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_store",
                format!("`{name}` is {:?}, got {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn slots(&self, name: &str) -> Option<&Slots<R>> {
        self.entries.get(name).map(|e| &e.slots)
    }

    pub fn set_slots(&mut self, name: &str, slots: Slots<R>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::domain("param_store", format!("unknown parameter `{name}`")))?;
        if slots.m.shape() != e.value.shape() || slots.v.shape() != e.value.shape() {
            return Err(Error::shape("param_store", format!("slot shapes for `{name}`")));
        }
        e.slots = slots;
        Ok(())
    }

    /// Parameter value and its slots, mutably, for an optimizer update.
    pub fn entry_mut(&mut self, name: &str) -> Option<(&mut Tensor<R>, &mut Slots<R>)> {
        self.entries
            .get_mut(name)
            .map(|e| (&mut e.value, &mut e.slots))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.entries.iter().map(|(k, e)| (k, &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Same names and values at another precision; slots are reset.
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.value.cast())
                .expect("names are unique");
        }
        out
    }
}


/// How to create one parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Ones,
    Glorot { fan_in: usize, fan_out: usize },
    /// Normal with standard deviation `milli / 1000`.
    Normal { milli: u32 },
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Creates every spec missing from `store`, in order. Specs already present
/// (shared parameters) must agree on shape and are not re-drawn.
pub fn init_params<R: Real, G: rand::Rng + ?Sized>(
    store: &mut ParamStore<R>,
    specs: &[ParamSpec],
    rng: &mut G,
) -> Result<()> {
    for spec in specs {
        if let Some(have) = store.get(&spec.name) {
            if have.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "init_params",
                    format!("{} exists as {:?}, wanted {:?}", spec.name, have.shape(), spec.shape),
                ));
            }
            continue;
        }
        let value = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Ones => Tensor::ones(&spec.shape),
            Init::Glorot { fan_in, fan_out } => Tensor::glorot(&spec.shape, fan_in, fan_out, rng),
            Init::Normal { milli } => Tensor::normal(&spec.shape, milli as f64 / 1000.0, rng),
        };
        store.insert(spec.name.clone(), value)?;
    }
    Ok(())
}

/// Scalar count over distinct names.
pub fn count_params(specs: &[ParamSpec]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    specs.iter().filter(|s| seen.insert(s.name.as_str())).map(ParamSpec::numel).sum()
}
