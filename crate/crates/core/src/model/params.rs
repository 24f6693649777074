use std::collections::BTreeMap;

use boxseg_tensor::{Float, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    /// Plain normal with the given std.
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// False for buffers such as running statistics and fixed projections.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Float = f32> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters and buffers, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Float = f32> {
    map: BTreeMap<String, Param<T>>,
}

fn sample<R: Rng>(init: Init, rng: &mut R) -> f64 {
    match init {
        Init::TruncNormal(std) => loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                return z * std;
            }
        },
        Init::Normal(std) => {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        }
        Init::Zeros => 0.0,
        Init::Ones => 1.0,
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Initializes every spec in order from one random stream.
    pub fn init<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = Self::new();
        for s in specs {
            let t = Tensor::from_fn(s.shape.clone(), |_| T::lit(sample(s.init, rng)));
            store.insert(&s.name, t, s.trainable);
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) {
        self.map.insert(name.to_string(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).map(|p| &p.value).ok_or_else(|| CoreError::Checkpoint {
            msg: format!("missing parameter '{name}'"),
            missing: vec![name.to_string()],
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total element count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.map.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }

    /// Checks that the store holds exactly the given specs with matching
    /// shapes; the error lists missing names.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let missing: Vec<String> =
            specs.iter().filter(|s| !self.map.contains_key(&s.name)).map(|s| s.name.clone()).collect();
        if !missing.is_empty() {
            return Err(CoreError::Checkpoint {
                msg: format!("{} missing parameters: {}", missing.len(), missing.join(", ")),
                missing,
            });
        }
        for s in specs {
            let p = &self.map[&s.name];
            if p.value.shape() != s.shape.as_slice() {
                return Err(CoreError::Checkpoint {
                    msg: format!("parameter '{}' has shape {:?}, expected {:?}", s.name, p.value.shape(), s.shape),
                    missing: Vec::new(),
                });
            }
        }
        let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let unknown: Vec<&str> = self.map.keys().map(String::as_str).filter(|k| !known.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(CoreError::Checkpoint {
                msg: format!("unexpected parameters: {}", unknown.join(", ")),
                missing: Vec::new(),
            });
        }
        Ok(())
    }
}
