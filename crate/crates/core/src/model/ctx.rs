use std::cell::RefCell;
use std::collections::BTreeMap;

use boxseg_tensor::{BatchStats, Float, Gradients, Graph, Tensor, Var};

use super::params::ParamStore;
use crate::error::Result;

/// Forward-pass context: the tape, the parameter store and the leaf
/// variables created for parameters so far.
pub struct Ctx<'a, T: Float = f32> {
    pub g: &'a Graph<T>,
    pub store: &'a ParamStore<T>,
    /// Train mode: batch norm uses batch statistics.
    pub train: bool,
    vars: RefCell<BTreeMap<String, Var<T>>>,
    filter: Box<dyn Fn(&str) -> bool + 'a>,
    bn_stats: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(g: &'a Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            g,
            store,
            train,
            vars: RefCell::new(BTreeMap::new()),
            filter: Box::new(|_| true),
            bn_stats: RefCell::new(Vec::new()),
        }
    }

    /// Restricts gradient tracking to parameters whose name passes `f`.
    pub fn with_filter(mut self, f: impl Fn(&str) -> bool + 'a) -> Self {
        self.filter = Box::new(f);
        self
    }

    /// Leaf for a parameter, created on first use.
    pub fn p(&self, name: &str) -> Result<Var<T>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let param = self.store.get(name).ok_or_else(|| crate::error::CoreError::Checkpoint {
            msg: format!("missing parameter '{name}'"),
            missing: vec![name.to_string()],
        })?;
        let track = param.trainable && (self.filter)(name);
        let v = self.g.leaf(param.value.clone(), track);
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Raw tensor of a parameter or buffer, outside the tape.
    pub fn tensor(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.store.tensor(name)
    }

    pub(crate) fn record_bn(&self, name: &str, stats: BatchStats<T>) {
        self.bn_stats.borrow_mut().push((name.to_string(), stats));
    }

    /// Batch statistics gathered in train mode, in call order.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    /// Names of every parameter touched so far.
    pub fn used_names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Gradients of tracked parameters, keyed by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(k, v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
