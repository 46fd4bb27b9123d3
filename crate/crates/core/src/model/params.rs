use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters in lexicographic order, each with a gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract("param_store", format!("duplicate parameter {:?}", name)));
        }
        self.params.insert(name.to_string(), Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Moves every parameter of `other` into this store; names must not collide.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, p) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::contract("param_store", format!("duplicate parameter {:?}", k)));
            }
            self.params.insert(k, p);
        }
        Ok(())
    }

    /// Removes and returns every parameter whose name starts with `prefix`.
    pub fn split_off_prefix(&mut self, prefix: &str) -> ParamStore<T> {
        let keys: Vec<String> = self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let mut out = ParamStore::new();
        for k in keys {
            let p = self.params.remove(&k).unwrap();
            out.params.insert(k, p);
        }
        out
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), g.leaf(p.value.clone(), trainable)))
                .collect(),
        }
    }

    /// Adds the gradients of bound parameters into their gradient slots.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (name, var) in &bound.vars {
            let (Some(p), Some(g)) = (self.params.get_mut(name), grads.get(*var)) else {
                continue;
            };
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("bound_params", format!("missing parameter {:?}", name)))
    }

    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Union of two bindings (e.g. a model and its discriminator on one graph).
    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}

/// Total number of scalar parameters.
pub fn count_params<T: Real>(params: &ParamStore<T>) -> usize {
    params.iter().map(|(_, p)| p.value.numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_counts_zero() {
        assert_eq!(count_params(&ParamStore::<f32>::new()), 0);
    }

    #[test]
    fn single_conv_count() {
        let mut p = ParamStore::<f32>::new();
        p.insert("conv.weight", Tensor::zeros(&[8, 8, 3, 3, 3])).unwrap();
        p.insert("conv.bias", Tensor::zeros(&[8])).unwrap();
        assert_eq!(count_params(&p), 1736);
    }

    #[test]
    fn names_are_unique_and_sorted() {
        let mut p = ParamStore::<f32>::new();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
