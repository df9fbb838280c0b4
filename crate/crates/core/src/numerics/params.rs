use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Storage precision for trained parameters.
///
/// Arithmetic always runs in `f64`; `F32` rounds every parameter to the
/// nearest `f32` after each update and stores 32-bit payloads on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let tensors =
            self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Self { tensors }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Same names and same shapes.
    pub fn ensure_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape(format!(
                "parameter sets have {} and {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb {
                return Err(Error::shape(format!("parameter name {ka:?} vs {kb:?}")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::shape(format!(
                    "parameter {ka:?}: {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Elementwise combination of two sets with identical layout.
    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.ensure_same_layout(other)?;
        let mut out = BTreeMap::new();
        for ((k, a), b) in self.tensors.iter().zip(other.tensors.values()) {
            out.insert(k.clone(), a.zip_map(b, &f)?);
        }
        Ok(Self { tensors: out })
    }

    /// In-place `self += other`; layouts must match.
    pub fn accumulate(&mut self, other: &ParamSet) -> Result<()> {
        self.ensure_same_layout(other)?;
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            for t in self.tensors.values_mut() {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        let diff = self.zip_with(other, |a, b| (a - b).abs())?;
        Ok(diff.tensors.values().flat_map(|t| t.data().iter().copied()).fold(0.0, f64::max))
    }
}

/// Graph handles for every tensor of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name:?} is not bound")))
    }
}

impl Graph {
    /// Adds every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> BoundParams {
        let vars = params.iter().map(|(k, t)| (k.to_string(), self.param(t.clone()))).collect();
        BoundParams { vars }
    }

    /// Adds every tensor of `params` as a constant leaf.
    pub fn bind_frozen(&mut self, params: &ParamSet) -> BoundParams {
        let vars = params.iter().map(|(k, t)| (k.to_string(), self.constant(t.clone()))).collect();
        BoundParams { vars }
    }
}

impl Gradients {
    /// Gradients for the bound parameters, laid out like `params`.
    /// Parameters the output does not depend on get zeros.
    pub fn collect(&self, bound: &BoundParams, params: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, tensor) in params.iter() {
            let var = bound.get(name)?;
            let grad = match self.wrt(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tensor.shape()),
            };
            out.insert(name, grad);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_checks() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::vector(vec![1.0]));
        assert!(a.ensure_same_layout(&b).is_err());
        let mut c = ParamSet::new();
        c.insert("v", Tensor::vector(vec![1.0, 2.0]));
        assert!(a.ensure_same_layout(&c).is_err());
        assert!(a.ensure_same_layout(&a.zeros_like()).is_ok());
    }

    #[test]
    fn f32_rounding() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::scalar(0.1));
        a.round_to(Precision::F32);
        assert_eq!(a.get("w").unwrap().item().unwrap(), 0.1f32 as f64);
    }
}
