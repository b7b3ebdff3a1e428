use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use shadowdef_autograd::{Tensor, Var};

use crate::error::{Error, Result};

/// Graph handles for a set of named tensors.
pub type VarMap = BTreeMap<String, Var>;

/// Named tensors in name order. Used for model parameters and for gradient
/// sets; the ordering is what makes every reduction over it deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensors(BTreeMap<String, Tensor>);

/// A gradient (or update) for each parameter of a model.
pub type GradientSet = Tensors;

impl Tensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.0.values()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.0.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.raw_dim())))
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(&Tensor) -> Tensor) -> Self {
        Self(self.0.iter().map(|(k, v)| (k.clone(), f(v))).collect())
    }

    /// Fails unless both sets have the same names and shapes.
    pub fn check_compatible(&self, other: &Tensors) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Protocol(format!(
                "tensor sets differ in size: {} vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.0.iter().zip(other.0.iter()) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Protocol(format!(
                    "tensor mismatch: {ka} {:?} vs {kb} {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, matching by name.
    pub fn axpy(&mut self, alpha: f64, other: &Tensors) {
        for (k, v) in self.0.iter_mut() {
            if let Some(o) = other.0.get(k) {
                v.scaled_add(alpha, o);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.0.values_mut() {
            v.mapv_inplace(|x| x * alpha);
        }
    }

    /// `(self - other) / divisor`
    pub fn diff_scaled(&self, other: &Tensors, divisor: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| {
                    let o = &other.0[k];
                    (k.clone(), (v - o) / divisor)
                })
                .collect(),
        )
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Tensors) -> f64 {
        self.0
            .iter()
            .map(|(k, v)| {
                let o = &other.0[k];
                v.iter().zip(o.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    pub fn cosine_similarity(&self, other: &Tensors) -> f64 {
        let denom = self.l2_norm() * other.l2_norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }

    /// All entries concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.0.values().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Wraps every tensor as a graph leaf.
    pub fn to_vars(&self, requires_grad: bool) -> VarMap {
        self.0
            .iter()
            .map(|(k, v)| {
                let var = if requires_grad {
                    Var::param(v.clone())
                } else {
                    Var::constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect()
    }

    /// Collects gradient values returned in the same order as `self.names()`.
    pub fn from_ordered(template: &Tensors, values: Vec<Var>) -> Self {
        Self(
            template
                .0
                .keys()
                .cloned()
                .zip(values.into_iter().map(|v| v.value().clone()))
                .collect(),
        )
    }

    /// Sub-set of entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Self {
        Self(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn extend(&mut self, other: Tensors) {
        self.0.extend(other.0);
    }
}

impl FromIterator<(String, Tensor)> for Tensors {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Ordered handles of a `VarMap` for passing to `grad`.
pub fn var_refs(map: &VarMap) -> Vec<&Var> {
    map.values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    fn set(vals: &[(&str, &[f64])]) -> Tensors {
        vals.iter()
            .map(|(k, v)| (k.to_string(), arr1(v).into_dyn()))
            .collect()
    }

    #[test]
    fn axpy_and_norms() {
        let mut a = set(&[("a", &[1.0, 2.0]), ("b", &[2.0])]);
        let b = set(&[("a", &[1.0, 1.0]), ("b", &[-1.0])]);
        a.axpy(2.0, &b);
        assert_eq!(a.flatten(), vec![3.0, 4.0, 0.0]);
        assert!((a.l2_norm() - 5.0).abs() < 1e-12);
        assert_eq!(a.max_abs(), 4.0);
    }

    #[test]
    fn compatibility_checks_names_and_shapes() {
        let a = set(&[("a", &[1.0, 2.0])]);
        let b = set(&[("a", &[1.0])]);
        let c = set(&[("z", &[1.0, 2.0])]);
        assert!(a.check_compatible(&a.zeros_like()).is_ok());
        assert!(a.check_compatible(&b).is_err());
        assert!(a.check_compatible(&c).is_err());
        let _: ArrayD<f64> = a.get("a").unwrap().clone();
    }
}
