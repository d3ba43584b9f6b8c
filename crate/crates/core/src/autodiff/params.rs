use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use super::graph::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named collection of trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Concatenate all entries in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    /// Inverse of [`flatten`](Self::flatten), using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_scalars() {
            return Err(Error::contract(format!(
                "flat vector has {} values, parameter set needs {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            let n = t.numel();
            let value = Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + n].to_vec());
            entries.insert(name.clone(), value);
            offset += n;
        }
        Ok(ParamSet { entries })
    }

    /// Hash over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in &self.entries {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub(crate) fn check_same_keys<'a>(
        &self,
        other: impl Iterator<Item = &'a str>,
        what: &str,
    ) -> Result<()> {
        let theirs: Vec<&str> = other.collect();
        let ours: Vec<&str> = self.names().collect();
        if ours != theirs {
            return Err(Error::contract(format!(
                "{what} keys {theirs:?} do not match parameter keys {ours:?}"
            )));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Gradients keyed by parameter name, each with the shape of its parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Zero gradient shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
            .collect()
    }

    /// Name of the first entry holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n.as_str())
    }
}

impl FromIterator<(String, Tensor)> for GradMap {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        GradMap {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Parameters bound into a particular [`Graph`](super::Graph) as nodes.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    entries: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.entries
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name:?} is not bound")))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.entries.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set(a: Vec<f64>, b: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(2, a.len() / 2, a).unwrap()).unwrap();
        p.insert("b", Tensor::vector(b)).unwrap();
        p
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn iteration_order_is_by_name() {
        let p = sample_set(vec![1.0, 2.0], vec![3.0]);
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, vec!["b", "w"]);
        assert_eq!(p.flatten(), vec![3.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bit_exact(
            a in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 2..=8usize)
                .prop_filter("even", |v| v.len() % 2 == 0),
            b in proptest::collection::vec(-1e300f64..1e300, 1..5),
        ) {
            let p = sample_set(a, b);
            let back = p.unflatten(&p.flatten()).unwrap();
            prop_assert_eq!(back.content_hash(), p.content_hash());
            prop_assert_eq!(back, p);
        }
    }
}
