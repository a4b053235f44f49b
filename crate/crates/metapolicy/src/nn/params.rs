//! Named parameter collections with a fixed flat layout.
//!
//! Optimizer math (conjugate gradient, line search) works on flat vectors;
//! layer math works on named arrays. `ParamBundle` is the bridge: entries keep
//! insertion order, and `flatten`/`unflatten` round-trip exactly in that order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    /// Row-major dimensions; vectors are single-element shapes.
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamBundle {
    entries: Vec<ParamEntry>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a named array. Names must be unique within a bundle.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        assert!(
            self.entry(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
        });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self
            .entry(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
            .data
    }

    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Concatenate all arrays in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for e in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    /// Overwrite all arrays from a flat vector laid out as by [`flatten`].
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_dim() {
            return Err(Error::config(format!(
                "flat vector has {} entries, bundle holds {}",
                flat.len(),
                self.total_dim()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let len = e.data.len();
            e.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    /// Same structure, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: vec![0.0; e.data.len()],
                })
                .collect(),
        }
    }

    /// self += alpha * other (matching structure assumed).
    pub fn axpy(&mut self, alpha: f64, other: &ParamBundle) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(a.name, b.name);
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for e in &mut self.entries {
            for x in &mut e.data {
                *x *= alpha;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_bundle() -> ParamBundle {
        let mut p = ParamBundle::new();
        p.push("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        p.push("b", vec![2], vec![-1.0, -2.0]);
        p
    }

    #[test]
    fn flatten_preserves_insertion_order() {
        let p = sample_bundle();
        assert_eq!(p.total_dim(), 8);
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, -2.0]);
    }

    #[test]
    fn unflatten_rejects_bad_length() {
        let mut p = sample_bundle();
        assert!(p.unflatten(&[0.0; 7]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(v in proptest::collection::vec(-1e12f64..1e12, 8)) {
            let mut p = sample_bundle();
            p.unflatten(&v).unwrap();
            prop_assert_eq!(p.flatten(), v);
        }
    }
}
