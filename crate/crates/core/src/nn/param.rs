//! Named parameter tensors with gradients.

use super::NnError;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

/// Ordered collection of named, shaped tensors.
///
/// Insertion order is the iteration order, so two trees built by the same
/// code visit their entries identically. This is what checkpointing, target
/// syncs and prior snapshots rely on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    entries: Vec<Entry>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry and returns its index.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<usize, NnError> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(NnError::Shape(format!("{name}: dimensions must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(NnError::Shape(format!(
                "{name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.index_of(&name).is_some() {
            return Err(NnError::DuplicateName(name));
        }
        self.entries.push(Entry { name, shape, grad: vec![0.0; numel], values });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.entries[i].shape
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.entries[i].values
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i].values
    }

    pub fn grad(&self, i: usize) -> &[f64] {
        &self.entries[i].grad
    }

    pub fn grad_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i].grad
    }

    /// Mutable values and read-only gradient of one entry.
    pub fn values_and_grad(&mut self, i: usize) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[i];
        (&mut e.values, &e.grad)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Sum of squared gradient entries.
    pub fn grad_sq_norm(&self) -> f64 {
        self.entries.iter().flat_map(|e| &e.grad).map(|g| g * g).sum()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Copies values from a tree with the same layout. Gradients are untouched.
    pub fn copy_values_from(&mut self, other: &ParamTree) -> Result<(), NnError> {
        self.check_same_layout(other)?;
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.values.copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamTree) -> Result<(), NnError> {
        let same = self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if same {
            Ok(())
        } else {
            Err(NnError::Shape("parameter trees differ in layout".into()))
        }
    }

    /// True when names, shapes and values agree bit for bit.
    pub fn values_bitwise_eq(&self, other: &ParamTree) -> bool {
        self.check_same_layout(other).is_ok()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries.iter().map(|e| (e.name.as_str(), e.shape.as_slice(), e.values.as_slice()))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.values.iter().all(|v| v.is_finite()))
    }
}

/// Scales the gradients of all `trees` jointly so their global L2 norm is at
/// most `max_norm`. Returns the factor applied (1 when under the threshold).
pub fn clip_global_norm(trees: &mut [&mut ParamTree], max_norm: f64) -> Result<f64, NnError> {
    if !(max_norm > 0.0) {
        return Err(NnError::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_grad_norm(trees.iter().map(|t| &**t));
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in trees.iter_mut() {
            t.scale_grads(factor);
        }
        Ok(factor)
    } else {
        Ok(1.0)
    }
}

pub fn global_grad_norm<'a>(trees: impl IntoIterator<Item = &'a ParamTree>) -> f64 {
    trees.into_iter().map(ParamTree::grad_sq_norm).sum::<f64>().sqrt()
}
