use std::collections::HashMap;

use super::{Graph, Real, Snapshot, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named tensors owned by one layer collection. Trainable entries have
/// `requires_grad = true`; buffers such as running statistics do not and
/// are skipped by the optimizer, but they are saved in snapshots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<Param<T>>,
    binding: Option<(u64, Vec<Var>)>,
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            binding: None,
        }
    }

    /// Appends an entry and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param { name, tensor });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<T>] {
        &mut self.entries
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].tensor
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].tensor
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn replace(&mut self, index: usize, tensor: Tensor<T>) {
        self.entries[index].tensor = tensor;
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.tensor.requires_grad)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copies every entry into `graph` as a leaf and remembers the handles.
    pub fn bind(&mut self, graph: &mut Graph<T>) {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let mut t = p.tensor.clone();
                t.grad = None;
                graph.leaf(t)
            })
            .collect();
        self.binding = Some((graph.id(), vars));
    }

    /// Handle of entry `index` in the graph of the last [`ParamStore::bind`].
    pub fn var(&self, index: usize) -> Var {
        let (_, vars) = self
            .binding
            .as_ref()
            .expect("parameter store used before bind()");
        vars[index]
    }

    /// Moves gradients from `graph` into each trainable tensor's `grad`.
    /// Entries the loss does not depend on receive zeros.
    pub fn pull_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        let (id, vars) = self
            .binding
            .as_ref()
            .ok_or_else(|| Error::Contract("pull_grads before bind".into()))?;
        if *id != graph.id() {
            return Err(Error::Contract(
                "pull_grads from a graph the store was not bound to".into(),
            ));
        }
        for (p, v) in self.entries.iter_mut().zip(vars) {
            if !p.tensor.requires_grad {
                continue;
            }
            p.tensor.grad = Some(match graph.grad(*v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.numel()],
            });
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.tensor.grad = None;
        }
    }

    /// Every entry as `(prefix + name, tensor)`, for weight files.
    pub fn export(&self, prefix: &str, snapshot: &mut Snapshot) {
        for p in &self.entries {
            snapshot.push(format!("{prefix}{}", p.name), p.tensor.cast());
        }
    }

    /// Overwrites entries from `snapshot` by name. Every entry must be
    /// present with the same shape; the `requires_grad` flags are kept.
    pub fn import(&mut self, prefix: &str, snapshot: &Snapshot) -> Result<()> {
        let index: HashMap<&str, &Tensor<f32>> = snapshot
            .tensors()
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for p in &mut self.entries {
            let key = format!("{prefix}{}", p.name);
            let src = index
                .get(key.as_str())
                .ok_or_else(|| Error::Config(format!("snapshot lacks tensor `{key}`")))?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "import",
                    format!(
                        "tensor `{key}` has shape {:?} in snapshot but {:?} in model",
                        src.shape(),
                        p.tensor.shape()
                    ),
                ));
            }
            let requires_grad = p.tensor.requires_grad;
            p.tensor = src.cast();
            p.tensor.requires_grad = requires_grad;
            p.tensor.grad = None;
        }
        Ok(())
    }
}
