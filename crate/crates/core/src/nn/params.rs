use std::collections::HashMap;

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm running statistics, updated from forward passes.
    RunningStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub role: ParamRole,
}

/// Named parameter tensors of a network, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// # Panics
    /// On a duplicate name or a data length that does not match `shape`.
    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<T>, role: ParamRole) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "param `{name}` size");
        assert!(!self.by_name.contains_key(&name), "duplicate param `{name}`");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            data,
            role,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.role == ParamRole::Trainable)
            .map(|(id, _)| id)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == ParamRole::Trainable)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
                    role: p.role,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Sets every trainable value to zero.
    pub fn zero_trainable(&mut self) {
        for p in &mut self.params {
            if p.role == ParamRole::Trainable {
                p.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}
