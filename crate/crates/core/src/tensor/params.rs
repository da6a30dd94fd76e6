//! Named parameter storage and its serializable snapshot.

use serde::{Deserialize, Serialize};

use super::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Bumped whenever the checkpoint layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Parameter {
    pub fn to_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::new(self.rows, self.cols, self.data.clone())
    }
}

/// Parameters in registration order. Binding to a tape yields one [`Var`]
/// per parameter, indexed by [`ParamId::index`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    pub fn to_saved(&self) -> Vec<Parameter> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| Parameter {
                name: name.clone(),
                rows: v.rows(),
                cols: v.cols(),
                data: v.data().to_vec(),
            })
            .collect()
    }

    /// Overwrites values from a snapshot that must list exactly the same
    /// names and shapes.
    pub fn load_saved(&mut self, saved: &[Parameter]) -> Result<(), TensorError> {
        if saved.len() != self.values.len() {
            return Err(TensorError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                saved.len()
            )));
        }
        let mut loaded = Vec::with_capacity(saved.len());
        for p in saved {
            let id = self
                .find(&p.name)
                .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {}", p.name)))?;
            let want = self.values[id.0].shape();
            if want != [p.rows, p.cols] {
                return Err(TensorError::Checkpoint(format!(
                    "{}: expected shape {:?}, found {:?}",
                    p.name,
                    want,
                    [p.rows, p.cols]
                )));
            }
            let t = p
                .to_tensor()
                .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", p.name)))?;
            loaded.push((id, t));
        }
        for (id, t) in loaded {
            self.values[id.0] = t;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(1, 3, vec![0.1, 1.0 / 3.0, -2e-300]).unwrap());
        store.add("b", Tensor::zeros(2, 2));
        let json = serde_json::to_string(&store.to_saved()).unwrap();
        let back: Vec<Parameter> = serde_json::from_str(&json).unwrap();
        let mut other = store.clone();
        other.get_mut(a).data_mut()[0] = 9.0;
        other.load_saved(&back).unwrap();
        assert_eq!(other, store);
    }

    #[test]
    fn mismatched_snapshot_is_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(1, 3));
        let mut saved = store.to_saved();
        saved[0].cols = 2;
        saved[0].data.pop();
        assert!(store.load_saved(&saved).is_err());
        saved[0].name = "z".into();
        assert!(store.load_saved(&saved).is_err());
        assert!(store.load_saved(&[]).is_err());
    }
}
