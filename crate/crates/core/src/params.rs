//! Named parameter storage shared by every learned component.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_snapshot, write_snapshot, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Tape variables for every parameter of a store, in registration order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables that stand in for a store's parameters, in
    /// registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(value);
        self.names.push(name);
        ParamId(id)
    }

    pub fn gaussian(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| std * rng.normal());
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        (&mut self.values[id.0], &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Pushes every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), trainable))
                .collect(),
        }
    }

    /// Adds the tape gradients of bound parameters into the stored grads.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (g, var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(tg) = tape.grad(*var) {
                g.add_assign(tg.data());
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .collect()
    }

    /// Overwrites values from a name→tensor list. Every stored parameter
    /// must be present with a matching shape; extra entries are returned.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<Vec<(String, Tensor)>> {
        let mut seen = vec![false; self.values.len()];
        let mut extra = Vec::new();
        for (name, t) in tensors {
            match self.index.get(&name) {
                Some(&i) => {
                    if t.shape() != self.values[i].shape() {
                        return Err(Error::Format(format!(
                            "parameter {name}: snapshot shape {:?}, model shape {:?}",
                            t.shape(),
                            self.values[i].shape()
                        )));
                    }
                    self.values[i] = t;
                    seen[i] = true;
                }
                None => extra.push((name, t)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "snapshot is missing parameter {}",
                self.names[i]
            )));
        }
        Ok(extra)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.named_tensors())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let tensors = read_tensors(path)?;
        self.load_named(tensors)?;
        Ok(())
    }
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(std::io::BufWriter::new(file), tensors).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(std::io::BufReader::new(file))
}
