//! Named flat parameter storage shared by the trainable modules.
//!
//! Blocks keep their insertion order. The optimizer and the checkpoint
//! format both walk blocks in that order, which keeps updates and
//! serialization deterministic without extra bookkeeping. A forward pass
//! binds every block into a fresh graph as a leaf; gradients are read
//! back from the bound leaves after the backward pass.

use std::collections::BTreeMap;

use crate::prng::{self, Stream};
use crate::tensor::{Graph, Tensor, TensorId};
use crate::{C3mError, Result};

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(C3mError::contract(format!("duplicate parameter block {name}")));
        }
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(C3mError::dim(format!(
                "parameter block {name} declares shape {shape:?} but holds {} values",
                values.len()
            )));
        }
        self.index.insert(name.to_string(), self.blocks.len());
        self.blocks.push(ParamBlock { name: name.to_string(), shape, values });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamBlock> {
        self.index
            .get(name)
            .map(|&i| &self.blocks[i])
            .ok_or_else(|| C3mError::contract(format!("unknown parameter block {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamBlock> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.blocks[i]),
            None => Err(C3mError::contract(format!("unknown parameter block {name}"))),
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Loads every block into `graph` as a leaf. `trainable` decides per
    /// block whether the leaf tracks gradients, which is how stage-one
    /// freezing keeps frozen blocks out of the backward pass entirely.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> Result<Binding> {
        let mut ids = BTreeMap::new();
        for b in &self.blocks {
            let leaf = Tensor::new(b.shape.clone(), b.values.clone(), trainable(&b.name))?;
            ids.insert(b.name.clone(), graph.leaf(&leaf));
        }
        Ok(Binding { ids })
    }

    pub fn bind_all(&self, graph: &mut Graph) -> Result<Binding> {
        self.bind(graph, |_| true)
    }
}

/// Name → leaf id map produced by [`ParamSet::bind`] for one graph.
#[derive(Clone, Debug)]
pub struct Binding {
    ids: BTreeMap<String, TensorId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| C3mError::contract(format!("unbound parameter block {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }
}

/// Fan-in scaled uniform draw in ±sqrt(1/fan_in), the initialization used
/// by every linear map in the model.
pub fn uniform_init(rng: &mut Stream, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| prng::uniform(rng, -bound, bound)).collect()
}

// ====== tests ======
