//! Layers, parameter storage and the ResNet-18 style classifier.

mod checkpoint;
mod layers;
mod resnet;

pub use checkpoint::{load_network, save_network, CHECKPOINT_MANIFEST};
pub(crate) use checkpoint::manifest_setting as checkpoint_setting;
pub use layers::{batch_norm, conv, linear, residual_block, BN_EPS, BN_MOMENTUM};
pub use resnet::{
    build_resnet18, round_channels, stage_widths, Head, Layer, LayerSpec, Network, NetworkConfig,
    NetOutput,
};

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, affinity sharing on, running statistics updated.
    Train,
    /// Running statistics, affinity sharing off; a pure function of the input.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics) are stored and checkpointed but never
    /// receive gradients.
    pub trainable: bool,
}

/// Ordered, name-addressed collection of parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => {
                self.entries[i].value = value;
                self.entries[i].trainable = trainable;
            }
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push(Param {
                    name,
                    value,
                    trainable,
                });
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Overwrites buffers with values queued during a training forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, value) in updates {
            *self.value_mut(&name)? = value;
        }
        Ok(())
    }

    pub fn zero_trainable(&mut self) {
        for p in self.entries.iter_mut().filter(|p| p.trainable) {
            p.value.data_mut().fill(0.0);
        }
    }
}

/// Forward-pass context: the graph being recorded plus the parameter source.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub params: &'a ParamStore,
    pub mode: Mode,
    /// When false, parameters enter the graph as constants.
    pub trainable: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            g,
            params,
            mode,
            trainable: mode == Mode::Train,
        }
    }

    /// Parameters enter as constants; used to freeze one network while
    /// differentiating another through it.
    pub fn frozen(g: &'a mut Graph, params: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            g,
            params,
            mode,
            trainable: false,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let p = self.params.get(name)?;
        Ok(self.g.param(name, &p.value, self.trainable && p.trainable))
    }
}

/// Uniform in `[-bound, bound]` with `bound = sqrt(gain / fan_in)`.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}
