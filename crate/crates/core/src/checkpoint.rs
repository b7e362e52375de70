//! Weights, optimiser velocity and training progress of a discrete network,
//! stored as JSON.
//!
//! Floats are written with shortest round-trip formatting, so loading a
//! checkpoint restores every value bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discrete::{build_discrete, DiscreteConfig, DiscreteNet};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::search::Sgd;
use crate::tensor::{ParamGroup, ParamStore};

pub const FORMAT: &str = "stereonas-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub genotype: String,
    pub base_filters: usize,
    pub residual: bool,
    /// Seed the network was initialised and trained with.
    pub seed: u64,
    /// Number of completed training epochs.
    pub epoch: usize,
    pub weights: Vec<TensorEntry>,
    /// Momentum buffers, one per weight tensor in the same order.
    pub velocity: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(
        net: &DiscreteNet,
        store: &ParamStore,
        opt: &Sgd,
        seed: u64,
        epoch: usize,
    ) -> Self {
        let weights = store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                values: p.tensor.values().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            genotype: net.genotype.to_text(),
            base_filters: net.config.base_filters,
            residual: net.config.residual,
            seed,
            epoch,
            weights,
            velocity: opt.velocity.clone(),
        }
    }

    /// Rebuilds the network and optimiser state; `momentum` and
    /// `weight_decay` come from the current schedule.
    pub fn restore(&self, momentum: f64, weight_decay: f64) -> Result<(DiscreteNet, ParamStore, Sgd)> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`, expected `{FORMAT}`",
                self.format
            )));
        }
        let genotype = Genotype::parse(&self.genotype)?;
        let config = DiscreteConfig {
            base_filters: self.base_filters,
            residual: self.residual,
        };
        let (net, mut store) = build_discrete(&genotype, &config, self.seed)?;
        let entries: Vec<_> = self
            .weights
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.values.clone()))
            .collect();
        store.load_values(&entries)?;
        let mut opt = Sgd::new(
            &store,
            store.ids_in(|g| g == ParamGroup::Weight),
            momentum,
            weight_decay,
        );
        if opt.velocity.len() != self.velocity.len()
            || opt.velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Checkpoint("velocity buffers do not match the network".into()));
        }
        opt.velocity = self.velocity.clone();
        Ok((net, store, opt))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
