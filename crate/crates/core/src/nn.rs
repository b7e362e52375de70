//! Small parameterised building blocks shared by cells and networks.

use crate::error::Result;
use crate::graph::{ConvSpec, Graph, Var};
use crate::rng::Rng;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

/// conv → optional normalisation (per-sample statistics, learnable per-channel
/// affine) → optional leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub affine: Option<(ParamId, ParamId)>,
    pub activation: bool,
}

impl ConvUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        spec: ConvSpec,
        activation: bool,
    ) -> Self {
        let weight = store.add_fan_in(format!("{name}.w"), spec.weight_shape(), spec.fan_in(), rng);
        let affine = spec.has_batchnorm_affine.then(|| {
            let c = spec.out_channels;
            let scale = store.add(
                format!("{name}.scale"),
                ParamGroup::Weight,
                Tensor::filled(vec![c], 1.0),
            );
            let shift = store.add(format!("{name}.shift"), ParamGroup::Weight, Tensor::zeros(vec![c]));
            (scale, shift)
        });
        Self {
            spec,
            weight,
            affine,
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let mut y = g.conv(x, w, &self.spec)?;
        if let Some((scale, shift)) = self.affine {
            y = g.normalize(y)?;
            let (s, t) = (g.param(store, scale), g.param(store, shift));
            y = g.affine(y, s, t)?;
        }
        if self.activation {
            y = g.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(y)
    }
}

/// Spatial extents of a 4D/5D graph value.
pub fn spatial(g: &Graph, x: Var) -> Vec<usize> {
    g.shape(x)[2..].to_vec()
}

pub fn channels(g: &Graph, x: Var) -> usize {
    g.shape(x)[1]
}
