//! The searchable cell: a DAG over two input nodes, three intermediate nodes
//! and one output node, whose edges are softmax-weighted mixtures of
//! candidate operations.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::kernels::PoolKind;
use crate::nn::{channels, spatial, ConvUnit};
use crate::rng::Rng;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor};

pub const INPUT_NODES: usize = 2;
pub const INTERMEDIATE_NODES: usize = 3;

/// Candidate operation on a cell edge. The spatial dimensionality follows the
/// cell kind, so `Conv3` is a 3×3 2D convolution in a feature cell and a
/// 3×3×3 3D convolution in a matching cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Zero,
    Skip,
    Conv3,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    AvgPool3,
    MaxPool3,
}

impl OpKind {
    pub const ALL: [OpKind; 9] = [
        OpKind::Zero,
        OpKind::Skip,
        OpKind::Conv3,
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::DilConv3,
        OpKind::DilConv5,
        OpKind::AvgPool3,
        OpKind::MaxPool3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Skip => "skip_connect",
            OpKind::Conv3 => "conv_3x3",
            OpKind::SepConv3 => "sep_conv_3x3",
            OpKind::SepConv5 => "sep_conv_5x5",
            OpKind::DilConv3 => "dil_conv_3x3",
            OpKind::DilConv5 => "dil_conv_5x5",
            OpKind::AvgPool3 => "avg_pool_3x3",
            OpKind::MaxPool3 => "max_pool_3x3",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown operation `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    /// 2D cells of the Feature Net.
    Feature,
    /// 3D cells of the Matching Net.
    Matching,
}

impl CellKind {
    pub fn spatial_axes(self) -> usize {
        match self {
            CellKind::Feature => 2,
            CellKind::Matching => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpsetVariant {
    /// {3×3 conv, skip, zero}.
    Reduced,
    /// The reduced set plus separable, dilated separable and pooling operations.
    Large,
}

impl FromStr for OpsetVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "reduced" => Ok(Self::Reduced),
            "large" => Ok(Self::Large),
            _ => Err(format!("opset must be `reduced` or `large`, got `{s}`")),
        }
    }
}

impl fmt::Display for OpsetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reduced => "reduced",
            Self::Large => "large",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OperationSet {
    pub kind: CellKind,
    pub ops: Vec<OpKind>,
}

impl OperationSet {
    pub fn new(kind: CellKind, variant: OpsetVariant) -> Self {
        let ops = match variant {
            OpsetVariant::Reduced => vec![OpKind::Conv3, OpKind::Skip, OpKind::Zero],
            OpsetVariant::Large => vec![
                OpKind::Conv3,
                OpKind::SepConv3,
                OpKind::SepConv5,
                OpKind::DilConv3,
                OpKind::DilConv5,
                OpKind::Skip,
                OpKind::AvgPool3,
                OpKind::MaxPool3,
                OpKind::Zero,
            ],
        };
        Self { kind, ops }
    }

    /// Number of candidate operations (ν).
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn index_of(&self, op: OpKind) -> Option<usize> {
        self.ops.iter().position(|&o| o == op)
    }
}

/// Edge list of the cell DAG. Nodes 0 and 1 are the inputs `C_{l-2}` and
/// `C_{l-1}`; nodes 2, 3, 4 are intermediate; the output concatenates them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTopology {
    pub edges: Vec<(usize, usize)>,
    pub residual: bool,
}

impl CellTopology {
    pub fn new(residual: bool) -> Self {
        let mut edges = Vec::new();
        for j in INPUT_NODES..INPUT_NODES + INTERMEDIATE_NODES {
            for i in 0..j {
                edges.push((i, j));
            }
        }
        Self { edges, residual }
    }

    pub fn n_nodes(&self) -> usize {
        INPUT_NODES + INTERMEDIATE_NODES + 1
    }

    /// Indices into `edges` of the edges entering node `j`, by source order.
    pub fn incoming(&self, j: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.1 == j)
            .map(|(k, _)| k)
            .collect()
    }
}

/// One α vector of length ν per edge, held in the parameter store.
#[derive(Clone, Debug)]
pub struct CellAlpha {
    pub edges: Vec<ParamId>,
}

impl CellAlpha {
    /// Zero-initialised α (uniform mixtures).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        topo: &CellTopology,
        opset: &OperationSet,
    ) -> Self {
        let edges = topo
            .edges
            .iter()
            .map(|(i, j)| {
                store.add(
                    format!("{name}.alpha.{i}-{j}"),
                    group,
                    Tensor::zeros(vec![opset.len()]),
                )
            })
            .collect();
        Self { edges }
    }

    /// Per-edge softmax mixing weights as graph nodes.
    pub fn mixing_weights(&self, g: &mut Graph, store: &ParamStore) -> Result<Vec<Var>> {
        self.edges
            .iter()
            .map(|&id| {
                let a = g.param(store, id);
                g.softmax(a, 0)
            })
            .collect()
    }

    pub fn values(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        self.edges
            .iter()
            .map(|&id| store.tensor(id).values().to_vec())
            .collect()
    }
}

/// An instantiated candidate operation with its own weights.
#[derive(Clone, Debug)]
pub enum CellOp {
    Zero,
    Skip,
    Conv(ConvUnit),
    Separable {
        depthwise: ConvUnit,
        pointwise: ConvUnit,
    },
    Pool(PoolKind),
}

impl CellOp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        op: OpKind,
        kind: CellKind,
        channels: usize,
    ) -> Self {
        let axes = kind.spatial_axes();
        let separable = |store: &mut ParamStore, rng: &mut Rng, k: usize, dil: usize| {
            let dw = ConvSpec::new(axes, channels, channels, k)
                .dilation(dil)
                .padding(dil * (k - 1) / 2)
                .groups(channels);
            let pw = ConvSpec::new(axes, channels, channels, 1).affine(true);
            CellOp::Separable {
                depthwise: ConvUnit::new(store, rng, &format!("{name}.dw"), dw, false),
                pointwise: ConvUnit::new(store, rng, &format!("{name}.pw"), pw, true),
            }
        };
        match op {
            OpKind::Zero => CellOp::Zero,
            OpKind::Skip => CellOp::Skip,
            OpKind::Conv3 => {
                let spec = ConvSpec::new(axes, channels, channels, 3).affine(true);
                CellOp::Conv(ConvUnit::new(store, rng, name, spec, true))
            }
            OpKind::SepConv3 => separable(store, rng, 3, 1),
            OpKind::SepConv5 => separable(store, rng, 5, 1),
            OpKind::DilConv3 => separable(store, rng, 3, 2),
            OpKind::DilConv5 => separable(store, rng, 5, 2),
            OpKind::AvgPool3 => CellOp::Pool(PoolKind::Average),
            OpKind::MaxPool3 => CellOp::Pool(PoolKind::Max),
        }
    }

    /// `None` for the zero operation, which contributes nothing.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Option<Var>> {
        Ok(match self {
            CellOp::Zero => None,
            CellOp::Skip => Some(x),
            CellOp::Conv(u) => Some(u.forward(g, store, x)?),
            CellOp::Separable {
                depthwise,
                pointwise,
            } => {
                let y = depthwise.forward(g, store, x)?;
                Some(pointwise.forward(g, store, y)?)
            }
            CellOp::Pool(kind) => Some(g.pool(x, 3, *kind)?),
        })
    }

    /// Like [`CellOp::forward`] but materialises the zero operation.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self.forward(g, store, x)? {
            Some(y) => Ok(y),
            None => {
                let zeros = Tensor::zeros(g.shape(x).to_vec());
                Ok(g.constant(&zeros))
            }
        }
    }
}

/// `Σ_r weights[r] · o_r(x)`; the zero operation adds nothing.
pub fn mixed_op(
    g: &mut Graph,
    store: &ParamStore,
    weights: Var,
    ops: &[CellOp],
    x: Var,
) -> Result<Var> {
    if g.shape(weights) != [ops.len()] {
        return Err(Error::InvalidArgument(format!(
            "mixing vector has shape {:?}, edge has {} candidate operations",
            g.shape(weights),
            ops.len()
        )));
    }
    let mut terms = Vec::with_capacity(ops.len());
    for (r, op) in ops.iter().enumerate() {
        if let Some(y) = op.forward(g, store, x)? {
            terms.push((r, y));
        }
    }
    if terms.is_empty() {
        let zeros = Tensor::zeros(g.shape(x).to_vec());
        return Ok(g.constant(&zeros));
    }
    g.mix(weights, &terms)
}

/// Resizes and channel-maps the two cell inputs to the cell's working shape.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub prev_prev: Option<ConvUnit>,
    pub prev: Option<ConvUnit>,
}

impl Preprocess {
    /// A 1×1 (or 1×1×1) convolution with affine is created only for an input
    /// whose channel count differs from `target_channels`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kind: CellKind,
        in_channels: (usize, usize),
        target_channels: usize,
    ) -> Self {
        let axes = kind.spatial_axes();
        let mk = |store: &mut ParamStore, rng: &mut Rng, cin: usize, tag: &str| {
            (cin != target_channels).then(|| {
                let spec = ConvSpec::new(axes, cin, target_channels, 1).affine(true);
                ConvUnit::new(store, rng, &format!("{name}.{tag}"), spec, false)
            })
        };
        Self {
            prev_prev: mk(store, rng, in_channels.0, "pre0"),
            prev: mk(store, rng, in_channels.1, "pre1"),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        c_prev_prev: Var,
        c_prev: Var,
        target_resolution: &[usize],
    ) -> Result<(Var, Var)> {
        let one = |g: &mut Graph, x: Var, unit: &Option<ConvUnit>| -> Result<Var> {
            let x = g.interpolate(x, target_resolution)?;
            match unit {
                Some(u) => u.forward(g, store, x),
                None => Ok(x),
            }
        };
        Ok((one(g, c_prev_prev, &self.prev_prev)?, one(g, c_prev, &self.prev)?))
    }
}

/// Supernet cell: every edge carries all candidate operations.
#[derive(Clone, Debug)]
pub struct MixedCell {
    pub kind: CellKind,
    pub channels: usize,
    pub topology: CellTopology,
    pub preprocess: Preprocess,
    pub edge_ops: Vec<Vec<CellOp>>,
    pub residual: Option<ConvUnit>,
}

impl MixedCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        topology: &CellTopology,
        opset: &OperationSet,
        in_channels: (usize, usize),
        channels: usize,
    ) -> Self {
        let preprocess = Preprocess::new(store, rng, name, opset.kind, in_channels, channels);
        let edge_ops = topology
            .edges
            .iter()
            .map(|(i, j)| {
                opset
                    .ops
                    .iter()
                    .map(|&op| {
                        let n = format!("{name}.e{i}-{j}.{}", op.name());
                        CellOp::new(store, rng, &n, op, opset.kind, channels)
                    })
                    .collect()
            })
            .collect();
        let residual = residual_unit(store, rng, name, topology, opset.kind, channels);
        Self {
            kind: opset.kind,
            channels,
            topology: topology.clone(),
            preprocess,
            edge_ops,
            residual,
        }
    }

    pub fn output_channels(&self) -> usize {
        INTERMEDIATE_NODES * self.channels
    }

    /// `mixing[e]` is the softmax of edge `e`'s α.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mixing: &[Var],
        c_prev_prev: Var,
        c_prev: Var,
        target_resolution: &[usize],
    ) -> Result<Var> {
        if mixing.len() != self.topology.edges.len() {
            return Err(Error::InvalidArgument(format!(
                "{} mixing vectors for {} edges",
                mixing.len(),
                self.topology.edges.len()
            )));
        }
        let (s0, s1) =
            self.preprocess
                .forward(g, store, c_prev_prev, c_prev, target_resolution)?;
        check_aligned(g, s0, s1, self.channels)?;
        let mut states = vec![s0, s1];
        for j in INPUT_NODES..INPUT_NODES + INTERMEDIATE_NODES {
            let mut inputs = Vec::new();
            for e in self.topology.incoming(j) {
                let src = states[self.topology.edges[e].0];
                inputs.push(mixed_op(g, store, mixing[e], &self.edge_ops[e], src)?);
            }
            states.push(g.add(&inputs)?);
        }
        finish_cell(g, store, &states[INPUT_NODES..], s1, self.residual.as_ref())
    }
}

pub(crate) fn residual_unit(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    topology: &CellTopology,
    kind: CellKind,
    channels: usize,
) -> Option<ConvUnit> {
    topology.residual.then(|| {
        let spec = ConvSpec::new(kind.spatial_axes(), channels, INTERMEDIATE_NODES * channels, 1);
        ConvUnit::new(store, rng, &format!("{name}.residual"), spec, false)
    })
}

pub(crate) fn check_aligned(g: &Graph, s0: Var, s1: Var, channels: usize) -> Result<()> {
    if g.shape(s0) != g.shape(s1) || g.shape(s0)[1] != channels {
        return shape_err(format!(
            "cell inputs not aligned after preprocessing: {:?} vs {:?} (want {channels} channels)",
            g.shape(s0),
            g.shape(s1)
        ));
    }
    Ok(())
}

/// Output node: concatenation of the intermediate nodes, plus the aligned
/// `C_{l-1}` for residual cells.
pub(crate) fn finish_cell(
    g: &mut Graph,
    store: &ParamStore,
    intermediate: &[Var],
    s1: Var,
    residual: Option<&ConvUnit>,
) -> Result<Var> {
    let out = g.concat_channels(intermediate)?;
    match residual {
        Some(unit) => {
            let r = unit.forward(g, store, s1)?;
            g.add(&[out, r])
        }
        None => Ok(out),
    }
}

/// Parameter-free skip across a shape mismatch: resample, then pad or
/// truncate channels.
pub fn align_skip(g: &mut Graph, x: Var, target: &[usize], target_channels: usize) -> Result<Var> {
    let y = if spatial(g, x) == target {
        x
    } else {
        g.interpolate(x, target)?
    };
    if channels(g, y) == target_channels {
        Ok(y)
    } else {
        g.resize_channels(y, target_channels)
    }
}
