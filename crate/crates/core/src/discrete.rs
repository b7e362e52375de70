//! The network described by a [`Genotype`]: one fixed cell per layer along
//! the decoded level path, with only the chosen operations instantiated.

use crate::cell::{
    check_aligned, finish_cell, residual_unit, CellKind, CellOp, CellTopology, Preprocess,
    INPUT_NODES, INTERMEDIATE_NODES,
};
use crate::error::Result;
use crate::genotype::{CellGenotype, Genotype};
use crate::graph::{Graph, Var};
use crate::nn::{channels, spatial, ConvUnit};
use crate::rng::{self, Rng};
use crate::stereo::StereoNet;
use crate::tensor::ParamStore;
use crate::trellis::{
    check_input_extent, cost_head, exit_unit, feature_channels, level_extent, Stem, TrellisConfig,
    DOWNSAMPLING,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteConfig {
    pub base_filters: usize,
    pub residual: bool,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            base_filters: 4,
            residual: true,
        }
    }
}

/// A cell with two fixed operations per intermediate node.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub kind: CellKind,
    pub channels: usize,
    pub preprocess: Preprocess,
    /// `nodes[k]` feeds intermediate node `k + 2`: `(source, operation)`.
    pub nodes: Vec<[(usize, CellOp); 2]>,
    pub residual: Option<ConvUnit>,
}

impl DiscreteCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kind: CellKind,
        genotype: &CellGenotype,
        residual: bool,
        in_channels: (usize, usize),
        channels: usize,
    ) -> Self {
        let preprocess = Preprocess::new(store, rng, name, kind, in_channels, channels);
        let nodes = genotype
            .nodes
            .iter()
            .enumerate()
            .map(|(k, edges)| {
                edges.map(|(src, op)| {
                    let n = format!("{name}.n{}.from{src}.{}", k + INPUT_NODES, op.name());
                    (src, CellOp::new(store, rng, &n, op, kind, channels))
                })
            })
            .collect();
        let residual = residual_unit(
            store,
            rng,
            name,
            &CellTopology::new(residual),
            kind,
            channels,
        );
        Self {
            kind,
            channels,
            preprocess,
            nodes,
            residual,
        }
    }

    pub fn output_channels(&self) -> usize {
        INTERMEDIATE_NODES * self.channels
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        c_prev_prev: Var,
        c_prev: Var,
        target_resolution: &[usize],
    ) -> Result<Var> {
        let (s0, s1) = self
            .preprocess
            .forward(g, store, c_prev_prev, c_prev, target_resolution)?;
        check_aligned(g, s0, s1, self.channels)?;
        let mut states = vec![s0, s1];
        for edges in &self.nodes {
            let a = edges[0].1.apply(g, store, states[edges[0].0])?;
            let b = edges[1].1.apply(g, store, states[edges[1].0])?;
            states.push(g.add(&[a, b])?);
        }
        finish_cell(g, store, &states[INPUT_NODES..], s1, self.residual.as_ref())
    }
}

/// Cells along a level path; layer `l` reads layers `l - 1` and `l - 2`
/// (the stem stands in for missing ones).
#[derive(Clone, Debug)]
pub struct DiscreteTrellis {
    pub config: TrellisConfig,
    pub path: Vec<usize>,
    pub cells: Vec<DiscreteCell>,
    /// `(from, to, alignment)`: the output of layer `from` is added to the
    /// output of layer `to`, through a 1×1 convolution when channels differ.
    pub skips: Vec<(usize, usize, Option<ConvUnit>)>,
}

impl DiscreteTrellis {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kind: CellKind,
        cell: &CellGenotype,
        path: &[usize],
        skips: &[(usize, usize)],
        base_filters: usize,
        residual: bool,
        stem_channels: usize,
    ) -> Self {
        let config = TrellisConfig::new(path.len(), base_filters);
        let out_c = |l: usize| INTERMEDIATE_NODES * config.channels(path[l]);
        let cells = (0..path.len())
            .map(|l| {
                let prev = if l == 0 { stem_channels } else { out_c(l - 1) };
                let prev_prev = if l < 2 { stem_channels } else { out_c(l - 2) };
                DiscreteCell::new(
                    store,
                    rng,
                    &format!("{name}.cell{l}"),
                    kind,
                    cell,
                    residual,
                    (prev_prev, prev),
                    config.channels(path[l]),
                )
            })
            .collect();
        let skips = skips
            .iter()
            .map(|&(from, to)| {
                let align = (out_c(from) != out_c(to)).then(|| {
                    exit_unit(
                        store,
                        rng,
                        &format!("{name}.skip{from}-{to}"),
                        kind.spatial_axes(),
                        out_c(from),
                        out_c(to),
                    )
                });
                (from, to, align)
            })
            .collect();
        Self {
            config,
            path: path.to_vec(),
            cells,
            skips,
        }
    }

    /// Output of the last layer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stem: Var) -> Result<Var> {
        let level0 = spatial(g, stem);
        let mut h: Vec<Var> = Vec::with_capacity(self.cells.len());
        for (l, cell) in self.cells.iter().enumerate() {
            let target = level_extent(&level0, self.path[l]);
            let prev = if l == 0 { stem } else { h[l - 1] };
            let prev_prev = if l < 2 { stem } else { h[l - 2] };
            let mut out = cell.forward(g, store, prev_prev, prev, &target)?;
            for (from, _, align) in self.skips.iter().filter(|s| s.1 == l) {
                let x = g.interpolate(h[*from], &target)?;
                let x = match align {
                    Some(unit) => unit.forward(g, store, x)?,
                    None => x,
                };
                out = g.add(&[out, x])?;
            }
            h.push(out);
        }
        Ok(h.pop().expect("non-empty path"))
    }

    fn exit_channels(&self) -> usize {
        self.cells.last().expect("non-empty path").output_channels()
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteFeatureNet {
    pub stem: Stem,
    pub trellis: DiscreteTrellis,
    pub exit: ConvUnit,
}

impl DiscreteFeatureNet {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        check_input_extent(g.shape(image), DOWNSAMPLING.len())?;
        let stem = self.stem.forward(g, store, image)?;
        let target = spatial(g, stem);
        let y = self.trellis.forward(g, store, stem)?;
        let y = self.exit.forward(g, store, y)?;
        g.interpolate(y, &target)
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteMatchingNet {
    pub trellis: DiscreteTrellis,
    pub exit: ConvUnit,
    pub head: ConvUnit,
}

impl DiscreteMatchingNet {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<Var> {
        let target = spatial(g, volume);
        let y = self.trellis.forward(g, store, volume)?;
        let y = self.exit.forward(g, store, y)?;
        let y = g.interpolate(y, &target)?;
        self.head.forward(g, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteNet {
    pub genotype: Genotype,
    pub config: DiscreteConfig,
    pub feature: DiscreteFeatureNet,
    pub matching: DiscreteMatchingNet,
}

/// Builds the network for `genotype` with freshly initialised weights.
pub fn build_discrete(
    genotype: &Genotype,
    config: &DiscreteConfig,
    seed: u64,
) -> Result<(DiscreteNet, ParamStore)> {
    genotype.validate()?;
    let mut store = ParamStore::new();
    let mut rng = rng::derived(seed, rng::STREAM_INIT);
    let f0 = config.base_filters;
    let stem_c = INTERMEDIATE_NODES * f0;
    let cf = feature_channels(f0);
    let stem = Stem::new(&mut store, &mut rng, "fea", stem_c);
    let ftrellis = DiscreteTrellis::new(
        &mut store,
        &mut rng,
        "fea",
        CellKind::Feature,
        &genotype.feature_cell,
        &genotype.feature_path,
        &[],
        f0,
        config.residual,
        stem_c,
    );
    let fexit = exit_unit(&mut store, &mut rng, "fea.exit", 2, ftrellis.exit_channels(), cf);
    let mtrellis = DiscreteTrellis::new(
        &mut store,
        &mut rng,
        "mat",
        CellKind::Matching,
        &genotype.matching_cell,
        &genotype.matching_path,
        &genotype.extra_skips,
        f0,
        config.residual,
        2 * cf,
    );
    let mexit = exit_unit(&mut store, &mut rng, "mat.exit", 3, mtrellis.exit_channels(), f0);
    let head = cost_head(&mut store, &mut rng, "mat", f0);
    Ok((
        DiscreteNet {
            genotype: genotype.clone(),
            config: config.clone(),
            feature: DiscreteFeatureNet {
                stem,
                trellis: ftrellis,
                exit: fexit,
            },
            matching: DiscreteMatchingNet {
                trellis: mtrellis,
                exit: mexit,
                head,
            },
        },
        store,
    ))
}

impl StereoNet for DiscreteNet {
    fn features(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        self.feature.forward(g, store, image)
    }

    fn costs(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<Var> {
        if g.shape(volume).len() != 5 || channels(g, volume) != 2 * feature_channels(self.config.base_filters) {
            return crate::error::shape_err(format!(
                "matching net expects a [N, {}, D, H, W] volume, got {:?}",
                2 * feature_channels(self.config.base_filters),
                g.shape(volume)
            ));
        }
        self.matching.forward(g, store, volume)
    }
}
