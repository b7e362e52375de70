//! Network-level search space: an L-layer trellis of cells over four
//! resolution levels, routed by β, plus the Feature Net stem and the search
//! phase exits of both sub-networks.

use crate::cell::{CellAlpha, CellKind, CellTopology, MixedCell, OperationSet, INTERMEDIATE_NODES};
use crate::error::{shape_err, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::nn::{spatial, ConvUnit};
use crate::rng::Rng;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor};

/// Per-level downsampling factors from full resolution.
pub const DOWNSAMPLING: [usize; 4] = [3, 2, 2, 2];

/// Cumulative downsampling of level `s` relative to full resolution.
pub fn cumulative_downsampling(level: usize) -> usize {
    DOWNSAMPLING[..=level].iter().product()
}

/// Required divisor of the input image extents.
pub fn input_divisor(levels: usize) -> usize {
    cumulative_downsampling(levels - 1)
}

/// Full-resolution `(H, W)` of each Feature Net level.
pub fn feature_level_resolutions(h: usize, w: usize, levels: usize) -> Vec<(usize, usize)> {
    (0..levels)
        .map(|s| {
            let f = cumulative_downsampling(s);
            (h / f, w / f)
        })
        .collect()
}

/// Extents of level `s` given level-0 extents; each level halves every axis,
/// rounding up so that short axes (the disparity axis) never vanish.
pub fn level_extent(level0: &[usize], level: usize) -> Vec<usize> {
    level0
        .iter()
        .map(|&e| (0..level).fold(e, |acc, _| acc.div_ceil(2)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrellisConfig {
    pub layers: usize,
    pub levels: usize,
    /// Node channels at level 0; level `s` uses `base_filters · 2^s`.
    pub base_filters: usize,
}

impl TrellisConfig {
    pub fn new(layers: usize, base_filters: usize) -> Self {
        Self {
            layers,
            levels: DOWNSAMPLING.len(),
            base_filters,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn feature_default(base_filters: usize) -> Self {
        Self::new(6, base_filters)
    }

    pub fn matching_default(base_filters: usize) -> Self {
        Self::new(12, base_filters)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Deepest level reachable at `layer` from level 0 at layer 0.
    pub fn max_level(&self, layer: usize) -> usize {
        layer.min(self.levels - 1)
    }

    /// Source levels of the arrows entering `(layer, level)`, ascending.
    /// Layer 0 is fed by the stem and has no arrows.
    pub fn sources(&self, layer: usize, level: usize) -> Vec<usize> {
        if layer == 0 {
            return Vec::new();
        }
        let top = self.max_level(layer - 1);
        [level.wrapping_sub(1), level, level + 1]
            .into_iter()
            .filter(|&s| s <= top)
            .collect()
    }
}

/// β logits, one per legal arrow: `into[l][s]` holds the arrows entering
/// node `(l, s)` ordered by source level; `exit` selects among the last
/// layer's levels.
#[derive(Clone, Debug)]
pub struct BetaParams {
    pub into: Vec<Vec<Option<ParamId>>>,
    pub exit: ParamId,
}

/// Plain values of [`BetaParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct BetaValues {
    pub into: Vec<Vec<Vec<f64>>>,
    pub exit: Vec<f64>,
}

impl BetaParams {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, cfg: &TrellisConfig) -> Self {
        let into = (0..cfg.layers)
            .map(|l| {
                (0..=cfg.max_level(l))
                    .map(|s| {
                        let n = cfg.sources(l, s).len();
                        (n > 0).then(|| {
                            store.add(format!("{name}.beta.{l}.{s}"), group, Tensor::zeros(vec![n]))
                        })
                    })
                    .collect()
            })
            .collect();
        let exit_n = cfg.max_level(cfg.layers - 1) + 1;
        let exit = store.add(format!("{name}.beta.exit"), group, Tensor::zeros(vec![exit_n]));
        Self { into, exit }
    }

    pub fn values(&self, store: &ParamStore) -> BetaValues {
        BetaValues {
            into: self
                .into
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|p| p.map(|id| store.tensor(id).values().to_vec()).unwrap_or_default())
                        .collect()
                })
                .collect(),
            exit: store.tensor(self.exit).values().to_vec(),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.into
            .iter()
            .flatten()
            .flatten()
            .copied()
            .chain(std::iter::once(self.exit))
            .collect()
    }
}

/// The supernet trellis of one sub-network.
#[derive(Clone, Debug)]
pub struct SearchTrellis {
    pub config: TrellisConfig,
    pub opset: OperationSet,
    pub topology: CellTopology,
    pub alpha: CellAlpha,
    pub beta: BetaParams,
    /// `cells[l][s]` holds one cell per arrow entering `(l, s)` (one stem-fed
    /// cell at layer 0), in the order of [`TrellisConfig::sources`].
    pub cells: Vec<Vec<Vec<MixedCell>>>,
    pub stem_channels: usize,
}

impl SearchTrellis {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        group: ParamGroup,
        config: TrellisConfig,
        opset: OperationSet,
        residual: bool,
        stem_channels: usize,
    ) -> Self {
        let topology = CellTopology::new(residual);
        let alpha = CellAlpha::new(store, name, group, &topology, &opset);
        let beta = BetaParams::new(store, name, group, &config);
        let out_c = |s: usize| INTERMEDIATE_NODES * config.channels(s);
        let mut cells = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut row = Vec::new();
            for s in 0..=config.max_level(l) {
                let srcs = if l == 0 { vec![0] } else { config.sources(l, s) };
                let node_cells = srcs
                    .iter()
                    .map(|&src| {
                        let p_c = if l == 0 { stem_channels } else { out_c(src) };
                        let pp_c = match l {
                            0 => stem_channels,
                            1 if s == 0 => stem_channels,
                            _ if l >= 2 && s <= config.max_level(l - 2) => out_c(s),
                            _ => p_c,
                        };
                        MixedCell::new(
                            store,
                            rng,
                            &format!("{name}.cell{l}.{s}.from{src}"),
                            &topology,
                            &opset,
                            (pp_c, p_c),
                            config.channels(s),
                        )
                    })
                    .collect();
                row.push(node_cells);
            }
            cells.push(row);
        }
        Self {
            config,
            opset,
            topology,
            alpha,
            beta,
            cells,
            stem_channels,
        }
    }

    pub fn kind(&self) -> CellKind {
        self.opset.kind
    }

    /// Runs every layer; returns the last layer's activation per level.
    ///
    /// `h[l][s] = Σ_a softmax(β_(l,s))_a · cell(h[l-2][s], h[l-1][src(a)])`,
    /// with the stem standing in for missing layer -1/-2 activations at level
    /// 0, and `h[l-1][src(a)]` standing in for any other missing `h[l-2][s]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, stem: Var) -> Result<Vec<Var>> {
        let mixing = self.alpha.mixing_weights(g, store)?;
        let level0 = spatial(g, stem);
        let cfg = &self.config;
        let mut h: Vec<Vec<Var>> = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut row = Vec::new();
            for s in 0..=cfg.max_level(l) {
                let target = level_extent(&level0, s);
                if l == 0 {
                    let cell = &self.cells[0][0][0];
                    row.push(cell.forward(g, store, &mixing, stem, stem, &target)?);
                    continue;
                }
                let srcs = cfg.sources(l, s);
                let mut outs = Vec::with_capacity(srcs.len());
                for (k, &src) in srcs.iter().enumerate() {
                    let prev = h[l - 1][src];
                    let prev_prev = if l == 1 && s == 0 {
                        stem
                    } else if l >= 2 && s <= cfg.max_level(l - 2) {
                        h[l - 2][s]
                    } else {
                        prev
                    };
                    let cell = &self.cells[l][s][k];
                    outs.push((k, cell.forward(g, store, &mixing, prev_prev, prev, &target)?));
                }
                let beta = self.beta.into[l][s].expect("node with arrows has β");
                let b = g.param(store, beta);
                let w = g.softmax(b, 0)?;
                row.push(g.mix(w, &outs)?);
            }
            h.push(row);
        }
        Ok(h.pop().expect("at least one layer"))
    }

    pub fn arch_ids(&self) -> Vec<ParamId> {
        let mut ids = self.alpha.edges.clone();
        ids.extend(self.beta.ids());
        ids
    }
}

/// Combines the last layer's levels: each level is channel-aligned by its
/// exit unit, resampled to level 0 and weighted by `softmax(β_exit)`.
fn search_exit(
    g: &mut Graph,
    store: &ParamStore,
    levels: &[Var],
    units: &[ConvUnit],
    exit_beta: ParamId,
) -> Result<Var> {
    let target = spatial(g, levels[0]);
    let mut terms = Vec::with_capacity(levels.len());
    for (s, (&x, unit)) in levels.iter().zip(units).enumerate() {
        let y = unit.forward(g, store, x)?;
        terms.push((s, g.interpolate(y, &target)?));
    }
    let b = g.param(store, exit_beta);
    let w = g.softmax(b, 0)?;
    g.mix(w, &terms)
}

/// Three fixed 3×3 convolutions; the first has stride 3.
#[derive(Clone, Debug)]
pub struct Stem {
    pub layers: [ConvUnit; 3],
}

impl Stem {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        let first = ConvSpec::new(2, 3, channels, 3)
            .stride(DOWNSAMPLING[0])
            .padding(0)
            .affine(true);
        let rest = ConvSpec::new(2, channels, channels, 3).affine(true);
        Self {
            layers: [
                ConvUnit::new(store, rng, &format!("{name}.stem0"), first, true),
                ConvUnit::new(store, rng, &format!("{name}.stem1"), rest.clone(), true),
                ConvUnit::new(store, rng, &format!("{name}.stem2"), rest, true),
            ],
        }
    }

    pub fn channels(&self) -> usize {
        self.layers[2].spec.out_channels
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let mut x = image;
        for unit in &self.layers {
            x = unit.forward(g, store, x)?;
        }
        Ok(x)
    }
}

/// Rejects images whose extents the trellis cannot divide evenly.
pub fn check_input_extent(shape: &[usize], levels: usize) -> Result<()> {
    let div = input_divisor(levels);
    let [_, 3, h, w] = *shape else {
        return shape_err(format!("expected an [N, 3, H, W] image, got {shape:?}"));
    };
    if h % div != 0 || w % div != 0 {
        let pad_h = (div - h % div) % div;
        let pad_w = (div - w % div) % div;
        return shape_err(format!(
            "image extent {h}x{w} is not divisible by {div}; pad by {pad_h} rows and {pad_w} columns"
        ));
    }
    Ok(())
}

/// Search-phase Feature Net: stem, trellis of 2D cells, β-weighted exit.
#[derive(Clone, Debug)]
pub struct SearchFeatureNet {
    pub stem: Stem,
    pub trellis: SearchTrellis,
    pub exit_units: Vec<ConvUnit>,
    pub out_channels: usize,
}

impl SearchFeatureNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        config: TrellisConfig,
        opset: OperationSet,
        residual: bool,
    ) -> Self {
        let stem_c = INTERMEDIATE_NODES * config.base_filters;
        let out_channels = feature_channels(config.base_filters);
        let stem = Stem::new(store, rng, "fea", stem_c);
        let trellis = SearchTrellis::new(
            store,
            rng,
            "fea",
            ParamGroup::FeatureArch,
            config,
            opset,
            residual,
            stem_c,
        );
        let exit_units = exit_units(store, rng, "fea", &trellis.config, 2, out_channels);
        Self {
            stem,
            trellis,
            exit_units,
            out_channels,
        }
    }

    /// Activations of every level of the last layer, before the exit.
    pub fn trellis_levels(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        check_input_extent(g.shape(image), self.trellis.config.levels)?;
        let stem = self.stem.forward(g, store, image)?;
        self.trellis.forward(g, store, stem)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let levels = self.trellis_levels(g, store, image)?;
        search_exit(g, store, &levels, &self.exit_units, self.trellis.beta.exit)
    }
}

/// Search-phase Matching Net: trellis of 3D cells over the feature volume,
/// β-weighted exit, final 3D convolution to one cost channel.
#[derive(Clone, Debug)]
pub struct SearchMatchingNet {
    pub trellis: SearchTrellis,
    pub exit_units: Vec<ConvUnit>,
    pub head: ConvUnit,
}

impl SearchMatchingNet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        config: TrellisConfig,
        opset: OperationSet,
        residual: bool,
        volume_channels: usize,
    ) -> Self {
        let f0 = config.base_filters;
        let trellis = SearchTrellis::new(
            store,
            rng,
            "mat",
            ParamGroup::MatchingArch,
            config,
            opset,
            residual,
            volume_channels,
        );
        let exit_units = exit_units(store, rng, "mat", &trellis.config, 3, f0);
        let head = cost_head(store, rng, "mat", f0);
        Self {
            trellis,
            exit_units,
            head,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<Var> {
        if g.shape(volume).len() != 5 {
            return shape_err(format!(
                "matching net expects a 5D volume, got {:?}",
                g.shape(volume)
            ));
        }
        let levels = self.trellis.forward(g, store, volume)?;
        let fused = search_exit(g, store, &levels, &self.exit_units, self.trellis.beta.exit)?;
        self.head.forward(g, store, fused)
    }
}

/// Channels of the Feature Net output (per image).
pub fn feature_channels(base_filters: usize) -> usize {
    INTERMEDIATE_NODES * base_filters
}

pub(crate) fn exit_unit(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    axes: usize,
    in_channels: usize,
    out_channels: usize,
) -> ConvUnit {
    let spec = ConvSpec::new(axes, in_channels, out_channels, 1).affine(true);
    ConvUnit::new(store, rng, name, spec, false)
}

fn exit_units(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    cfg: &TrellisConfig,
    axes: usize,
    out_channels: usize,
) -> Vec<ConvUnit> {
    (0..=cfg.max_level(cfg.layers - 1))
        .map(|s| {
            exit_unit(
                store,
                rng,
                &format!("{name}.exit{s}"),
                axes,
                INTERMEDIATE_NODES * cfg.channels(s),
                out_channels,
            )
        })
        .collect()
}

pub(crate) fn cost_head(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> ConvUnit {
    let spec = ConvSpec::new(3, channels, 1, 3);
    ConvUnit::new(store, rng, &format!("{name}.head"), spec, false)
}
