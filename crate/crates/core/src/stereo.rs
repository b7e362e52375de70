//! Feature volume → Matching Net → soft-argmin projection → smooth-ℓ1 loss,
//! and the search-phase supernet that plugs into it.

use crate::cell::{CellKind, OperationSet, OpsetVariant};
use crate::data::StereoSample;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::trellis::{feature_channels, SearchFeatureNet, SearchMatchingNet, TrellisConfig};

/// Anything that maps images to features and feature volumes to costs.
pub trait StereoNet {
    /// `[N, 3, H, W]` image batch → `[N, C, H', W']` features.
    fn features(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var>;
    /// `[N, 2C, D', H', W']` volume → `[N, 1, D'', H'', W'']` costs.
    fn costs(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<Var>;
}

/// 4D feature volume from left/right features with `shifts` disparity levels.
/// Out-of-frame right samples are zero.
pub fn build_feature_volume(g: &mut Graph, left: Var, right: Var, shifts: usize) -> Result<Var> {
    g.feature_volume(left, right, shifts)
}

/// Number of volume disparity levels for features at `1/downsampling` scale.
pub fn volume_disparities(max_disparity: usize, downsampling: usize, feature_width: usize) -> usize {
    max_disparity.div_ceil(downsampling).clamp(1, feature_width)
}

/// Trilinearly upsamples `cost` to `[N, 1, max_disparity, H, W]` and returns
/// the soft-argmin `Σ_d d · softmax_d(-cost)` as an `[N, H, W]` map.
pub fn project_disparity(
    g: &mut Graph,
    cost: Var,
    full_res: (usize, usize),
    max_disparity: usize,
) -> Result<Var> {
    let s = g.shape(cost).to_vec();
    if s.len() != 5 || s[1] != 1 {
        return shape_err(format!("cost volume must be [N, 1, D, H, W], got {s:?}"));
    }
    let up = g.interpolate(cost, &[max_disparity, full_res.0, full_res.1])?;
    let neg = g.scale(up, -1.0);
    let p = g.softmax(neg, 2)?;
    g.disparity_expectation(p)
}

/// Mean smooth-ℓ1 over valid pixels.
pub fn smooth_l1_loss(g: &mut Graph, pred: Var, gt: &[f64], mask: &[bool]) -> Result<Var> {
    g.smooth_l1(pred, gt, mask)
}

/// Result of one end-to-end forward pass; the graph is kept for backward.
pub struct ForwardPass {
    pub graph: Graph,
    pub disparity: Var,
    pub loss: Var,
}

impl ForwardPass {
    pub fn loss_value(&self) -> f64 {
        self.graph.scalar(self.loss)
    }

    pub fn disparity_tensor(&self) -> Tensor {
        self.graph.tensor(self.disparity)
    }
}

/// Stacks samples into `[N, 3, H, W]` left/right batches plus flat targets.
pub fn stack_batch(samples: &[&StereoSample]) -> Result<(Tensor, Tensor, Vec<f64>, Vec<bool>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut gt = Vec::new();
    let mut mask = Vec::new();
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return shape_err(format!(
                "batch mixes {h}x{w} with {}x{} samples",
                s.height(),
                s.width()
            ));
        }
        left.extend_from_slice(s.left.values());
        right.extend_from_slice(s.right.values());
        gt.extend_from_slice(s.disparity.values());
        mask.extend_from_slice(&s.valid);
    }
    let n = samples.len();
    Ok((
        Tensor::new(vec![n, 3, h, w], left)?,
        Tensor::new(vec![n, 3, h, w], right)?,
        gt,
        mask,
    ))
}

/// Prediction only: features of both views (shared weights), volume,
/// matching, projection.
pub fn predict(
    net: &impl StereoNet,
    store: &ParamStore,
    g: &mut Graph,
    left: &Tensor,
    right: &Tensor,
    max_disparity: usize,
) -> Result<Var> {
    let (h, w) = (left.shape()[2], left.shape()[3]);
    let l = g.constant(left);
    let r = g.constant(right);
    let fl = net.features(g, store, l)?;
    let fr = net.features(g, store, r)?;
    let fw = g.shape(fl)[3];
    let shifts = volume_disparities(max_disparity, w / fw, fw);
    let volume = build_feature_volume(g, fl, fr, shifts)?;
    let cost = net.costs(g, store, volume)?;
    project_disparity(g, cost, (h, w), max_disparity)
}

/// End-to-end forward with loss over a batch.
pub fn full_forward(
    net: &impl StereoNet,
    store: &ParamStore,
    samples: &[&StereoSample],
    max_disparity: usize,
) -> Result<ForwardPass> {
    full_forward_in(Graph::new(), net, store, samples, max_disparity)
}

/// [`full_forward`] recorded into a caller-configured graph.
pub fn full_forward_in(
    mut graph: Graph,
    net: &impl StereoNet,
    store: &ParamStore,
    samples: &[&StereoSample],
    max_disparity: usize,
) -> Result<ForwardPass> {
    let (left, right, gt, mask) = stack_batch(samples)?;
    let disparity = predict(net, store, &mut graph, &left, &right, max_disparity)?;
    let loss = smooth_l1_loss(&mut graph, disparity, &gt, &mask)?;
    Ok(ForwardPass {
        graph,
        disparity,
        loss,
    })
}

/// Architecture of the search-phase network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperNetConfig {
    pub base_filters: usize,
    pub feature_layers: usize,
    pub matching_layers: usize,
    pub opset: OpsetVariant,
    pub residual: bool,
}

impl Default for SuperNetConfig {
    fn default() -> Self {
        Self {
            base_filters: 4,
            feature_layers: 6,
            matching_layers: 12,
            opset: OpsetVariant::Reduced,
            residual: true,
        }
    }
}

/// Feature Net and Matching Net supernets with their α and β.
#[derive(Clone, Debug)]
pub struct SuperNet {
    pub config: SuperNetConfig,
    pub feature: SearchFeatureNet,
    pub matching: SearchMatchingNet,
}

impl SuperNet {
    /// Builds the network and a freshly initialised parameter store.
    pub fn new(config: SuperNetConfig, seed: u64) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = rng::derived(seed, rng::STREAM_INIT);
        let feature = SearchFeatureNet::new(
            &mut store,
            &mut rng,
            TrellisConfig::feature_default(config.base_filters).with_layers(config.feature_layers),
            OperationSet::new(CellKind::Feature, config.opset),
            config.residual,
        );
        let matching = SearchMatchingNet::new(
            &mut store,
            &mut rng,
            TrellisConfig::matching_default(config.base_filters).with_layers(config.matching_layers),
            OperationSet::new(CellKind::Matching, config.opset),
            config.residual,
            2 * feature_channels(config.base_filters),
        );
        (
            Self {
                config,
                feature,
                matching,
            },
            store,
        )
    }

    pub fn feature_arch_ids(&self) -> Vec<ParamId> {
        self.feature.trellis.arch_ids()
    }

    pub fn matching_arch_ids(&self) -> Vec<ParamId> {
        self.matching.trellis.arch_ids()
    }
}

impl StereoNet for SuperNet {
    fn features(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        self.feature.forward(g, store, image)
    }

    fn costs(&self, g: &mut Graph, store: &ParamStore, volume: Var) -> Result<Var> {
        self.matching.forward(g, store, volume)
    }
}

/// Disparity metrics pooled over every valid pixel of a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub epe: f64,
    pub bad1: f64,
    pub samples: usize,
}

/// Predicts each sample at full resolution and scores it.
pub fn evaluate(
    net: &impl StereoNet,
    store: &ParamStore,
    samples: &[&StereoSample],
    max_disparity: usize,
) -> Result<EvalReport> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut mask = Vec::new();
    for s in samples {
        let (left, right, g_t, m) = stack_batch(&[s])?;
        let mut g = Graph::new();
        let d = predict(net, store, &mut g, &left, &right, max_disparity)?;
        pred.extend_from_slice(g.value(d));
        gt.extend(g_t);
        mask.extend(m);
    }
    Ok(EvalReport {
        epe: crate::data::epe(&pred, &gt, &mask)?,
        bad1: crate::data::bad_n(&pred, &gt, &mask, 1.0)?,
        samples: samples.len(),
    })
}
