//! Discretisation of continuous architecture parameters.
//!
//! Cells keep, per intermediate node, the two incoming edges whose strongest
//! non-zero operation has the highest softmax weight. Paths maximise the sum
//! of per-node log-softmax β over all legal level sequences plus the exit
//! log-probability of the final level, where each arrow's probability is
//! measured against the uniform choice at its node, `ln(n_in * p)`. Without
//! that offset a node with a single incoming arrow scores 0 while every
//! other node scores at most `-ln 2` under uniform β, so barely trained β
//! would always decode to the steepest descent through the levels. The
//! offset is constant per node, so decoding stays invariant to per-node
//! shifts and uniform β is an exact tie.
//!
//! Ties are broken deterministically: edges by lower source index, then
//! operations by their order in the operation set; paths toward lower levels,
//! comparing the last layer first.

use crate::cell::{CellTopology, OpKind, OperationSet, INPUT_NODES, INTERMEDIATE_NODES};
use crate::genotype::{CellGenotype, Edge, Genotype};
use crate::stereo::SuperNet;
use crate::tensor::ParamStore;
use crate::trellis::{BetaValues, TrellisConfig};

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - m - lz).collect()
}

/// Strongest non-zero operation of one edge: `(index into opset, weight)`.
pub fn strongest_op(probs: &[f64], opset: &OperationSet) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    for (r, (&op, &p)) in opset.ops.iter().zip(probs).enumerate() {
        if op == OpKind::Zero {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((r, p));
        }
    }
    best.expect("operation set has a non-zero operation")
}

/// `alpha[e]` are the logits of edge `e` of `topology`.
pub fn decode_cell(alpha: &[Vec<f64>], topology: &CellTopology, opset: &OperationSet) -> CellGenotype {
    assert_eq!(alpha.len(), topology.edges.len(), "one α vector per edge");
    let nodes = (INPUT_NODES..INPUT_NODES + INTERMEDIATE_NODES)
        .map(|j| {
            let mut candidates: Vec<(usize, usize, f64)> = topology
                .incoming(j)
                .into_iter()
                .map(|e| {
                    let (r, p) = strongest_op(&softmax(&alpha[e]), opset);
                    (topology.edges[e].0, r, p)
                })
                .collect();
            assert!(candidates.len() >= 2, "node {j} has fewer than two inputs");
            // Stable: equal strengths keep ascending source order.
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
            let mut kept: [Edge; 2] = [
                (candidates[0].0, opset.ops[candidates[0].1]),
                (candidates[1].0, opset.ops[candidates[1].1]),
            ];
            kept.sort_by_key(|e| e.0);
            kept
        })
        .collect();
    CellGenotype { nodes }
}

/// Log-probabilities of every arrow, relative to uniform at its node, and of
/// the exit, as used by the path score.
#[derive(Clone, Debug, PartialEq)]
pub struct PathScores {
    pub config: TrellisConfig,
    /// `arrows[l][s][k]` scores the `k`-th source of `(l, s)` as listed by
    /// [`TrellisConfig::sources`].
    pub arrows: Vec<Vec<Vec<f64>>>,
    pub exit: Vec<f64>,
}

impl PathScores {
    pub fn new(beta: &BetaValues, config: &TrellisConfig) -> Self {
        let arrows = beta
            .into
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|b| {
                        let prior = (b.len() as f64).ln();
                        log_softmax(b).into_iter().map(|v| v + prior).collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            config: config.clone(),
            arrows,
            exit: log_softmax(&beta.exit),
        }
    }

    /// Score of arriving at `(layer, level)` from `from` at `layer - 1`.
    pub fn arrow(&self, layer: usize, level: usize, from: usize) -> Option<f64> {
        let k = self
            .config
            .sources(layer, level)
            .iter()
            .position(|&s| s == from)?;
        Some(self.arrows[layer][level][k])
    }

    /// Score of a complete path, summed from the first layer to the exit.
    pub fn score(&self, path: &[usize]) -> Option<f64> {
        let mut total = 0.0;
        for l in 1..path.len() {
            total += self.arrow(l, path[l], path[l - 1])?;
        }
        Some(total + *self.exit.get(*path.last()?)?)
    }
}

/// Maximum-probability path by dynamic programming over layers × levels.
pub fn decode_path(beta: &BetaValues, config: &TrellisConfig) -> Vec<usize> {
    let scores = PathScores::new(beta, config);
    let layers = config.layers;
    let mut best = vec![vec![f64::NEG_INFINITY; config.levels]; layers];
    let mut back = vec![vec![0usize; config.levels]; layers];
    best[0][0] = 0.0;
    for l in 1..layers {
        for s in 0..=config.max_level(l) {
            // Sources ascend, and only a strictly better score replaces the
            // incumbent, so ties resolve toward the lower predecessor level.
            for (k, &src) in config.sources(l, s).iter().enumerate() {
                let cand = best[l - 1][src] + scores.arrows[l][s][k];
                if cand > best[l][s] {
                    best[l][s] = cand;
                    back[l][s] = src;
                }
            }
        }
    }
    let last = layers - 1;
    let mut end = 0;
    let mut end_score = f64::NEG_INFINITY;
    for s in 0..=config.max_level(last) {
        let total = best[last][s] + scores.exit[s];
        if total > end_score {
            end_score = total;
            end = s;
        }
    }
    let mut path = vec![0; layers];
    path[last] = end;
    for l in (1..layers).rev() {
        path[l - 1] = back[l][path[l]];
    }
    path
}

/// Decodes both cells and both paths of a searched supernet.
pub fn decode_supernet(net: &SuperNet, store: &ParamStore, extra_skips: &[(usize, usize)]) -> Genotype {
    let f = &net.feature.trellis;
    let m = &net.matching.trellis;
    let matching_path = decode_path(&m.beta.values(store), &m.config);
    let extra_skips = extra_skips
        .iter()
        .copied()
        .filter(|&(_, to)| to < matching_path.len())
        .collect();
    Genotype {
        feature_cell: decode_cell(&f.alpha.values(store), &f.topology, &f.opset),
        matching_cell: decode_cell(&m.alpha.values(store), &m.topology, &m.opset),
        feature_path: decode_path(&f.beta.values(store), &f.config),
        matching_path,
        extra_skips,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{CellKind, OpsetVariant};

    fn reduced() -> OperationSet {
        OperationSet::new(CellKind::Feature, OpsetVariant::Reduced)
    }

    fn uniform_beta(cfg: &TrellisConfig) -> BetaValues {
        BetaValues {
            into: (0..cfg.layers)
                .map(|l| {
                    (0..=cfg.max_level(l))
                        .map(|s| vec![0.0; cfg.sources(l, s).len()])
                        .collect()
                })
                .collect(),
            exit: vec![0.0; cfg.max_level(cfg.layers - 1) + 1],
        }
    }

    #[test]
    fn strongest_edges_are_kept() {
        let topo = CellTopology::new(true);
        let mut alpha = vec![vec![0.0; 3]; topo.edges.len()];
        // Node 4 has incoming edges from 0, 1, 2 (and 3).
        let into4 = topo.incoming(4);
        alpha[into4[0]] = vec![3.0, 0.0, 0.0];
        alpha[into4[1]] = vec![2.0, 0.0, 0.0];
        alpha[into4[2]] = vec![0.5, 0.0, 0.0];
        alpha[into4[3]] = vec![0.0, 0.0, 0.0];
        let g = decode_cell(&alpha, &topo, &reduced());
        assert_eq!(g.nodes[2], [(0, OpKind::Conv3), (1, OpKind::Conv3)]);
    }

    #[test]
    fn equal_alpha_prefers_low_sources_and_first_op() {
        let topo = CellTopology::new(true);
        let alpha = vec![vec![0.0; 3]; topo.edges.len()];
        let g = decode_cell(&alpha, &topo, &reduced());
        for node in &g.nodes {
            assert_eq!(*node, [(0, OpKind::Conv3), (1, OpKind::Conv3)]);
        }
    }

    #[test]
    fn zero_is_never_selected() {
        let topo = CellTopology::new(false);
        let alpha = vec![vec![-5.0, -5.0, 10.0]; topo.edges.len()];
        let g = decode_cell(&alpha, &topo, &reduced());
        assert!(g.validate().is_ok());
        assert!(g.nodes.iter().flatten().all(|e| e.1 != OpKind::Zero));
    }

    #[test]
    fn two_layer_uniform_beta_stays_at_level_zero() {
        let cfg = TrellisConfig::new(2, 4);
        assert_eq!(decode_path(&uniform_beta(&cfg), &cfg), vec![0, 0]);
    }

    #[test]
    fn uniform_beta_is_an_exact_tie_resolved_to_level_zero() {
        for layers in 1..=12 {
            let cfg = TrellisConfig::new(layers, 4);
            let beta = uniform_beta(&cfg);
            let path = decode_path(&beta, &cfg);
            assert_eq!(path, vec![0; layers]);
            let scores = PathScores::new(&beta, &cfg);
            let diagonal: Vec<usize> = (0..layers).map(|l| l.min(3)).collect();
            assert_eq!(scores.score(&diagonal), scores.score(&path));
        }
    }

    #[test]
    fn single_legal_path() {
        let cfg = TrellisConfig::new(5, 4);
        let target = [0, 1, 2, 2, 1];
        let mut beta = uniform_beta(&cfg);
        for l in 1..cfg.layers {
            for s in 0..=cfg.max_level(l) {
                for (k, &src) in cfg.sources(l, s).iter().enumerate() {
                    let on_path = s == target[l] && src == target[l - 1];
                    beta.into[l][s][k] = if on_path { 0.0 } else { -1e6 };
                }
            }
        }
        for (s, e) in beta.exit.iter_mut().enumerate() {
            *e = if s == 1 { 0.0 } else { -1e6 };
        }
        assert_eq!(decode_path(&beta, &cfg), target);
    }

    #[test]
    fn path_scores_reject_illegal_moves() {
        let cfg = TrellisConfig::new(3, 4);
        let scores = PathScores::new(&uniform_beta(&cfg), &cfg);
        assert!(scores.score(&[0, 1, 2]).is_some());
        assert!(scores.score(&[0, 2, 2]).is_none());
    }
}
