//! Exhaustive reference implementations of the decoders, shared by the
//! decoding tests and the acceptance run.

use rand::Rng as _;
use stereonas::cell::{CellTopology, OpKind, OperationSet, INPUT_NODES, INTERMEDIATE_NODES};
use stereonas::decode::{softmax, PathScores};
use stereonas::genotype::Edge;
use stereonas::rng::Rng;
use stereonas::trellis::{BetaValues, TrellisConfig};

/// Either continuous logits or small integers, which produce exact ties.
pub fn draw(rng: &mut Rng, discrete: bool) -> f64 {
    if discrete {
        rng.gen_range(0..3) as f64
    } else {
        rng.gen_range(-2.0..2.0)
    }
}

pub fn random_beta(cfg: &TrellisConfig, rng: &mut Rng, discrete: bool) -> BetaValues {
    BetaValues {
        into: (0..cfg.layers)
            .map(|l| {
                (0..=cfg.max_level(l))
                    .map(|s| (0..cfg.sources(l, s).len()).map(|_| draw(rng, discrete)).collect())
                    .collect()
            })
            .collect(),
        exit: (0..=cfg.max_level(cfg.layers - 1)).map(|_| draw(rng, discrete)).collect(),
    }
}

pub fn random_alpha(topo: &CellTopology, opset: &OperationSet, rng: &mut Rng, discrete: bool) -> Vec<Vec<f64>> {
    topo.edges
        .iter()
        .map(|_| (0..opset.len()).map(|_| draw(rng, discrete)).collect())
        .collect()
}

/// Every level sequence starting at level 0 with steps of at most one level.
pub fn all_paths(cfg: &TrellisConfig) -> Vec<Vec<usize>> {
    let mut paths = vec![vec![0]];
    for l in 1..cfg.layers {
        paths = paths
            .into_iter()
            .flat_map(|p| {
                let last = *p.last().unwrap();
                (0..=cfg.max_level(l))
                    .filter(move |&s| s.abs_diff(last) <= 1)
                    .map(move |s| {
                        let mut q = p.clone();
                        q.push(s);
                        q
                    })
            })
            .collect();
    }
    paths
}

/// Highest score; ties go to the path that is smaller comparing the last
/// layer first.
pub fn enumerate_best(beta: &BetaValues, cfg: &TrellisConfig) -> Vec<usize> {
    let scores = PathScores::new(beta, cfg);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in all_paths(cfg) {
        let s = scores.score(&p).expect("enumerated paths are legal");
        let better = match &best {
            None => true,
            Some((bs, bp)) => s > *bs || (s == *bs && p.iter().rev().lt(bp.iter().rev())),
        };
        if better {
            best = Some((s, p));
        }
    }
    best.unwrap().1
}

/// Pairs of incoming edges ranked by (strength desc, source asc); the best
/// pair is found by comparing every pair against every other.
pub fn brute_force_cell(alpha: &[Vec<f64>], topo: &CellTopology, opset: &OperationSet) -> Vec<[Edge; 2]> {
    let strongest = |e: usize| {
        let p = softmax(&alpha[e]);
        let mut best: Option<(usize, f64)> = None;
        for (r, &op) in opset.ops.iter().enumerate() {
            if op != OpKind::Zero && best.is_none_or(|(_, bp)| p[r] > bp) {
                best = Some((r, p[r]));
            }
        }
        best.unwrap()
    };
    let outranks = |a: (usize, f64), b: (usize, f64)| a.1 > b.1 || (a.1 == b.1 && a.0 < b.0);
    (INPUT_NODES..INPUT_NODES + INTERMEDIATE_NODES)
        .map(|j| {
            let cand: Vec<(usize, usize, f64)> = topo
                .incoming(j)
                .into_iter()
                .map(|e| {
                    let (r, p) = strongest(e);
                    (topo.edges[e].0, r, p)
                })
                .collect();
            let mut chosen = None;
            for a in 0..cand.len() {
                for b in a + 1..cand.len() {
                    let pair = [a, b];
                    let beaten = (0..cand.len()).filter(|k| !pair.contains(k)).any(|k| {
                        pair.iter().any(|&m| {
                            outranks((cand[k].0, cand[k].2), (cand[m].0, cand[m].2))
                        })
                    });
                    if !beaten {
                        chosen = Some(pair);
                    }
                }
            }
            let [a, b] = chosen.expect("a top pair exists");
            let mut kept = [
                (cand[a].0, opset.ops[cand[a].1]),
                (cand[b].0, opset.ops[cand[b].1]),
            ];
            kept.sort_by_key(|e| e.0);
            kept
        })
        .collect()
}
