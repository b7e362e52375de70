//! Decoders against their exhaustive oracles, and invariance of the
//! relaxation to α and β shifts.

use rand::Rng as _;
use stereonas::cell::{CellKind, CellTopology, OperationSet, OpsetVariant};
use stereonas::data::{generate_rds, RdsSpec};
use stereonas::decode::{decode_cell, decode_path, decode_supernet};
use stereonas::rng::{self, Rng};
use stereonas::stereo::{full_forward, SuperNet, SuperNetConfig};
use stereonas::trellis::TrellisConfig;
use stereonas::ParamStore;

use super::oracles::{brute_force_cell, enumerate_best, random_alpha, random_beta};

type Check = Result<String, String>;

/// `per_layer_count` random β for every trellis depth from 2 to 6 layers;
/// odd cases use small integers so that exact ties occur.
pub fn paths_match_enumeration(per_layer_count: usize) -> Check {
    let mut r = rng::seeded(21);
    let mut ties = 0;
    for layers in 2..=6 {
        let cfg = TrellisConfig::new(layers, 4);
        for case in 0..per_layer_count {
            let discrete = case % 2 == 1;
            let beta = random_beta(&cfg, &mut r, discrete);
            let (got, want) = (decode_path(&beta, &cfg), enumerate_best(&beta, &cfg));
            if got != want {
                return Err(format!("L = {layers}, case {case}: decoded {got:?}, enumeration {want:?}"));
            }
            ties += usize::from(discrete);
        }
        let mut uniform = random_beta(&cfg, &mut r, false);
        uniform.into.iter_mut().flatten().flatten().for_each(|v| *v = 0.0);
        uniform.exit.iter_mut().for_each(|v| *v = 0.0);
        let got = decode_path(&uniform, &cfg);
        if got != enumerate_best(&uniform, &cfg) || got != vec![0; layers] {
            return Err(format!("L = {layers}: uniform β decoded to {got:?}"));
        }
    }
    Ok(format!("{} path instances ({ties} with integer ties) match", 5 * per_layer_count))
}

pub fn cells_match_brute_force(count: usize) -> Check {
    let mut r = rng::seeded(22);
    for case in 0..count {
        let residual = case % 3 != 0;
        let variant = if case % 2 == 0 { OpsetVariant::Reduced } else { OpsetVariant::Large };
        let kind = if case % 5 == 0 { CellKind::Matching } else { CellKind::Feature };
        let topo = CellTopology::new(residual);
        let opset = OperationSet::new(kind, variant);
        let alpha = random_alpha(&topo, &opset, &mut r, case % 4 >= 2);
        let decoded = decode_cell(&alpha, &topo, &opset);
        if decoded.nodes != brute_force_cell(&alpha, &topo, &opset) {
            return Err(format!("cell case {case} differs from brute force"));
        }
        decoded.validate().map_err(|e| format!("cell case {case}: {e}"))?;
    }
    Ok(format!("{count} cell instances match"))
}

fn randomise_arch(store: &mut ParamStore, r: &mut Rng) {
    for id in store.ids_in(|g| g.is_arch()) {
        for v in store.tensor_mut(id).values_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Shifts every α edge vector and every β node vector of a supernet by its
/// own constant and compares outputs and decoded genotypes.
pub fn shifts_are_invisible() -> Check {
    let config = SuperNetConfig {
        feature_layers: 3,
        matching_layers: 4,
        ..SuperNetConfig::default()
    };
    let sample = generate_rds(&RdsSpec::random(24, 48, 0.5, 12, 9)).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(23);
    let mut worst = 0.0_f64;
    for randomised in [false, true] {
        let (net, mut store) = SuperNet::new(config.clone(), 5);
        if randomised {
            randomise_arch(&mut store, &mut r);
        }
        let run = |s: &ParamStore| full_forward(&net, s, &[&sample], 12).map_err(|e| e.to_string());
        let before = run(&store)?;
        let genotype = decode_supernet(&net, &store, &[]);
        let mut shifted = store.clone();
        for id in shifted.ids_in(|g| g.is_arch()) {
            let c = r.gen_range(-3.0..3.0);
            for v in shifted.tensor_mut(id).values_mut() {
                *v += c;
            }
        }
        let after = run(&shifted)?;
        let d = sup_diff(before.disparity_tensor().values(), after.disparity_tensor().values())
            .max((before.loss_value() - after.loss_value()).abs());
        if !(d < 1e-10) {
            return Err(format!("outputs moved by {d:e}"));
        }
        if decode_supernet(&net, &shifted, &[]) != genotype {
            return Err("decoded genotype changed".into());
        }
        worst = worst.max(d);
    }
    Ok(format!("largest output change {worst:.1e}, genotypes identical"))
}
