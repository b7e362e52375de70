//! Round trips of the file formats and the shipped genotype.

use std::path::PathBuf;

use rand::Rng as _;
use stereonas::cell::{CellKind, CellTopology, OperationSet, OpsetVariant};
use stereonas::data::pfm::PfmImage;
use stereonas::data::{generate_rds, RdsSpec};
use stereonas::decode::{decode_cell, decode_path};
use stereonas::discrete::{build_discrete, DiscreteConfig};
use stereonas::genotype::Genotype;
use stereonas::rng;
use stereonas::stereo::full_forward;
use stereonas::trellis::TrellisConfig;

use super::oracles::{random_alpha, random_beta};

type Check = Result<String, String>;

/// Finite float32 with a uniformly random bit pattern.
fn random_finite(r: &mut rng::Rng) -> f32 {
    loop {
        let v = f32::from_bits(r.gen());
        if v.is_finite() {
            return v;
        }
    }
}

/// Random grayscale or RGB images of random size whose samples are arbitrary
/// finite bit patterns, subnormals and signed zeros included.
pub fn pfm_round_trip(count: usize) -> Check {
    let mut r = rng::seeded(31);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for case in 0..count {
        let width = r.gen_range(1..40);
        let height = r.gen_range(1..40);
        let channels = if case % 5 == 0 { 3 } else { 1 };
        let data: Vec<f32> = (0..width * height * channels)
            .map(|_| random_finite(&mut r))
            .collect();
        let image = PfmImage::new(width, height, channels, data).map_err(|e| e.to_string())?;
        let bytes = image.to_bytes().map_err(|e| e.to_string())?;
        let back = if case % 10 == 0 {
            let path = dir.path().join(format!("{case}.pfm"));
            image.write(&path).map_err(|e| e.to_string())?;
            PfmImage::read(&path).map_err(|e| e.to_string())?
        } else {
            PfmImage::from_bytes(&bytes).map_err(|e| e.to_string())?
        };
        let same = back.width == width
            && back.height == height
            && back.channels == channels
            && back.data.len() == image.data.len()
            && back.data.iter().zip(&image.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("map {case} ({width}x{height}x{channels}) changed"));
        }
        if back.to_bytes().map_err(|e| e.to_string())? != bytes {
            return Err(format!("map {case} re-encodes differently"));
        }
    }
    Ok(format!("{count} maps bit-identical"))
}

/// Genotypes decoded from random α and β.
pub fn random_genotype(r: &mut rng::Rng) -> Genotype {
    let variant = if r.gen_bool(0.5) { OpsetVariant::Reduced } else { OpsetVariant::Large };
    let topo = CellTopology::new(true);
    let cell = |kind, r: &mut rng::Rng| {
        let opset = OperationSet::new(kind, variant);
        let discrete = r.gen_bool(0.5);
        let alpha = random_alpha(&topo, &opset, r, discrete);
        decode_cell(&alpha, &topo, &opset)
    };
    let path = |layers, r: &mut rng::Rng| {
        let cfg = TrellisConfig::new(layers, 4);
        let discrete = r.gen_bool(0.5);
        let beta = random_beta(&cfg, r, discrete);
        decode_path(&beta, &cfg)
    };
    let matching_layers = r.gen_range(2..13);
    let extra_skips = if matching_layers > 9 { vec![(2, 5), (5, 9)] } else { vec![] };
    Genotype {
        feature_cell: cell(CellKind::Feature, r),
        matching_cell: cell(CellKind::Matching, r),
        feature_path: path(r.gen_range(2..7), r),
        matching_path: path(matching_layers, r),
        extra_skips,
    }
}

pub fn genotype_round_trip(count: usize) -> Check {
    let mut r = rng::seeded(32);
    for case in 0..count {
        let g = random_genotype(&mut r);
        let text = g.to_text();
        let back = Genotype::parse(&text).map_err(|e| format!("case {case}: {e}"))?;
        if back != g {
            return Err(format!("case {case}: parsed genotype differs"));
        }
        if back.to_text() != text {
            return Err(format!("case {case}: text is not byte-stable"));
        }
    }
    Ok(format!("{count} genotypes byte-stable"))
}

pub fn shipped_genotype_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../examples/leastereo.genotype")
}

/// Parses, validates and builds the shipped genotype, then runs it on a toy
/// sample.
pub fn shipped_genotype() -> Check {
    let path = shipped_genotype_path();
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let g = Genotype::parse(&text).map_err(|e| e.to_string())?;
    g.validate().map_err(|e| e.to_string())?;
    let canonical = g.to_text();
    if Genotype::parse(&canonical).map_err(|e| e.to_string())? != g {
        return Err("canonical form of the shipped genotype does not round-trip".into());
    }
    let (net, store) = build_discrete(&g, &DiscreteConfig::default(), 1).map_err(|e| e.to_string())?;
    let sample = generate_rds(&RdsSpec::random(24, 48, 0.5, 12, 1)).map_err(|e| e.to_string())?;
    let loss = full_forward(&net, &store, &[&sample], 12)
        .map_err(|e| e.to_string())?
        .loss_value();
    if !loss.is_finite() {
        return Err(format!("toy loss is {loss}"));
    }
    Ok(format!(
        "{} weights, toy loss {loss:.4}",
        store.weight_count()
    ))
}
