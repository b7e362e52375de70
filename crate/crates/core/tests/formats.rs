mod support;

use stereonas::genotype::Genotype;
use support::io;

#[test]
fn pfm_round_trip_is_bitwise() {
    io::pfm_round_trip(1000).unwrap();
}

#[test]
fn genotype_text_is_byte_stable() {
    io::genotype_round_trip(200).unwrap();
}

#[test]
fn shipped_genotype_builds_and_runs() {
    io::shipped_genotype().unwrap();
}

#[test]
fn shipped_genotype_keeps_the_hand_added_skips() {
    let text = std::fs::read_to_string(io::shipped_genotype_path()).unwrap();
    let g = Genotype::parse(&text).unwrap();
    assert_eq!(g.extra_skips, vec![(2, 5), (5, 9)]);
    assert_eq!(g.feature_path.len(), 6);
    assert_eq!(g.matching_path.len(), 12);
    // The feature trellis leaves the finest level somewhere.
    assert!(g.feature_path.iter().any(|&s| s > 0));
}
