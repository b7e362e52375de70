//! Decoding against exhaustive enumeration, and invariance of the relaxation
//! to per-edge α and per-node β shifts.

mod support;

use support::decoding;

#[test]
fn path_decoding_matches_enumeration() {
    decoding::paths_match_enumeration(100).unwrap();
}

#[test]
fn cell_decoding_matches_brute_force() {
    decoding::cells_match_brute_force(100).unwrap();
}

#[test]
fn arch_shifts_change_neither_outputs_nor_genotypes() {
    decoding::shifts_are_invisible().unwrap();
}
