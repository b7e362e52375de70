#![allow(dead_code)]

pub mod closed_forms;
pub mod decoding;
pub mod gradients;
pub mod io;
pub mod oracles;
