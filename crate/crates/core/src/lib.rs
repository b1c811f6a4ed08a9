//! Spectral, information-theoretic and distillation analyses of transformer
//! activation stacks, plus the `ddyn` command-line front end.

pub mod cli;
pub mod distill;
pub mod infodyn;
mod io_util;
pub mod rng;
pub mod spectral;
pub mod synth;
pub mod tensor;
