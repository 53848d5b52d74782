// Load errors carry the offending labels; they are rare and not worth boxing.
#![allow(clippy::result_large_err)]

pub mod api;
pub mod audit;
pub mod bicond;
pub mod canonical;
pub mod capability;
pub mod cli;
pub mod config;
pub mod ensemble;
pub mod gate;
pub mod hash;
pub mod lattice;
pub mod runtime;
pub mod skillpkg;
pub mod synth;
pub mod trustroot;
