#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adversary;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod model;
pub mod regress;
pub mod rng;
pub mod simgen;
pub mod stats;
pub mod study;
pub mod train;

pub use error::{Error, Result};
