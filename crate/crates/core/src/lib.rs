#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod config;
pub mod data;
pub mod federation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
