#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod evaluation;
pub mod experience;
pub mod game;
pub mod hybrid;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod planner;
pub mod selfplay;
pub mod stats;
