//! Unit-grained episode segmentation, offline panoramic environments and
//! hybrid teacher/student forcing for instruction-following agents in a
//! synthetic household gridworld.

pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod offline_env;
pub mod par;
pub mod pathing;
pub mod scenegen;
pub mod segmentation;
pub mod training;
pub mod world;

pub use error::{Error, Result};
