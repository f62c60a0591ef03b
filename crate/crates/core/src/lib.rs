//! RIS phase-shift optimization with a fully convolutional network and
//! MMSE / WMMSE precoding at the base station.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod error;
pub mod evaluation;
pub mod fcn;
pub mod head;
pub mod numerics;
pub mod precoding;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
