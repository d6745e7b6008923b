//! Simulation core of the NV teaching lab: spin dynamics, photophysics,
//! pulse compilation, the virtual bench, experiment runners and fitting.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod apparatus;
pub mod experiment;
pub mod photophysics;
pub mod pulse;
pub mod rng;
pub mod spin;
