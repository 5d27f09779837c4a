//! Raw forward/backward loops behind the graph primitives.

pub(crate) mod conv;
pub(crate) mod filter;
pub(crate) mod resample;
