pub mod domain;
pub mod matcomp;
pub mod policy;
pub mod scheduler;
pub mod simworld;
pub mod analysis;
pub mod cli;
