//! Quasistatic simulation of shape-memory-alloy specimens with
//! gradient-polyconvex stored energies on structured box grids.
//!
//! The library is organised bottom-up: [`tensor`] kernels, the
//! [`material`] law, [`grid`] stencils and [`fields`], energy [`energy`]
//! assembly, the incremental [`solver`], the time-stepping [`evolution`]
//! driver with its certificates, the analytic [`oracle`] fields, and the
//! [`config`]/[`trace`] I/O used by the command-line front end.

pub mod tensor;
pub mod material;
pub mod grid;
pub mod fields;
pub mod injectivity;
pub mod dump;
pub mod energy;
pub mod solver;
pub mod evolution;
pub mod oracle;
pub mod config;
pub mod trace;
pub mod run;
