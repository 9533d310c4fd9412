pub mod config;
pub mod error;
pub mod exact;
pub mod io;
pub mod measurement;
pub mod pipeline;
pub mod quadrature;
pub mod radon;
pub mod registry;
pub mod selftest;
pub mod states;
pub mod su2;
