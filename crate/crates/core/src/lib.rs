pub mod error;
pub mod io;
pub mod spectral;
pub mod tree;
pub mod dynamics;
pub mod linalg;
pub mod hum;
pub mod config;
pub mod precise;
pub mod inequalities;
pub mod optimal;
pub mod runner;
