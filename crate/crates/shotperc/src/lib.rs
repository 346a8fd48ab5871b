//! Simulation toolkit for high-intensity shot noise fields and their Gaussian
//! limits: kernel evaluation and covariance, Poisson point sampling, FFT field
//! synthesis, an explicit dyadic Poisson-Gaussian coupling, and level-set
//! percolation diagnostics, driven by a reproducible experiment CLI.

pub mod config;
pub mod coupling;
pub mod csvio;
pub mod dist;
pub mod dyadic;
pub mod error;
pub mod experiment;
pub mod fftconv;
pub mod geom;
pub mod grid;
pub mod kernel;
pub mod kesten;
pub mod percolation;
pub mod point_process;
pub mod quad;
pub mod rng;
pub mod stats;
pub mod synthesis;

pub use error::{Error, Result};
