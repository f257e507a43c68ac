//! Simulation, learning, and analysis toolkit for 2D bubble convection.
//!
//! The crate has three layers:
//! - a finite-volume Euler solver over a hydrostatic background
//!   ([`euler`]) with scenario sampling, trajectory generation, and a
//!   checksummed on-disk dataset format ([`scenario`], [`pipeline`],
//!   [`dataset`]);
//! - a reverse-mode autodiff engine and the convolutional Koopman
//!   autoencoder built on it ([`tensor`], [`koopman`]);
//! - dynamic mode decomposition for linear baselines and spectrum analysis
//!   ([`linalg`], [`dmd`]).

pub mod dataset;
pub mod dmd;
pub mod euler;
pub mod koopman;
pub mod linalg;
pub mod pipeline;
pub mod scenario;
pub mod tensor;
