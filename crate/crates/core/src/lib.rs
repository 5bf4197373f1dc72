//! Per-point extrinsic contact tracking from tactile sequences.
//!
//! Given a canonical point cloud of a rigidly grasped object and a short
//! history of tactile frames from a two-finger gripper, this crate
//! estimates, for every queried 3-D surface point, the probability that
//! the point is in contact with the environment — tracked over a whole
//! trajectory.
//!
//! The pipeline has three learned stages plus a synthetic data source:
//!
//! - [`descriptor`]: a point-occupancy field whose concatenated layer
//!   activations serve as a pose-invariant per-point descriptor
//!   (rotation handled by a vector-feature encoder, translation by
//!   mean-centering).
//! - [`tactile`]: a per-frame autoencoder and a sequence autoencoder
//!   whose final hidden state embeds the contact-induced motion.
//! - [`contact`]: the contact head — four fully connected residual
//!   blocks with conditional batch normalization on the motion
//!   embedding, a sigmoid readout, and Monte Carlo dropout for
//!   uncertainty.
//! - [`sim`]: a desk-scale quasi-static simulator that generates scenes,
//!   trajectories, ground-truth contact labels, and synthetic tactile
//!   frames, with a binary trajectory file format.
//!
//! [`harness`] wires these into a CLI: dataset generation, the four
//! training stages, evaluation with MC-dropout confidence bands, a
//! four-variant input ablation, and plot emission.

pub mod autodiff;
pub mod checkpoint;
pub mod contact;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod rng;
pub mod sim;
pub mod tactile;
pub mod training;

pub use error::{Error, Result};
