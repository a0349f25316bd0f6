//! Performative reinforcement learning in linear MDPs.
//!
//! The deployed policy shifts the environment: every occupancy measure `d`
//! induces new parameters `(θ_d, μ_d)` through a [`response::ResponseMap`].
//! This crate holds the numerical core: conversions between policies and
//! occupancy measures, a dense QP engine for the regularized occupancy
//! problem and its dual, the repeated-retraining loop with its convergence
//! certificate, the finite-sample Lagrangians and drivers, the offline
//! primal-dual solver, and two-agent Stackelberg response maps.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.
//! State-action pairs are flattened as `s * A + a` everywhere.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod instances;
pub mod linalg;
pub mod math;
pub mod mdp;
pub mod primal_dual;
pub mod qp;
pub mod response;
pub mod retraining;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod stackelberg;

pub use error::{Error, Result};
pub use mdp::{LinearMdpSpec, MdpParams, OccupancyMeasure, Policy, SpecDraft, ValidationReport};
pub use nalgebra::{DMatrix, DVector};
pub use response::{ResponseKind, ResponseMap};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
