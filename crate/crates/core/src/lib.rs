//! Numerical laboratory for viscous flow through a shrinking perforated lattice.
//!
//! The crate builds the lattice of obstacles, the cutoff functions living on
//! the sleeve around each obstacle, the cell-wise divergence correctors, the
//! image-vortex initial data for disk obstacles, and two flow solvers: a 2D
//! Euler solver in vorticity form (full plane or torus) and a Brinkman-penalized
//! Navier-Stokes solver on a periodic box. The [`study`] module ties them
//! together into a vanishing-viscosity rate study.
//!
//! Every numerical type is generic over [`Real`] (implemented for `f32` and
//! `f64`). The aliases at the crate root fix the scalar to `f64`, which is
//! what the experiments use.

// `!(x > 0)` is the NaN-rejecting form used for input validation throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod biot_savart;
pub mod corrector;
pub mod cutoff;
pub mod error;
pub mod euler;
mod advect;
mod fft;
pub mod fields;
pub mod geometry;
pub mod initial_data;
pub mod ns;
mod real;
pub mod snapshot;
pub mod study;

pub use error::{Error, Result};
pub use real::Real;

pub type Grid = fields::Grid<f64>;
pub type ScalarField = fields::ScalarField<f64>;
pub type VectorField = fields::VectorField<f64>;
pub type LatticeConfig = geometry::LatticeConfig<f64>;
pub type Geometry = geometry::Geometry<f64>;
pub type ObstacleShape = geometry::ObstacleShape<f64>;
pub type RegionMask = geometry::RegionMask<f64>;
pub type CutoffProfile = cutoff::CutoffProfile<f64>;
pub type VorticityBlob = biot_savart::VorticityBlob<f64>;
pub type CellSolver = corrector::CellSolver<f64>;
pub type EulerState = euler::EulerState<f64>;
pub type EulerSolver = euler::EulerSolver<f64>;
pub type SimParams = ns::SimParams<f64>;
pub type NsState = ns::NsState<f64>;
pub type NsSolver = ns::NsSolver<f64>;

pub type Grid32 = fields::Grid<f32>;
pub type ScalarField32 = fields::ScalarField<f32>;
pub type VectorField32 = fields::VectorField<f32>;
pub type Geometry32 = geometry::Geometry<f32>;
