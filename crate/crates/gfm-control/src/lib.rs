//! Grid-forming droop control with constraint-aware current limiting.
//!
//! The controller treats the converter's current and modulation limits as
//! three discs in the stationary-frame voltage plane and projects the droop
//! candidate voltage onto their intersection each control period, instead of
//! clamping currents after the fact. The crate bundles the controller, the
//! disc construction from LC-filter dynamics, a fixed-iteration ADMM
//! projection with reference oracles, comparison limiters, an averaged-model
//! EMT plant, and canned study scenarios behind a CLI.
//!
//! Conventions used throughout:
//! - Per-unit on the converter base. The voltage base is the peak phase
//!   voltage, the current base the peak phase current, so a 1 pu signal has
//!   unit amplitude in the stationary frame.
//! - Per-unit power absorbs the 3/2 factor of amplitude-invariant frames:
//!   p = v^T i and q = v_y i_x - v_x i_y are 1 pu at rated operation.
//! - Angles in radians, frequencies as pu of the nominal grid frequency
//!   unless a field name says otherwise.

pub mod baselines;
pub mod config;
pub mod scenarios;
pub mod constraints;
pub mod frames;
pub mod controller;
pub mod plant;
pub mod projection;
