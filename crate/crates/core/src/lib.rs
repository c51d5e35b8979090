//! Simulation and verification engine for HJM-type defaultable term
//! structures driven by finite-dimensional Levy noise, with credit-rating
//! migration and four recovery schemes.
//!
//! Layering, bottom up: [`levy`] (driver), [`curves`] (grid surfaces),
//! [`hjm`] (drift synthesis and residuals), [`migration`] (rating chain),
//! [`pricing`] (recovery schemes), [`engine`] (joint Monte Carlo),
//! [`verification`] (statistical and algebraic checks), and [`scenario`] /
//! [`app`] for the command-line front end.

pub mod error;
pub mod rng;
pub mod par;
pub mod levy;
pub mod curves;
pub mod hjm;
pub mod migration;
pub mod pricing;
pub mod engine;
pub mod verification;
pub mod scenario;
pub mod app;

pub use error::{Error, Result};
