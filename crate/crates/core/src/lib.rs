//! Parametric reduced-order modelling with Taylor-series latent dynamics.
//!
//! The pipeline: simulate or ingest snapshot trajectories ([`dataio`],
//! [`burgers`]), jointly train the latent networks and per-parameter latent
//! ODE coefficients ([`networks`], [`idmodel`], [`training`]), then predict
//! at unseen parameters and arbitrary coordinates by interpolating the
//! coefficients ([`interp`]) and integrating the identified ODE ([`online`]).

pub mod autodiff;
pub mod burgers;
pub mod dataio;
pub mod error;
pub mod idmodel;
pub mod interp;
pub mod networks;
pub mod online;
pub mod training;

pub use error::{Error, Result};
