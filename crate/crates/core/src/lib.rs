//! Personalized dialogue policy learning with transfer across users.

pub mod baselines;
pub mod belief;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod experiment;
pub mod learner;
pub mod qfunction;
pub mod rng;
pub mod simulator;
pub mod transfer;

pub use error::{Error, Result};
