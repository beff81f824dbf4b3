//! Composite flow matching for reinforcement learning with shifted-dynamics
//! offline data.
//!
//! An offline conditional flow maps Gaussian noise to offline next states; an
//! online flow, trained on minibatch optimal-transport couplings, carries those
//! samples on to the online next-state distribution. The displacement of the
//! second stage estimates the per-(state, action) Wasserstein dynamics gap,
//! which a soft actor-critic agent uses to filter offline transitions and to
//! shape an optimistic reward bonus.

pub mod agent;
pub mod envs;
pub mod error;
pub mod flow;
pub mod gap;
pub mod nnet;
pub mod ot;
pub mod persist;

pub use error::{Error, Result};
