//! Blind network revenue management: a primal-dual learning-to-price policy
//! with demand balancing, a clairvoyant fluid oracle, comparison baselines,
//! a market simulator and a replication harness.

pub mod baselines;
pub mod bench;
pub mod checks;
pub mod demand;
pub mod error;
pub mod fluid;
pub mod linalg;
pub mod pdnrm;
pub mod projection;
pub mod sim;

pub use error::{Error, Result};
