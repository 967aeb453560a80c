//! RGB-thermal crack segmentation.
//!
//! [`fusion`] holds the cross-modal attention block, [`loss`] the
//! skeleton-based objective, [`model`] the dual-branch network, [`data`]
//! synthetic generation and dataset I/O, [`metrics`] evaluation, and
//! [`train`] the optimization loop tying them together.

mod error;
pub mod fusion;
mod init;
pub mod loss;
pub mod data;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{CoreError, Result};
