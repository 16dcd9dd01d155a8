//! Deterministic discrete-event simulator of decentralized edge-server
//! cooperation, with baseline strategies and a brute-force oracle for the
//! min-max division problem.
//!
//! Module layering, bottom up: [`model`] and [`topology`] hold the world,
//! [`selection`] and [`bcu`] build the cooperation forest, [`capacity`]
//! computes announced capabilities, [`division`] splits tasks, [`engine`]
//! runs the event loop and [`oracle`] measures how far decentralized splits
//! are from the centralized optimum.

pub mod bcu;
pub mod capacity;
pub mod division;
pub mod engine;
pub mod model;
pub mod oracle;
pub mod selection;
pub mod topology;

mod error;

pub use error::Error;
pub use model::*;
