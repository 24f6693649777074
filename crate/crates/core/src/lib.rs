//! Box-prompted medical image segmentation on CPU.
//!
//! [`model`] holds the network, [`prompts`] turns a box into points and a
//! scribble, [`preprocess`] maps raw cases to network inputs and
//! [`harness`] trains and evaluates.

pub mod bbox;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod prompts;

pub use bbox::Bbox;
pub use error::{CoreError, Result};
