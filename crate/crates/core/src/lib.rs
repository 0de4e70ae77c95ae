//! Staged cross-modal prompt interaction for compositional zero-shot
//! learning.
//!
//! Prompt embeddings for compositions, states and objects attend first to an
//! aggregate of shallow encoder layers and then to an aggregate of deep
//! layers; learnable scalars blend the two stages back into the prompt. The
//! crate carries everything needed to train and evaluate that mechanism at
//! desk scale: a small reverse-mode tensor engine, a frozen stand-in encoder,
//! the aggregators and interaction stages, the three-branch objective, the
//! seen/unseen calibration-bias evaluation protocol, and the experiment
//! workbench behind the `czsl` binary.

pub mod aggregation;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod interaction;
pub mod layers;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod training;
pub mod workbench;

pub use error::{Error, Result};
