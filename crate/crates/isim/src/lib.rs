//! ISIM: iterative self-improving weakly-supervised segmentation.
//!
//! An encoder-decoder network with a classification branch generates its
//! own pseudo-segmentation labels (CAM -> threshold -> dense CRF) and
//! retrains against them with a gated pixel-wise loss, regenerating the
//! labels on a fixed schedule.

pub mod camops;
pub mod dataio;
pub mod dcrf;
pub mod error;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod pipeline;

pub use error::{IsimError, Result};
