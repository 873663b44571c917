//! Identity-preserving face recovery from stylized portraits.
//!
//! The crate holds the whole pipeline: dataset synthesis, style selection,
//! the networks and their losses, training and evaluation. A small
//! reverse-mode autograd engine in [`autograd`] backs the networks.

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod stn;
pub mod style;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use networks::{Dn, DnConfig, Srn, SrnConfig};
pub use stn::{StnSite, TransformParams};
pub use tensor::Tensor;
