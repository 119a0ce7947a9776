//! Multi-task shifted-window U-Net (shared encoder with segmentation,
//! reconstruction and classification heads) and the joint frozen/trainable
//! encoder classifier, built on a small reverse-mode autodiff core.

pub mod arch;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod swin;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
