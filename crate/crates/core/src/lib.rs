//! Selective state-space segmentation with global appearance and local
//! sequence style augmentation, for domain-generalisable medical image
//! segmentation at desk scale.

pub mod augment_gva;
pub mod augment_lsa;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod preview;
pub mod selftest;
pub mod ssm_core;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
