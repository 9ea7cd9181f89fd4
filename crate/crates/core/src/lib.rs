//! # octnet
//!
//! OCT B-scan classification from scratch: cohort selection from EMR-style
//! tables, image preprocessing, a VGG-style CNN trained with plain SGD,
//! ROC analysis at image / macula / patient level, and occlusion saliency.
//! A synthetic phantom generator makes the whole chain testable offline.
//!
//! ```no_run
//! use octnet::network::{ArchName, InputDims, Network};
//! use octnet::image::GrayImage;
//!
//! let input = InputDims::gray(48, 32);
//! let net = Network::build(ArchName::Desk.specs(input), input, 7)?;
//! let p_amd = net.forward(&GrayImage::filled(48, 32, 90).to_tensor())?;
//! assert!((0.0..=1.0).contains(&p_amd));
//! # Ok::<(), octnet::Error>(())
//! ```

pub mod cli;
pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod network;
pub mod nn;
pub mod occlusion;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use network::{ArchName, InputDims, LayerSpec, Network};
pub use rng::Rng;
pub use tensor::Tensor;
