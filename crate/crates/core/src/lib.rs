//! Depth-prior-guided cross-modal change detection.
//!
//! A pre-event DSM and a post-event image (plus a relative-depth prior
//! estimated from that image) go in; a 2D semantic change map, a signed
//! 3D height-change map and an auxiliary post-event DSM come out. The
//! whole pipeline runs on the small reverse-mode tensor engine in
//! [`autodiff`], so every module can be trained and gradient-checked
//! without external frameworks.

pub mod autodiff;
pub mod change;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod prng;
pub mod raster;
pub mod report;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Graph, Gradients, Mode, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use prng::Prng;
pub use tensor::Tensor;
