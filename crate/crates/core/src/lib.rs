//! Nanopore blockade-event classification toolkit.
//!
//! The crate covers the whole path from a raw current trace to a compressed
//! classifier:
//!
//! - [`synthdata`]: seeded synthetic traces with ground-truth annotations
//! - [`wavelets`]: biorthogonal 1.5 denoiser and the continuous wavelet transform
//! - [`events`]: streaming statistical blockade detector
//! - [`labeling`]: blockade histograms, Voigt fitting, FWHM labeling, stratified splits
//! - [`scaleogram`]: log-magnitude CWT images and train-set standardization
//! - [`nnet`]: a small differentiable network engine and a k-NN baseline
//! - [`compress`]: global L1 pruning and post-training int8 quantization
//! - [`eval`]: accuracy metrics, confusion matrices, occlusion saliency
//! - [`pipeline`]: declarative configuration and the reproducible stage runner

pub mod compress;
pub mod error;
pub mod eval;
pub mod events;
pub mod labeling;
pub mod nnet;
pub mod pipeline;
pub mod rng;
pub mod scaleogram;
pub mod synthdata;
pub mod wavelets;

pub use error::{Error, Result};
pub use events::{DetectorConfig, Event};
pub use labeling::{LabeledEvent, VoigtPeak};
pub use nnet::{Model, Tensor};
pub use scaleogram::Scaleogram;
pub use synthdata::{GroundTruthEvent, SynthConfig, Trace};
