//! Scribble-supervised segmentation: seeds grown from scribbles, dense CRF and CRF-RNN
//! relabeling, MC-dropout gating, and hard-EM training of a small U-Net.

pub mod checkpoint;
pub mod crfrnn;
pub mod dataio;
pub mod densecrf;
pub mod emdriver;
pub mod error;
pub mod evalcli;
pub mod grid;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod seeder;
pub mod segnet;
pub mod tensorcore;
pub mod uncertain;

pub use error::{Error, Result};
pub use grid::{Image, LabelMap, ProbMap, UNKNOWN};
pub use scalar::Scalar;

pub type Tensor32 = tensorcore::Tensor<f32>;
pub type Tensor64 = tensorcore::Tensor<f64>;
pub type Tape32 = tensorcore::Tape<f32>;
pub type Tape64 = tensorcore::Tape<f64>;
pub type ProbMap32 = grid::ProbMap<f32>;
pub type ProbMap64 = grid::ProbMap<f64>;
pub type NetParams32 = segnet::NetParams<f32>;
pub type NetParams64 = segnet::NetParams<f64>;
pub type CrfRnnParams32 = crfrnn::CrfRnnParams<f32>;
pub type CrfRnnParams64 = crfrnn::CrfRnnParams<f64>;
