//! MIMO detection with expectation propagation and graph-convolution
//! enhancement.
//!
//! The crate implements three detectors over the real-valued MIMO system
//! model: plain EP, a GNN-enhanced EP baseline that aggregates over all
//! node pairs, and the Chebyshev graph-convolution variant whose filter
//! coefficients are produced per instance by an attention network. Training
//! runs on a small reverse-mode autodiff engine built for exactly this
//! workload; everything is deterministic given a seed.

pub mod autodiff;
pub mod detector;
pub mod ep;
pub mod gnn;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;

pub use detector::{
    evaluate_ser, gcepnet_forward, gepnet_forward, sample_loss, train, DetectorConfig,
    DetectorError, DetectorKind, EvalRow, NetworkForward, ReadoutMode, TrainConfig,
};
pub use gnn::{flop_count, flop_n2_coefficient, GnnVariant};
pub use linalg::Matrix;
pub use model::{Constellation, RealInstance};
pub use params::ParameterSet;
