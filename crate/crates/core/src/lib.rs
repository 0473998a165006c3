//! Distraction removal and attended cross-alignment for hierarchical
//! multiple-choice video question answering.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`autodiff`]) over dense f64 tensors ([`tensor`]). On top of it sit the
//! self- and cross-attention encoders ([`attention`]), attention-weight
//! thresholding ([`distraction`]), masked alignment fusion ([`fusion`]) and
//! the three-stage model with its answer decoder ([`pipeline`]).

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distraction;
pub mod error;
pub mod fusion;
pub mod masking;
pub mod params;
pub mod pipeline;
pub mod sequence;
pub mod tensor;
pub mod trace;
pub mod train;

pub use attention::AttentionWeights;
pub use autodiff::{Tape, Var};
pub use config::{DraxConfig, LossMode, Settings, TrainConfig};
pub use distraction::{DistractionFactor, DistractionMask};
pub use error::{Error, FormatError, Result};
pub use fusion::{AnchorAssignment, Direction};
pub use masking::{ForwardCtx, MaskMode};
pub use params::{ParamId, ParamStore};
pub use pipeline::{DraxModel, FeatureBundle, Scores};
pub use sequence::{Modality, ModalitySequence};
pub use tensor::Tensor;
