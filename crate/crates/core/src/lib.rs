//! Multimodal representation tuning at desk scale.
//!
//! A small frozen vision-text transformer is adapted only through low-rank
//! orthonormal-subspace representation editors attached to vision layers, the
//! cross-modality projector, and prefix/suffix text positions of the decoder.
//! The crate also provides a counterfactual control harness and diagnostic
//! sweeps (rank, depth, edit length, edited segments, loss landscapes).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod diagnostics;
pub mod editor;
pub mod error;
pub mod model;
pub mod parallel;
pub mod pretrain;
pub mod tensor;
pub mod train;

pub use editor::{apply_editor, init_editor, orthonormalize, param_count, EditorKey, EditorParams, EditorSet, Site};
pub use error::{MrtError, Result};
pub use model::{EditPlan, FrozenWeights, ToyModel, ToyModelConfig};
pub use tensor::Tensor;
pub use train::{lr_at, train_editors, RunMetrics, TrainConfig};
