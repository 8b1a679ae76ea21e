//! Self-supervised monophonic pitch estimation from constant-Q frames.
//!
//! A small Siamese network is trained on pairs of CQT frames that are
//! translated copies of each other. Because a pitch shift is a translation on
//! a log-frequency axis, the network is asked to translate its output
//! distribution by the same number of bins. The architecture is built from
//! translation-preserving layers, ending in a Toeplitz fully-connected layer,
//! so the objective cannot be satisfied by a constant output.
//!
//! Pipeline overview:
//!
//! ```text
//! WAV -> resample(16 kHz) -> CQT (297 bins, dB) -> crop pair (k-shift)
//!     -> augment -> Network -> softmax -> losses -> Adam
//! ```
//!
//! At inference the central 265 bins of each CQT frame are fed to the network
//! and the argmax class is mapped to a MIDI pitch with a calibrated offset.

pub mod audio;
pub mod config;
pub mod cqt;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pairgen;
pub mod pitch_head;
pub mod tensor;
pub mod trainer;

pub use audio::{AudioClip, PitchAnnotation, SynthSpec};
pub use config::RunConfig;
pub use cqt::{CqtConfig, CqtPlan, CqtSequence};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use losses::{LossConfig, LossReport};
pub use model::{ModelConfig, ModelFile, Network, PitchDistribution};
pub use pairgen::{AugmentConfig, CropConfig, TrainBatch};
pub use pitch_head::{Calibration, PitchEstimator, PitchTrack};
pub use trainer::{FramePool, TrainConfig, Trainer};
