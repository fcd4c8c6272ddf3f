//! Utterance segmentation of long-form speech: log-mel feature
//! extraction, a convolution + Transformer frame classifier trained
//! from segment-annotated corpora, an energy-based VAD, hybrid
//! decoding, and evaluation utilities.

pub mod audio;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod model;
pub mod synth;
pub mod vad;

pub use audio::{FeatureConfig, FeatureMatrix, Waveform};
pub use corpus::{FrameLabels, SegmentRecord, TrainingExample};
pub use decoder::{DecodeConfig, DecodeMode, SegmentHypothesis};
pub use model::{LabelProbabilities, ModelConfig, ModelParams};
pub use vad::{VadConfig, VadTrace};
