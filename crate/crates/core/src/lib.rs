//! Audio-driven 3D facial animation with disentangled content and style.
//!
//! The pipeline is trained in two stages on a shared non-autoregressive
//! backbone: stage one reconstructs log-Mel spectra from aligned phonemes and
//! a style vector, stage two fine-tunes the same backbone to emit 3D mesh
//! vertex sequences. Inference mixes content (a forced-aligned transcript)
//! with style (extracted from the driving or a reference audio), which makes
//! style transfer and transcript-level content editing possible.
//!
//! Modules follow the data flow:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode gradient tape
//! - [`audio`]: WAV loading and log-Mel extraction
//! - [`text`]: lexicon, TextGrid alignments, duration quantization, editing
//! - [`mesh`]: topology, graph Laplacian, OBJ I/O, mouth-gap estimation
//! - [`model`]: the shared backbone and its two projection heads
//! - [`loss`] / [`metrics`]: training objectives and evaluation metrics
//! - [`train`]: Adam, warm-up schedules, the two training stages, checkpoints
//! - [`corpus`]: deterministic synthetic data so everything runs desk-scale
//! - [`cli`]: the subcommand surface of the `talkmesh` binary

pub mod audio;
pub mod cli;
pub mod corpus;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vtsr;
