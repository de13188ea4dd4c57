//! Gesture, location and user recognition from CSI amplitude.
//!
//! This crate trains, evaluates and profiles 1-D convolutional residual
//! networks that read CSI amplitude recordings (`links × subcarriers × time`)
//! and jointly solve gesture recognition, indoor localization and user
//! identification. Five model families are provided:
//!
//! * **STS**: one single-task network per task (used as teachers),
//! * **NMTS**: a shared trunk with one classifier per task,
//! * **UMTS**: NMTS trained with learned homoscedastic task weights,
//! * **KDMTS** / **KDMTS+RA**: NMTS with feature distillation from frozen STS
//!   teachers, optionally with task-specific residual adaptors,
//! * **Wimuse**: adaptors plus feature and logits distillation.
//!
//! The crate is organised bottom-up:
//!
//! | module | contents |
//! |---|---|
//! | [`csi_data`] | samples, datasets, canonical on-disk format, importers, synthetic multipath generator, splits |
//! | [`net_blocks`] | tensors, layers, the four building blocks, parameter and multiply-add counting |
//! | [`model_zoo`] | model assembly, forward passes, task extension, prediction |
//! | [`losses`] | softmax, cross-entropy, multi-task sums, uncertainty weighting, distillation losses |
//! | [`trainer`] | Adam, learning-rate schedule, two-phase training, checkpoints, metrics log |
//! | [`harness`] | evaluation, complexity profiling, ablations, ratio sweeps, reports, CLI commands |
//!
//! See `examples/` for one runnable program per capability.

pub mod csi_data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model_zoo;
pub mod net_blocks;
pub mod trainer;

pub use error::{Error, Result};
