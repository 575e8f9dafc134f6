//! Teacher-critical caption training laboratory.
//!
//! A desk-scale captioning stack built from scratch: a synthetic scene
//! dataset, a reverse-mode autodiff engine, attention/GRU decoders in
//! student and attribute-privileged teacher flavors, the CIDEr-D/BLEU/
//! ROUGE-L metric suite, and the two teacher-critical training strategies:
//! KL soft labels during cross-entropy training and LCS-partitioned
//! per-word rewards during self-critical reinforcement training.

pub mod autodiff;
pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rl;
pub mod text;
