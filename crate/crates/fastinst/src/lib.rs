//! CPU-only query-based instance segmentation on procedurally generated
//! shape scenes.
//!
//! The crate implements a FastInst-style architecture end to end at desk
//! scale: a small strided backbone, a PPM-FPN pixel decoder, instance
//! activation-guided query selection, a dual-path Transformer decoder with
//! masked attention, Hungarian set-prediction losses with a location cost,
//! ground-truth mask-guided training, AdamW training with a step schedule,
//! COCO-style mask AP evaluation, and a latency benchmark — all on top of a
//! minimal reverse-mode autodiff tensor core that is verified against
//! central finite differences.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `fastinst` binary; see the README for the full tour.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod image_io;
pub mod loss;
pub mod matching;
pub mod model;
pub mod evalmetrics;
pub mod nn;
pub mod optim;
pub mod postprocess;
pub mod parallel;
pub mod pixel;
pub mod query;
pub mod rng;
pub mod scenes;
pub mod selftest;
pub mod train;
pub mod viz;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
