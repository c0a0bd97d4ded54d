//! Allocation-only core of a Siamese-proposal / online-LSTM visual tracker.
//!
//! Everything here is pure computation over owned buffers: file formats,
//! image decoding, wall clocks and the command line live in the `oatrack`
//! crate. The crate builds under `#![no_std]` with `alloc`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod bbox;
pub mod embedtrain;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod image;
pub mod lstm;
pub mod matcher;
pub mod metrics;
pub mod ops;
pub mod proposals;
pub mod sampler;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod weights;

pub use adam::{adam_step, load_named, lookup_named, AdamConfig, AdamSet, AdamState, Parameters};
pub use bbox::{iou, BBox};
pub use error::{Error, Result};
pub use gan::{GanConfig, GanParams, GanTrainer, PositiveBank};
pub use lstm::{LstmConfig, LstmParams, LstmState};
pub use matcher::{Embedding, EmbeddingArch, SearchGeometry, ScoreMapSet, SiameseMatcher};
pub use metrics::{metric_report, precision_curve, success_auc, MetricReport};
pub use proposals::{select_top, ExtractionMode, Proposal, ProposalSet};
pub use sequence::{FrameSource, Sequence};
pub use synth::{synth_sequence, SynthSpec};
pub use tensor::Tensor;
pub use tracker::{default_embedding, run_sequence, run_session, Ablation, Clock, NoClock, RunReport, TrackResult, TrackerConfig, TrackerSession};
