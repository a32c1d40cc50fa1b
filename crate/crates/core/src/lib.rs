//! Relation-based pose semantics transfer on synthetic skeleton videos.
//!
//! A small conv trunk with a heatmap head initializes the first frame; a
//! joint relation extractor refines heatmaps with a learned K x K joint
//! correlation; a propagator distills a pose template from frame t and
//! correlates it with frame t+1's features.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod heatmap;
mod init;
pub mod jre;
pub mod jrpsp;
pub mod model;
pub mod pck;
pub mod pgm;
pub mod pipeline;
pub mod pseq;
pub mod synth;

pub use config::{Ablation, DataConfig, ExperimentConfig, ModelConfig};
pub use error::{Error, Result};
pub use heatmap::{JointHeatmaps, JointSet};
pub use model::Model;
pub use pck::{Norm, PckReport, Subset};
pub use synth::{Dataset, PoseSequenceSample};
