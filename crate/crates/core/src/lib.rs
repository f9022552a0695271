//! Few-shot weakly-supervised bag classification with multi-scale
//! hierarchical prompt tuning, similarity-graph propagation and
//! non-parametric cross-guided top-K pooling, built on toy frozen towers.

pub mod bag;
pub mod baselines;
pub mod cache;
pub mod config;
pub mod data;
pub mod descriptions;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod isgpt;
pub mod model;
pub mod npcgp;
pub mod params;
pub mod selection;
pub mod tape;
pub mod tokenizer;

pub use bag::{bag_label_from_instances, Bag, FewShotSplit, Scale, ScaleView};
pub use config::{GraphKind, ModelConfig};
pub use error::{Error, Result};
