//! Desk-scale modulated detection.
//!
//! Frozen stub encoders for image and text feed a single shared
//! "universal projection" encoder that is conditioned by learnable
//! modality tokens, followed by a DETR-style encoder-decoder grounding
//! head trained with Hungarian matching, box, soft-token, and
//! contrastive losses on synthetic shape scenes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod hungarian;
pub mod losses;
pub mod model;
pub mod nn;
pub mod param;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use config::{FusionKind, LossWeights, PositionMode, RunConfig, Variant};
pub use data::{Scene, Span, SplitSpec};
pub use detect::{box_confidence, phrase_score, Predictions};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalOptions, MetricsReport};
pub use hungarian::{hungarian_match, CostMatrix, MatchAssignment};
pub use losses::{total_loss, GroundTruth, LossReport};
pub use model::Model;
pub use param::{Adam, FreezeAudit, ParamRegistry};
pub use params::{count_params, ParamReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::Trainer;
pub use vocab::Vocabulary;
