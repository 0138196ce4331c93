//! Semi-supervised crowd counting with rank-consistent feature pyramids.
//!
//! A density regressor is trained from a few annotated images plus many
//! unannotated ones. Unannotated images contribute only through a margin
//! ranking loss: on each of K feature levels, concentric crops of the feature
//! map must not yield a larger predicted count than the crops containing them.

pub mod checkpoint;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod patches;
pub mod trainer;
mod unfold;

pub use candle_core::DType;
pub use density::{DensityMap, HeadPointSet, KernelSpec};
pub use error::{Error, Result};
pub use losses::LossBreakdown;
pub use model::{LevelTag, Model, ModelConfig, PyramidFeatures};
pub use eval::EvalReport;
pub use patches::{CropBox, NestedPatchSet, RankPairSet};
pub use trainer::{TrainConfig, Trainer};
