//! Desk-scale models exercising the correction layer: a minibatch-wrapped
//! classifier, a per-point feed-forward network over point sets, and
//! level-set segmentation with a batch correction.

pub mod classifier;
pub mod data;
pub mod levelset;
pub mod pointset;
pub mod train;

pub use classifier::{classifier_forward, MlpClassifier};
pub use levelset::{chanvese_step, chanvese_tmd_step, ChanVeseCoefficients, LevelSetState};
pub use pointset::{pointset_forward, PointSetNet};
pub use train::{train, DatasetKind, MetricsRow, TrainSpec, TrainedModel};
