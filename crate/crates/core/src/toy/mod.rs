//! Desk-scale end-to-end pipeline on synthetic scenes.

pub mod ablate;
pub mod model;
pub mod scene;
pub mod train;
pub mod truth;

pub use ablate::{ablate, AblationReport, AblationRow, Variant};
pub use model::{map_object_queries, ModelConfig, ModelInput, PromptMode, ToyModel};
pub use scene::{gen_scene, SceneConfig, SceneInput, SceneSequence, SceneTruth};
pub use train::{train, train_full, EvalSummary, TrainConfig, TrainReport, Toggles};
pub use truth::{GroundTruthStore, Phase};
