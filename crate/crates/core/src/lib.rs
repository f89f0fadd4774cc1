//! Continuous per-instruction edit strength for a small joint-attention
//! image editor: a synthetic edit world, a flow-matching base model,
//! low-rank sliders trained to suppress one instruction, token-space
//! interventions and the metrics that compare them.

pub mod adapters;
pub mod archive;
pub mod autodiff;
pub mod error;
pub mod grid;
pub mod intervene;
pub mod metrics;
pub mod mmdit;
pub mod optim;
pub mod params;
pub mod pps;
pub mod prompt;
pub mod runtime;
pub mod tensor;
pub mod world;

pub use adapters::{init_adapter, Adapter, AdapterMode, Selection, SliderSetting, Sliders};
pub use archive::{load_checkpoint, save_checkpoint, Checkpoint, TensorArchive};
pub use error::{Error, Result};
pub use grid::GridShape;
pub use intervene::{intervention_sweep, InterventionSpec};
pub use metrics::{continuity, Continuity, ContinuityStatus, EditRequest, Trajectory};
pub use mmdit::{pretrain_base, sample_edit, EditorModel, ModelConfig, PretrainConfig, Projection};
pub use pps::{train_adapter, AdapterTrainConfig, NullPrompt, Objective, TrainedAdapter};
pub use prompt::{Prompt, TextTokens, Vocabulary};
pub use tensor::Tensor;
pub use world::{EditWorld, Example, WorldSpec};
