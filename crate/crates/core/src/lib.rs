//! Multi-modal fact verification by co-attention fusion.
//!
//! Token-level embeddings of a claim (text and image) and a document (text
//! and image) are projected, fused pairwise with multi-head co-attention,
//! mean-pooled and classified into five entailment categories. Trained
//! models can be combined with a power-weighted ensemble.
//!
//! Modules, bottom-up:
//!
//! * [`tensor`]: dense row-major tensors and the numeric kernels.
//! * [`autodiff`]: a tape of tensor operations with reverse-mode gradients.
//! * [`params`]: parameter containers and traversal.
//! * [`coattention`]: the co-attention block.
//! * [`model`]: embeddings, fusion pairings and the classifier.
//! * [`training`]: Adam, the epoch loop and checkpoints.
//! * [`metrics`]: weighted F1 and confusion matrices.
//! * [`ensemble`]: prediction files and the power-weighted combination.
//! * [`dataio`]: dataset and checkpoint formats, synthetic data.

pub mod autodiff;
pub mod coattention;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, NodeId};
pub use coattention::{BlockConfig, CoAttentionParams, TokenSequence};
pub use dataio::{
    dataset_stats, generate_synthetic, read_checkpoint, read_dataset, write_checkpoint,
    write_dataset, Checkpoint, Dataset, DatasetHeader, DatasetReader, DatasetStats, DatasetWriter,
    FormatError, SyntheticSpec, SyntheticTask, TokenCounts,
};
pub use ensemble::{
    combine, grid_search, read_predictions, write_predictions, EnsembleConfig, GridRow, GridSearch,
    PredictionSet,
};
pub use error::{Error, Result};
pub use metrics::{argmax_predict, evaluate, EvalReport};
pub use model::{
    Category, Mode, ModelConfig, ModelParams, Pairing, SampleEmbeddings, Source, Variant,
    CLASS_COUNT,
};
pub use params::Parameters;
pub use tensor::{Activation, Scalar, Tensor};
pub use training::{
    load_model, save_model, train, EpochRecord, TrainConfig, TrainOutcome, Trainer,
};
