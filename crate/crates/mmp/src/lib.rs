//! Masked modality projection: a multimodal classifier that predicts the
//! tokens of missing modalities from the available ones via aggregated-token
//! cross-attention, plus the numeric substrate, synthetic data, and the
//! training/evaluation harness used to verify it at desk scale.

pub mod attention;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod masking;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod projection;
pub mod scalar;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use harness::{
    evaluate, run_ablation, train, AblationReport, AblationTag, EvalReport, TrainConfig,
    TrainHistory,
};
pub use masking::{enumerate_scenarios, sample_mask, MaskPattern, MaskSchedulerConfig};
pub use model::{LossBreakdown, MmpModel, ModelConfig, SubstitutionMode};
pub use optim::AdamW;
pub use projection::{ModalitySpec, ProjectionTrace};
pub use scalar::Scalar;
pub use synthdata::{generate, logistic_probe_accuracy, Dataset, SynthConfig};

/// Concrete f64 instantiations; all of the model and harness code runs on
/// these.
pub type Tensor = tensor::TensorOf<f64>;
pub type Tape = tape::TapeOf<f64>;
pub type ParameterStore = params::ParameterStoreOf<f64>;
pub type Gradients = tape::Gradients<f64>;
