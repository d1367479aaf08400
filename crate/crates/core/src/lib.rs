//! Dynamic embedded topic model and the experiment harness around it.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod sweep;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use corpus::{Corpus, Document, EncodedDoc, SubDocument, Vocabulary, WindowSpec, WindowStats};
pub use embeddings::{EmbeddingMatrix, SgnsConfig};
pub use error::{Error, Result};
pub use eval::{EvaluationReport, SignificanceEstimate};
pub use model::{DetmParams, LossBreakdown, ModelConfig};
pub use pipeline::{EmbeddingSource, RunConfig};
pub use report::ReportDocument;
pub use sweep::{Axis, AxisValue, ResultRecord, ResultStore, SweepPlan};
pub use trainer::{TrainingConfig, TrainingHistory};

/// Version tag written into every file this crate persists.
pub const FORMAT_VERSION: &str = "detm-lab/1";
