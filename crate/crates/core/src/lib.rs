//! Anomaly detection over pre-extracted CNN feature maps.
//!
//! Training features are reduced to a repository of patch vectors chosen by
//! their local gradient response, mapped by a small network trained to pull
//! normal vectors toward a common center, and test patches are scored by their
//! distance to the nearest repository vector.

pub mod error;
pub mod eval;
pub mod ingest;
pub mod learner;
pub mod manifest;
pub mod rng;
pub mod scorer;
pub mod selector;
pub mod snapshot;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{auroc, pixel_auroc, run_category, run_pipeline, EvalReport, PipelineConfig, PipelineRun};
pub use learner::{train, Mapping, MlpParams, TrainConfig, TrainHistory};
pub use manifest::{load_manifest, DatasetManifest, Label, SampleRecord, Split};
pub use scorer::{AnomalyResult, ImageScoreMode, ScoreConfig, Scorer};
pub use selector::{build_repository, Repository, SelectionMode};
pub use tensor::FeatureMap;
