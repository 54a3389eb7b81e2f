//! Fairness regularization for classifiers trained on frozen text
//! embeddings, and group fairness metrics for prediction logs.
//!
//! Each training example's representation is pushed toward equal dot-product
//! similarity with the members of prototype tuples (one anchor vector per
//! demographic group), through a KL-to-uniform penalty added to the
//! cross-entropy loss. Prototypes come either from a prototype file or from
//! group means of a small labeled subset.
//!
//! The numerical modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the command-line tool.

pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod scalar;
pub mod schedule;
pub mod store;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use loss::{
    dafair_kl, dafair_kl_gradient, kl_to_uniform, pair_similarities, similarity_distribution, total_loss,
    LossBreakdown, SimilarityDistribution,
};
pub use metrics::{
    independence, report, separation, sufficiency, tpr_gap, FairnessReport, Prediction, PredictionLog,
};
pub use model::{Adapter, ClassifierHead, Model, ModelRecord};
pub use prototypes::{PrototypeEnsemble, PrototypeTuple, Regime};
pub use scalar::Scalar;
pub use schedule::{select_threshold, Candidate, LambdaSchedule, Selection};
pub use store::{load_dataset, load_prototypes, write_dataset, write_prototypes, EmbeddingDataset, PrototypeFile, Split};
pub use trainer::{predict, refresh_prototypes, train, train_jtt, Method, TrainConfig, TrainOutcome};

pub type Ensemble = PrototypeEnsemble<f64>;
pub type Ensemble32 = PrototypeEnsemble<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Schedule = LambdaSchedule<f64>;
pub type Distribution = SimilarityDistribution<f64>;
