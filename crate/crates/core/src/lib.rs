//! Statistical evaluation toolkit for drug-blind drug-response prediction:
//! correlation metric decomposition, reference predictors, cross-validation
//! protocols, K-shot response-profile matching, a checkpoint-selection
//! leakage audit, and a synthetic-data oracle.

pub mod dataio;
pub mod error;
pub mod leakage;
pub mod matching;
pub mod metrics;
pub mod models;
pub mod protocols;
pub mod rng;
pub mod stats;
pub mod synth;

pub use dataio::{
    align, AlignedDataset, AlignmentReport, EntityKind, FeatureMatrix, MoaMap, ResponseTable,
    ScaffoldMap, Units,
};
pub use error::{Error, ErrorClass, Result};
pub use metrics::{
    decompose_global_r, global_r, pearson, per_drug_r, DecompositionReport, MetricReport,
    PredictionTable, ZeroVariancePolicy,
};
pub use models::{
    cell_mean_predictor, drug_mean_predictor, pca_fit, pca_transform, ridge_fit, ridge_predict,
    zscore_per_drug, PcaModel, Predictor, RidgeModel,
};
pub use stats::{
    biomarker_stratify, cohens_d_pooled, mann_whitney_u, wilcoxon_signed_rank, Alternative,
    TestResult,
};
pub use synth::{generate, GroundTruth, Preset, SynthConfig, SynthOutput};
