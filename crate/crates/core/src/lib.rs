//! Few-shot segmentation of volumetric images with prototypical networks and
//! inference-time, confidence-aware pseudo-labelling of the query volume.
//!
//! The pipeline runs in three stages:
//!
//! 1. support prototypes are pooled from the annotated support slices and
//!    every query slice is segmented against them;
//! 2. confidently labelled query pixels in a window of neighbouring slices
//!    are pooled into query prototypes;
//! 3. each query slice is segmented again against the support prototypes
//!    augmented with its query prototypes.
//!
//! Modules map onto that flow: [`data`] (volumes, masks, episodes),
//! [`features`] (embedding extractors), [`proto`] (prototype pooling and
//! banks), [`scoring`] (cosine/softmax classification), [`pipeline`]
//! (orchestration), [`phantom`] (synthetic volumes), [`eval`] (Dice and
//! ablations) and [`io`] (binary file formats).

pub mod app;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod proto;
pub mod scoring;

pub use data::{
    ClassId, ClassSet, Episode, EpisodeConfig, FeatureMap, FeatureVolume, Fusion, Grid, LabelMask,
    ProtoStrategy, SupportPairing, SupportSlice, VolumeImage, WindowRadius,
};
pub use error::{Error, Result};
pub use features::{BuiltinExtractorSpec, FeatureExtractor};
pub use pipeline::{run_episode, SegmentationResult};
