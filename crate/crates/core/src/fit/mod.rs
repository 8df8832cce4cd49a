//! Fitting a scene to multi-view images of a posed body.

pub mod adam;
pub mod metrics;
pub mod targets;
pub mod trainer;

pub use adam::Adam;
pub use targets::{albedo, analytic_silhouette, make_synthetic_targets, trace_capsules, Target, TargetSet};
pub use trainer::{fit_scene, history_jsonl, reanimate, FitConfig, FitResult, FitSession, LearningRates, StepRecord};
pub use metrics::{depth_mae, masked_psnr, silhouette_iou};
