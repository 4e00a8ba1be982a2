//! Skeletal-likelihood scoring for keypoint estimators.
//!
//! A pose is modelled as a tree-structured Bayesian network over joints with
//! one Gaussian conditional per parent → child link. The crate scores poses
//! and heatmap peak sets under that network, refines poses by choosing the
//! most likely combination of heatmap peaks, and ranks unlabeled samples for
//! annotation from least to most likely.

pub mod active;
pub mod calibration;
pub mod formats;
pub mod heatmap;
pub mod likelihood;
pub mod model;

pub use active::{
    ood_ranking_auc, run_simulation, score_pool, select_batch, ActiveError, ParamsSource, Ranking, SamplePool,
    ScoreTable, SelectionResult, SimulationConfig, SimulationReport, Strategy, StrategyKind, UnlabeledSample,
};
pub use calibration::{
    fit_distance_params, fit_offset_params, load_image_params, parse_image_params, parse_params, CalibrationError,
    LabeledPoseSet,
};
pub use heatmap::{
    extract_peaks, local_maxima, normalize_peaks, read_heatmap_file, render_gaussian_heatmap, write_heatmap_file,
    Distractor, Heatmap, HeatmapError, Peak, PeakConfig, PeakSet,
};
pub use likelihood::{
    brute_force_best_pose, expected_log_likelihood, link_log_density, link_log_density_distance,
    link_log_density_offset, multi_peak_entropy, point_log_likelihood, refine_pose, LikelihoodError, LikelihoodMode,
    LikelihoodReport, RefinedPose,
};
pub use model::{
    topological_link_order, validate_skeleton, DistanceParams, Link, LinkParams, ModelError, ModelKind, OffsetParams,
    Pose, PoseModelParams, Skeleton, SkeletonSpec,
};
