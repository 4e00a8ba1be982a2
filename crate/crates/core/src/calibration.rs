//! Closed-form maximum-likelihood fitting of link parameters from labeled poses,
//! and loading of externally predicted per-image parameters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    DistanceParams, LinkParams, ModelDocument, ModelError, ModelKind, OffsetParams, ParamsSpec, Pose, PoseModelParams,
    Skeleton, SkeletonSpec,
};

/// First ridge tried when regularizing a fitted covariance.
pub const MIN_RIDGE: f64 = 1e-6;
const MAX_RIDGE_STEPS: usize = 16;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid weight {weight} for pose {index}")]
    BadWeight { index: usize, weight: f64 },
    #[error("pose {index}: {source}")]
    BadPose { index: usize, source: ModelError },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("image `{id}`: {source}")]
    SigmaNonPositive { id: String, source: ModelError },
    #[error("image `{id}`: {source}")]
    CovarianceNotSpd { id: String, source: ModelError },
    #[error("image `{id}`: {source}")]
    InvalidEntry { id: String, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Complete labeled poses with optional positive per-pose weights.
#[derive(Debug, Clone)]
pub struct LabeledPoseSet {
    skeleton: Arc<Skeleton>,
    poses: Vec<Pose>,
    weights: Vec<f64>,
}

impl LabeledPoseSet {
    pub fn new(skeleton: Arc<Skeleton>, poses: Vec<Pose>, weights: Option<Vec<f64>>) -> Result<Self, CalibrationError> {
        if poses.len() < 2 {
            return Err(CalibrationError::InsufficientData(format!(
                "need at least 2 labeled poses, got {}",
                poses.len()
            )));
        }
        for (index, pose) in poses.iter().enumerate() {
            pose.check_against(&skeleton).map_err(|source| CalibrationError::BadPose { index, source })?;
            if let Some(j) = (0..pose.len()).find(|&j| !pose.is_present(j)) {
                return Err(CalibrationError::BadPose {
                    index,
                    source: ModelError::DisconnectedJoint(skeleton.joints()[j].clone()),
                });
            }
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; poses.len()]);
        if weights.len() != poses.len() {
            return Err(CalibrationError::InsufficientData(format!(
                "{} weights for {} poses",
                weights.len(),
                poses.len()
            )));
        }
        if let Some((index, &weight)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(CalibrationError::BadWeight { index, weight });
        }
        Ok(Self { skeleton, poses, weights })
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        &self.skeleton
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per link: weighted mean distance and population standard deviation, floored.
pub fn fit_distance_params(data: &LabeledPoseSet) -> Result<PoseModelParams, CalibrationError> {
    let skel = &data.skeleton;
    let total_weight: f64 = data.weights.iter().sum();
    let links = skel
        .links()
        .iter()
        .map(|link| {
            let dists: Vec<f64> =
                data.poses.iter().map(|p| distance(p.coordinate(link.parent), p.coordinate(link.child))).collect();
            let mean = dists.iter().zip(&data.weights).map(|(d, w)| w * d).sum::<f64>() / total_weight;
            let var = dists.iter().zip(&data.weights).map(|(d, w)| w * (d - mean).powi(2)).sum::<f64>() / total_weight;
            DistanceParams::new(mean, var.sqrt().max(crate::model::SIGMA_FLOOR)).map(LinkParams::Distance)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PoseModelParams::new(skel.clone(), ModelKind::Distance, links, None)?)
}

/// Per link: weighted mean of `child − parent` and its population covariance plus
/// the smallest ridge `10^k · I` (k ≥ −6) that makes the covariance factorizable.
pub fn fit_offset_params(data: &LabeledPoseSet) -> Result<PoseModelParams, CalibrationError> {
    let skel = &data.skeleton;
    let d = skel.dimension();
    if data.poses.len() < d + 1 {
        return Err(CalibrationError::InsufficientData(format!(
            "offset model in {d}D needs at least {} poses, got {}",
            d + 1,
            data.poses.len()
        )));
    }
    let total_weight: f64 = data.weights.iter().sum();
    let links = skel
        .links()
        .iter()
        .enumerate()
        .map(|(l, link)| {
            let residuals: Vec<Vec<f64>> = data
                .poses
                .iter()
                .map(|p| {
                    let (a, b) = (p.coordinate(link.parent), p.coordinate(link.child));
                    b.iter().zip(a).map(|(c, p)| c - p).collect()
                })
                .collect();
            let mut mean = vec![0.0; d];
            for (r, w) in residuals.iter().zip(&data.weights) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += w * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= total_weight);
            let mut cov = DMatrix::<f64>::zeros(d, d);
            for (r, w) in residuals.iter().zip(&data.weights) {
                for i in 0..d {
                    for j in i..d {
                        cov[(i, j)] += w * (r[i] - mean[i]) * (r[j] - mean[j]);
                    }
                }
            }
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] /= total_weight;
                    cov[(j, i)] = cov[(i, j)];
                }
            }
            let mut ridge = MIN_RIDGE;
            for _ in 0..MAX_RIDGE_STEPS {
                let regularized = &cov + DMatrix::identity(d, d) * ridge;
                if let Ok(p) = OffsetParams::new(mean.clone(), regularized) {
                    return Ok(LinkParams::Offset(p));
                }
                ridge *= 10.0;
            }
            Err(ModelError::CovarianceNotSpd {
                context: format!("link {l}"),
                reason: format!("no ridge up to {ridge:e} made the covariance factorizable"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PoseModelParams::new(skel.clone(), ModelKind::Offset, links, None)?)
}

/// Parses one parameter set. A document that also carries a skeleton must carry `skeleton`.
pub fn parse_params(json: &str, skeleton: &Arc<Skeleton>) -> Result<PoseModelParams, CalibrationError> {
    let value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| CalibrationError::SchemaError(e.to_string()))?;
    let spec = if value.get("joints").is_some() {
        let doc: ModelDocument =
            serde_json::from_value(value).map_err(|e| CalibrationError::SchemaError(e.to_string()))?;
        if doc.skeleton != skeleton.to_spec() {
            return Err(CalibrationError::SchemaError(
                "skeleton in the parameter file differs from the configured skeleton".into(),
            ));
        }
        doc.params
    } else {
        serde_json::from_value(value).map_err(|e| CalibrationError::SchemaError(e.to_string()))?
    };
    Ok(PoseModelParams::from_spec(skeleton.clone(), &spec)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PerImageDocument {
    #[serde(flatten)]
    skeleton: Option<SkeletonSpec>,
    per_image: BTreeMap<String, serde_json::Value>,
}

fn entry_error(id: &str, source: ModelError) -> CalibrationError {
    let id = id.to_string();
    match source {
        ModelError::SigmaNonPositive { .. } => CalibrationError::SigmaNonPositive { id, source },
        ModelError::CovarianceNotSpd { .. } => CalibrationError::CovarianceNotSpd { id, source },
        _ => CalibrationError::InvalidEntry { id, source },
    }
}

/// Parses a `{"per_image": {id: params, ...}}` document. Every entry is validated
/// independently against `skeleton`; skeleton fields, if present, must match it.
pub fn parse_image_params(
    json: &str,
    skeleton: &Arc<Skeleton>,
) -> Result<BTreeMap<String, PoseModelParams>, CalibrationError> {
    let doc: PerImageDocument = serde_json::from_str(json).map_err(|e| CalibrationError::SchemaError(e.to_string()))?;
    if let Some(spec) = &doc.skeleton {
        if *spec != skeleton.to_spec() {
            return Err(CalibrationError::SchemaError(
                "skeleton in the per-image file differs from the configured skeleton".into(),
            ));
        }
    }
    doc.per_image
        .into_iter()
        .map(|(id, value)| {
            let spec: ParamsSpec = serde_json::from_value(value)
                .map_err(|e| CalibrationError::SchemaError(format!("image `{id}`: {e}")))?;
            let params = PoseModelParams::from_spec(skeleton.clone(), &spec).map_err(|e| entry_error(&id, e))?;
            Ok((id, params))
        })
        .collect()
}

pub fn load_image_params(
    path: impl AsRef<Path>,
    skeleton: &Arc<Skeleton>,
) -> Result<BTreeMap<String, PoseModelParams>, CalibrationError> {
    parse_image_params(&std::fs::read_to_string(path)?, skeleton)
}

/// Serializes a per-image parameter map in the form [`parse_image_params`] reads.
pub fn image_params_to_json(map: &BTreeMap<String, PoseModelParams>) -> String {
    let per_image: BTreeMap<&String, ParamsSpec> = map.iter().map(|(k, v)| (k, v.to_spec())).collect();
    serde_json::to_string(&serde_json::json!({ "per_image": per_image })).expect("plain data serializes")
}
