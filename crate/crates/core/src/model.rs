//! Skeleton trees, poses and per-link Gaussian parameters.
//!
//! Everything in here is validated on construction and immutable afterwards,
//! so the types can be shared freely between scoring threads.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest standard deviation (pixels) a distance link may carry.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Relative tolerance for the covariance symmetry check.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("skeleton has no joints")]
    NoJoints,
    #[error("joint name at index {0} is empty")]
    EmptyJointName(usize),
    #[error("duplicate joint name `{0}`")]
    DuplicateJointName(String),
    #[error("link {link} references unknown joint `{name}`")]
    UnknownJoint { link: usize, name: String },
    #[error("link {link} references joint index {index}, but there are only {count} joints")]
    JointIndexOutOfRange { link: usize, index: usize, count: usize },
    #[error("bad root: {0}")]
    BadRootIndex(String),
    #[error("link {link} connects joint `{joint}` to itself")]
    SelfLoop { link: usize, joint: String },
    #[error("joint `{joint}` has more than one parent (links {first} and {second})")]
    MultipleParents { joint: String, first: usize, second: usize },
    #[error("cycle detected through joint `{0}`")]
    CycleDetected(String),
    #[error("joint `{0}` is not connected to the root")]
    DisconnectedJoint(String),
    #[error("unsupported keypoint dimension {0}, expected 2 or 3")]
    BadDimension(usize),
    #[error("{context}: sigma must be positive and finite, got {sigma}")]
    SigmaNonPositive { context: String, sigma: f64 },
    #[error("{context}: mean distance must be finite and non-negative, got {mean}")]
    BadMeanDistance { context: String, mean: f64 },
    #[error("{context}: covariance is not symmetric positive definite ({reason})")]
    CovarianceNotSpd { context: String, reason: String },
    #[error("{context}: expected dimension {expected}, found {found}")]
    DimensionMismatch { context: String, expected: usize, found: usize },
    #[error("{context}: parameters are not of kind {expected:?}")]
    ModelKindMismatch { context: String, expected: ModelKind },
    #[error("expected {expected} link parameter entries, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("pose has {found} joints, skeleton has {expected}")]
    PoseLength { expected: usize, found: usize },
    #[error("joint {joint} has non-finite coordinates")]
    NonFiniteCoordinate { joint: usize },
}

/// A directed parent → child edge of the skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Link {
    pub parent: usize,
    pub child: usize,
}

/// Skeleton description as it appears in configuration files, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub joints: Vec<String>,
    pub root: String,
    pub dimension: usize,
    pub links: Vec<(String, String)>,
}

impl SkeletonSpec {
    /// The 16-joint single-person human skeleton rooted at the head.
    pub fn mpii() -> Self {
        let joints = [
            "head",
            "neck",
            "thorax",
            "pelvis",
            "r_hip",
            "r_knee",
            "r_ankle",
            "l_hip",
            "l_knee",
            "l_ankle",
            "r_shoulder",
            "r_elbow",
            "r_wrist",
            "l_shoulder",
            "l_elbow",
            "l_wrist",
        ];
        let links = [
            ("head", "neck"),
            ("neck", "thorax"),
            ("thorax", "pelvis"),
            ("pelvis", "r_hip"),
            ("r_hip", "r_knee"),
            ("r_knee", "r_ankle"),
            ("pelvis", "l_hip"),
            ("l_hip", "l_knee"),
            ("l_knee", "l_ankle"),
            ("thorax", "r_shoulder"),
            ("r_shoulder", "r_elbow"),
            ("r_elbow", "r_wrist"),
            ("thorax", "l_shoulder"),
            ("l_shoulder", "l_elbow"),
            ("l_elbow", "l_wrist"),
        ];
        Self {
            joints: joints.iter().map(|s| s.to_string()).collect(),
            root: "head".into(),
            dimension: 2,
            links: links.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

/// A validated tree of joints.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<String>,
    root: usize,
    dimension: usize,
    links: Vec<Link>,
    parent_link: Vec<Option<usize>>,
    child_links: Vec<Vec<usize>>,
    link_order: Vec<usize>,
    joint_order: Vec<usize>,
}

/// Validates a skeleton read from configuration, resolving joint names to indices.
pub fn validate_skeleton(candidate: &SkeletonSpec) -> Result<Skeleton, ModelError> {
    let index: HashMap<&str, usize> = candidate.joints.iter().enumerate().map(|(i, name)| (name.as_str(), i)).collect();
    let root = *index
        .get(candidate.root.as_str())
        .ok_or_else(|| ModelError::BadRootIndex(format!("root `{}` is not a joint", candidate.root)))?;
    let links = candidate
        .links
        .iter()
        .enumerate()
        .map(|(i, (parent, child))| {
            let lookup = |name: &String| {
                index
                    .get(name.as_str())
                    .copied()
                    .ok_or_else(|| ModelError::UnknownJoint { link: i, name: name.clone() })
            };
            Ok(Link { parent: lookup(parent)?, child: lookup(child)? })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Skeleton::new(candidate.joints.clone(), root, links, candidate.dimension)
}

impl Skeleton {
    pub fn new(joints: Vec<String>, root: usize, links: Vec<Link>, dimension: usize) -> Result<Self, ModelError> {
        let n = joints.len();
        if n == 0 {
            return Err(ModelError::NoJoints);
        }
        if dimension != 2 && dimension != 3 {
            return Err(ModelError::BadDimension(dimension));
        }
        let mut seen = HashMap::with_capacity(n);
        for (i, name) in joints.iter().enumerate() {
            if name.is_empty() {
                return Err(ModelError::EmptyJointName(i));
            }
            if seen.insert(name.as_str(), i).is_some() {
                return Err(ModelError::DuplicateJointName(name.clone()));
            }
        }
        if root >= n {
            return Err(ModelError::BadRootIndex(format!("root index {root} out of range for {n} joints")));
        }

        let mut parent_link: Vec<Option<usize>> = vec![None; n];
        for (i, link) in links.iter().enumerate() {
            for index in [link.parent, link.child] {
                if index >= n {
                    return Err(ModelError::JointIndexOutOfRange { link: i, index, count: n });
                }
            }
            if link.parent == link.child {
                return Err(ModelError::SelfLoop { link: i, joint: joints[link.child].clone() });
            }
            if let Some(first) = parent_link[link.child] {
                return Err(ModelError::MultipleParents { joint: joints[link.child].clone(), first, second: i });
            }
            parent_link[link.child] = Some(i);
        }

        // Every joint has at most one parent, so walking parent pointers either
        // terminates or loops. 0 = unvisited, 1 = on the current walk, 2 = done.
        let mut state = vec![0u8; n];
        for start in 0..n {
            let mut walk = Vec::new();
            let mut cur = start;
            loop {
                match state[cur] {
                    1 => return Err(ModelError::CycleDetected(joints[cur].clone())),
                    2 => break,
                    _ => {}
                }
                state[cur] = 1;
                walk.push(cur);
                match parent_link[cur] {
                    Some(l) => cur = links[l].parent,
                    None => break,
                }
            }
            for j in walk {
                state[j] = 2;
            }
        }

        if let Some(l) = parent_link[root] {
            return Err(ModelError::BadRootIndex(format!("root `{}` is the child of link {l}", joints[root])));
        }

        let mut child_links = vec![Vec::new(); n];
        for (i, link) in links.iter().enumerate() {
            child_links[link.parent].push(i);
        }

        let mut reached = vec![false; n];
        let mut joint_order = Vec::with_capacity(n);
        let mut link_order = Vec::with_capacity(links.len());
        let mut queue = VecDeque::from([root]);
        reached[root] = true;
        while let Some(j) = queue.pop_front() {
            joint_order.push(j);
            for &l in &child_links[j] {
                link_order.push(l);
                let c = links[l].child;
                reached[c] = true;
                queue.push_back(c);
            }
        }
        if let Some(j) = reached.iter().position(|r| !r) {
            return Err(ModelError::DisconnectedJoint(joints[j].clone()));
        }

        Ok(Self { joints, root, dimension, links, parent_link, child_links, link_order, joint_order })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn joints(&self) -> &[String] {
        &self.joints
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Index of the link whose child is `joint`; `None` for the root.
    pub fn parent_link(&self, joint: usize) -> Option<usize> {
        self.parent_link[joint]
    }

    /// Links leaving `joint`, in declaration order.
    pub fn child_links(&self, joint: usize) -> &[usize] {
        &self.child_links[joint]
    }

    /// Joints in breadth-first order from the root.
    pub fn joint_order(&self) -> &[usize] {
        &self.joint_order
    }

    pub fn to_spec(&self) -> SkeletonSpec {
        SkeletonSpec {
            joints: self.joints.clone(),
            root: self.joints[self.root].clone(),
            dimension: self.dimension,
            links: self.links.iter().map(|l| (self.joints[l.parent].clone(), self.joints[l.child].clone())).collect(),
        }
    }
}

/// Breadth-first link ordering: every link comes after the link that introduces
/// its parent joint, root links first, siblings in declaration order.
pub fn topological_link_order(skel: &Skeleton) -> &[usize] {
    &skel.link_order
}

/// One keypoint location per joint plus a presence flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    coordinates: Vec<Vec<f64>>,
    present: Vec<bool>,
}

impl Pose {
    pub fn new(coordinates: Vec<Vec<f64>>, present: Vec<bool>) -> Result<Self, ModelError> {
        if coordinates.len() != present.len() {
            return Err(ModelError::PoseLength { expected: coordinates.len(), found: present.len() });
        }
        for (j, c) in coordinates.iter().enumerate() {
            if present[j] && !c.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFiniteCoordinate { joint: j });
            }
        }
        Ok(Self { coordinates, present })
    }

    /// A pose with every joint present.
    pub fn complete(coordinates: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let present = vec![true; coordinates.len()];
        Self::new(coordinates, present)
    }

    /// Parses the `[[r, c], null, ...]` file representation; `null` marks a missing joint.
    pub fn from_optional(coords: Vec<Option<Vec<f64>>>) -> Result<Self, ModelError> {
        let present = coords.iter().map(Option::is_some).collect();
        let coordinates = coords.into_iter().map(Option::unwrap_or_default).collect();
        Self::new(coordinates, present)
    }

    pub fn to_optional(&self) -> Vec<Option<Vec<f64>>> {
        self.coordinates.iter().zip(&self.present).map(|(c, &p)| p.then(|| c.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn coordinates(&self) -> &[Vec<f64>] {
        &self.coordinates
    }

    pub fn coordinate(&self, joint: usize) -> &[f64] {
        &self.coordinates[joint]
    }

    pub fn is_present(&self, joint: usize) -> bool {
        self.present[joint]
    }

    pub fn is_complete(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Checks joint count and per-joint dimension against a skeleton.
    pub fn check_against(&self, skel: &Skeleton) -> Result<(), ModelError> {
        if self.len() != skel.joint_count() {
            return Err(ModelError::PoseLength { expected: skel.joint_count(), found: self.len() });
        }
        for (j, c) in self.coordinates.iter().enumerate() {
            if self.present[j] && c.len() != skel.dimension() {
                return Err(ModelError::DimensionMismatch {
                    context: format!("joint `{}`", skel.joints()[j]),
                    expected: skel.dimension(),
                    found: c.len(),
                });
            }
        }
        Ok(())
    }

    /// Same pose shifted by `delta`.
    pub fn translated(&self, delta: &[f64]) -> Self {
        let coordinates = self.coordinates.iter().map(|c| c.iter().zip(delta).map(|(a, b)| a + b).collect()).collect();
        Self { coordinates, present: self.present.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Distance,
    Offset,
}

/// Univariate Gaussian over the parent–child euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceParams {
    mean_distance: f64,
    sigma: f64,
}

impl DistanceParams {
    /// Validates the parameters; sigmas in `(0, SIGMA_FLOOR)` are raised to the floor.
    pub fn new(mean_distance: f64, sigma: f64) -> Result<Self, ModelError> {
        Self::with_context(mean_distance, sigma, "distance link")
    }

    fn with_context(mean_distance: f64, sigma: f64, context: &str) -> Result<Self, ModelError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(ModelError::SigmaNonPositive { context: context.to_string(), sigma });
        }
        if !(mean_distance.is_finite() && mean_distance >= 0.0) {
            return Err(ModelError::BadMeanDistance { context: context.to_string(), mean: mean_distance });
        }
        Ok(Self { mean_distance, sigma: sigma.max(SIGMA_FLOOR) })
    }

    pub fn mean_distance(&self) -> f64 {
        self.mean_distance
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Multivariate Gaussian over the child − (parent + offset) residual.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetParams {
    offset: Vec<f64>,
    covariance: DMatrix<f64>,
    cholesky: DMatrix<f64>,
    log_det: f64,
}

impl OffsetParams {
    pub fn new(offset: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::with_context(offset, covariance, "offset link")
    }

    fn with_context(offset: Vec<f64>, covariance: DMatrix<f64>, context: &str) -> Result<Self, ModelError> {
        let d = offset.len();
        let spd_err = |reason: String| ModelError::CovarianceNotSpd { context: context.to_string(), reason };
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(ModelError::DimensionMismatch {
                context: format!("{context}: covariance"),
                expected: d,
                found: covariance.nrows().max(covariance.ncols()),
            });
        }
        if !offset.iter().all(|v| v.is_finite()) {
            return Err(spd_err("offset has non-finite entries".into()));
        }
        if !covariance.iter().all(|v| v.is_finite()) {
            return Err(spd_err("non-finite entries".into()));
        }
        let scale = covariance.amax();
        for i in 0..d {
            for j in (i + 1)..d {
                let (a, b) = (covariance[(i, j)], covariance[(j, i)]);
                if (a - b).abs() > SYMMETRY_TOLERANCE * scale {
                    return Err(spd_err(format!("entries ({i},{j}) and ({j},{i}) differ: {a} vs {b}")));
                }
            }
        }
        let chol = covariance.clone().cholesky().ok_or_else(|| spd_err("Cholesky factorization failed".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(spd_err("degenerate determinant".into()));
        }
        Ok(Self { offset, covariance, cholesky: l, log_det })
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular factor `L` with `L Lᵀ = Σ`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.cholesky
    }

    /// `ln det Σ`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn dimension(&self) -> usize {
        self.offset.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkParams {
    Distance(DistanceParams),
    Offset(OffsetParams),
}

impl LinkParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            LinkParams::Distance(_) => ModelKind::Distance,
            LinkParams::Offset(_) => ModelKind::Offset,
        }
    }

    pub fn from_spec(spec: &LinkParamsSpec, context: &str) -> Result<Self, ModelError> {
        match spec {
            LinkParamsSpec::Distance { mean, sigma } => {
                DistanceParams::with_context(*mean, *sigma, context).map(LinkParams::Distance)
            }
            LinkParamsSpec::Offset { offset, covariance } => {
                let d = offset.len();
                if covariance.len() != d || covariance.iter().any(|row| row.len() != d) {
                    return Err(ModelError::DimensionMismatch {
                        context: format!("{context}: covariance"),
                        expected: d,
                        found: covariance.len(),
                    });
                }
                let m = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
                OffsetParams::with_context(offset.clone(), m, context).map(LinkParams::Offset)
            }
        }
    }

    pub fn to_spec(&self) -> LinkParamsSpec {
        match self {
            LinkParams::Distance(p) => LinkParamsSpec::Distance { mean: p.mean_distance, sigma: p.sigma },
            LinkParams::Offset(p) => LinkParamsSpec::Offset {
                offset: p.offset.clone(),
                covariance: (0..p.dimension())
                    .map(|i| (0..p.dimension()).map(|j| p.covariance[(i, j)]).collect())
                    .collect(),
            },
        }
    }
}

/// File form of one link's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkParamsSpec {
    Distance { mean: f64, sigma: f64 },
    Offset { offset: Vec<f64>, covariance: Vec<Vec<f64>> },
}

/// File form of a full parameter set; link entries align positionally with the skeleton's links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSpec {
    pub model_kind: ModelKind,
    pub params: Vec<LinkParamsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_params: Option<LinkParamsSpec>,
}

/// Skeleton and parameters in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(flatten)]
    pub skeleton: SkeletonSpec,
    #[serde(flatten)]
    pub params: ParamsSpec,
}

/// Bayesian-network parameters bound to a skeleton.
///
/// The optional root prior is evaluated as a link whose parent sits at the
/// origin; without it the root contributes nothing (uniform prior).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseModelParams {
    skeleton: Arc<Skeleton>,
    kind: ModelKind,
    links: Vec<LinkParams>,
    root: Option<LinkParams>,
}

impl PoseModelParams {
    pub fn new(
        skeleton: Arc<Skeleton>,
        kind: ModelKind,
        links: Vec<LinkParams>,
        root: Option<LinkParams>,
    ) -> Result<Self, ModelError> {
        if links.len() != skeleton.link_count() {
            return Err(ModelError::ParamCount { expected: skeleton.link_count(), found: links.len() });
        }
        for (i, p) in links.iter().enumerate() {
            let context = link_context(&skeleton, i);
            if p.kind() != kind {
                return Err(ModelError::ModelKindMismatch { context, expected: kind });
            }
            check_dimension(p, skeleton.dimension(), context)?;
        }
        if let Some(p) = &root {
            check_dimension(p, skeleton.dimension(), "root prior".to_string())?;
        }
        Ok(Self { skeleton, kind, links, root })
    }

    pub fn from_spec(skeleton: Arc<Skeleton>, spec: &ParamsSpec) -> Result<Self, ModelError> {
        if spec.params.len() != skeleton.link_count() {
            return Err(ModelError::ParamCount { expected: skeleton.link_count(), found: spec.params.len() });
        }
        let links = spec
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| LinkParams::from_spec(p, &link_context(&skeleton, i)))
            .collect::<Result<Vec<_>, _>>()?;
        let root = spec.root_params.as_ref().map(|p| LinkParams::from_spec(p, "root prior")).transpose()?;
        Self::new(skeleton, spec.model_kind, links, root)
    }

    pub fn to_spec(&self) -> ParamsSpec {
        ParamsSpec {
            model_kind: self.kind,
            params: self.links.iter().map(LinkParams::to_spec).collect(),
            root_params: self.root.as_ref().map(LinkParams::to_spec),
        }
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument { skeleton: self.skeleton.to_spec(), params: self.to_spec() }
    }

    pub fn skeleton(&self) -> &Arc<Skeleton> {
        &self.skeleton
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn links(&self) -> &[LinkParams] {
        &self.links
    }

    pub fn link(&self, index: usize) -> &LinkParams {
        &self.links[index]
    }

    pub fn root_params(&self) -> Option<&LinkParams> {
        self.root.as_ref()
    }

    /// Copy with one link's parameters replaced.
    pub fn with_link(&self, index: usize, params: LinkParams) -> Result<Self, ModelError> {
        let mut links = self.links.clone();
        links[index] = params;
        Self::new(self.skeleton.clone(), self.kind, links, self.root.clone())
    }
}

fn link_context(skel: &Skeleton, i: usize) -> String {
    let l = skel.links()[i];
    format!("link {i} ({} -> {})", skel.joints()[l.parent], skel.joints()[l.child])
}

fn check_dimension(p: &LinkParams, dimension: usize, context: String) -> Result<(), ModelError> {
    if let LinkParams::Offset(o) = p {
        if o.dimension() != dimension {
            return Err(ModelError::DimensionMismatch { context, expected: dimension, found: o.dimension() });
        }
    }
    Ok(())
}
