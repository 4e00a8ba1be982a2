//! Pose log-likelihoods under the skeletal Bayesian network.
//!
//! The network factorizes as a root prior times one Gaussian conditional per
//! link. Three evaluations are provided: a point pose, the expectation over
//! independent per-joint peak distributions, and the single peak configuration
//! maximizing `Σ log p̂ + log q` (found by max-sum dynamic programming over the
//! tree, with an exhaustive search as the reference).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{Peak, PeakSet};
use crate::model::{DistanceParams, LinkParams, ModelError, OffsetParams, Pose, PoseModelParams};

/// `ln(2π)`
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exhaustive search refuses more configurations than this.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LikelihoodError {
    #[error("joint `{0}` is missing")]
    MissingJoint(String),
    #[error("joint `{joint}` has dimension {found}, the model expects {expected}")]
    DimensionMismatch { joint: String, expected: usize, found: usize },
    #[error("peak set covers {found} joints, skeleton has {expected}")]
    JointCountMismatch { expected: usize, found: usize },
    #[error("joint {0} has no peaks")]
    EmptyPeakSet(usize),
    #[error("{0} configurations exceed the exhaustive-search limit")]
    SearchSpaceTooLarge(u128),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodMode {
    Point,
    Expected,
    Refined,
}

/// Log-likelihood (nats) split into the root prior and one term per link, in link order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub mode: LikelihoodMode,
    pub total: f64,
    #[serde(rename = "per_link")]
    pub per_link_terms: Vec<f64>,
    pub root_term: f64,
}

/// The highest-scoring peak configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPose {
    pub pose: Pose,
    /// `Σ log p̂(chosen) + root term + Σ link log-densities`.
    pub objective: f64,
    /// Point log-likelihood of `pose` (no peak-probability terms).
    pub log_likelihood: f64,
    pub chosen_peak_index: Vec<usize>,
}

impl RefinedPose {
    pub fn report(&self, params: &PoseModelParams) -> LikelihoodReport {
        let mut report = point_log_likelihood(&self.pose, params).expect("refined poses are complete");
        report.mode = LikelihoodMode::Refined;
        report
    }
}

pub fn link_log_density_distance(parent: &[f64], child: &[f64], params: &DistanceParams) -> f64 {
    let dist = parent.iter().zip(child).map(|(p, c)| (c - p) * (c - p)).sum::<f64>().sqrt();
    let z = (dist - params.mean_distance()) / params.sigma();
    -0.5 * z * z - params.sigma().ln() - 0.5 * LN_2PI
}

pub fn link_log_density_offset(parent: &[f64], child: &[f64], params: &OffsetParams) -> f64 {
    let d = params.dimension();
    let l = params.cholesky_factor();
    let offset = params.offset();
    // forward substitution L z = r; the quadratic form is |z|²
    let mut z = [0.0f64; 8];
    let mut z_vec;
    let z: &mut [f64] = if d <= z.len() {
        &mut z[..d]
    } else {
        z_vec = vec![0.0; d];
        &mut z_vec
    };
    let mut quad = 0.0;
    for i in 0..d {
        let mut v = child[i] - parent[i] - offset[i];
        for k in 0..i {
            v -= l[(i, k)] * z[k];
        }
        z[i] = v / l[(i, i)];
        quad += z[i] * z[i];
    }
    -0.5 * quad - 0.5 * params.log_det() - 0.5 * d as f64 * LN_2PI
}

pub fn link_log_density(parent: &[f64], child: &[f64], params: &LinkParams) -> f64 {
    match params {
        LinkParams::Distance(p) => link_log_density_distance(parent, child, p),
        LinkParams::Offset(p) => link_log_density_offset(parent, child, p),
    }
}

/// Root prior log-density: the root parameters act as a link from the origin.
/// Zero when the model carries no root prior.
pub fn root_log_density(location: &[f64], params: &PoseModelParams) -> f64 {
    match params.root_params() {
        None => 0.0,
        Some(p) => {
            let origin = vec![0.0; location.len()];
            link_log_density(&origin, location, p)
        }
    }
}

pub fn point_log_likelihood(pose: &Pose, params: &PoseModelParams) -> Result<LikelihoodReport, LikelihoodError> {
    let skel = params.skeleton();
    if pose.len() != skel.joint_count() {
        return Err(ModelError::PoseLength { expected: skel.joint_count(), found: pose.len() }.into());
    }
    for j in 0..pose.len() {
        if !pose.is_present(j) {
            return Err(LikelihoodError::MissingJoint(skel.joints()[j].clone()));
        }
        let found = pose.coordinate(j).len();
        if found != skel.dimension() {
            return Err(LikelihoodError::DimensionMismatch {
                joint: skel.joints()[j].clone(),
                expected: skel.dimension(),
                found,
            });
        }
    }
    let root_term = root_log_density(pose.coordinate(skel.root()), params);
    let per_link_terms: Vec<f64> = skel
        .links()
        .iter()
        .zip(params.links())
        .map(|(link, p)| link_log_density(pose.coordinate(link.parent), pose.coordinate(link.child), p))
        .collect();
    let total = per_link_terms.iter().fold(root_term, |acc, t| acc + t);
    Ok(LikelihoodReport { mode: LikelihoodMode::Point, total, per_link_terms, root_term })
}

fn check_peaks(peaks: &PeakSet, params: &PoseModelParams) -> Result<(), LikelihoodError> {
    let skel = params.skeleton();
    if peaks.joint_count() != skel.joint_count() {
        return Err(LikelihoodError::JointCountMismatch { expected: skel.joint_count(), found: peaks.joint_count() });
    }
    if skel.dimension() != 2 {
        return Err(LikelihoodError::DimensionMismatch {
            joint: skel.joints()[skel.root()].clone(),
            expected: skel.dimension(),
            found: 2,
        });
    }
    if let Some(j) = peaks.iter().position(<[Peak]>::is_empty) {
        return Err(LikelihoodError::EmptyPeakSet(j));
    }
    Ok(())
}

/// Expected log-likelihood under independent per-joint peak distributions.
///
/// Each link term is weighted by the pairwise marginal `p̂(parent)·p̂(child)`.
pub fn expected_log_likelihood(peaks: &PeakSet, params: &PoseModelParams) -> Result<LikelihoodReport, LikelihoodError> {
    check_peaks(peaks, params)?;
    let skel = params.skeleton();
    let root_term =
        peaks.joint(skel.root()).iter().map(|a| a.prob * root_log_density(&a.location(), params)).sum::<f64>();
    let per_link_terms: Vec<f64> = skel
        .links()
        .iter()
        .zip(params.links())
        .map(|(link, p)| {
            let mut term = 0.0;
            for a in peaks.joint(link.parent) {
                let parent = a.location();
                let mut inner = 0.0;
                for b in peaks.joint(link.child) {
                    inner += b.prob * link_log_density(&parent, &b.location(), p);
                }
                term += a.prob * inner;
            }
            term
        })
        .collect();
    let total = per_link_terms.iter().fold(root_term, |acc, t| acc + t);
    Ok(LikelihoodReport { mode: LikelihoodMode::Expected, total, per_link_terms, root_term })
}

/// Scores one configuration (`choice[j]` indexes joint `j`'s peaks):
/// root term, then link terms in link order, then `ln p̂` in joint order.
pub fn refinement_objective(peaks: &PeakSet, params: &PoseModelParams, choice: &[usize]) -> f64 {
    let skel = params.skeleton();
    let loc = |j: usize| peaks.joint(j)[choice[j]].location();
    let mut total = root_log_density(&loc(skel.root()), params);
    for (link, p) in skel.links().iter().zip(params.links()) {
        total += link_log_density(&loc(link.parent), &loc(link.child), p);
    }
    for (j, &k) in choice.iter().enumerate() {
        total += peaks.joint(j)[k].prob.ln();
    }
    total
}

fn refined_from_choice(peaks: &PeakSet, params: &PoseModelParams, choice: Vec<usize>) -> RefinedPose {
    let coords = choice.iter().enumerate().map(|(j, &k)| peaks.joint(j)[k].location().to_vec()).collect();
    let pose = Pose::complete(coords).expect("grid locations are finite");
    let log_likelihood = point_log_likelihood(&pose, params).expect("checked above").total;
    RefinedPose {
        objective: refinement_objective(peaks, params, &choice),
        pose,
        log_likelihood,
        chosen_peak_index: choice,
    }
}

/// Max-sum dynamic programming from the leaves to the root.
///
/// For every joint and candidate peak the best attainable subtree score is
/// stored; the root picks its best candidate and choices are read back down
/// the tree. Ties go to the lowest peak index at each joint.
pub fn refine_pose(peaks: &PeakSet, params: &PoseModelParams) -> Result<RefinedPose, LikelihoodError> {
    check_peaks(peaks, params)?;
    let skel = params.skeleton();
    let n = skel.joint_count();

    let mut subtree: Vec<Vec<f64>> = vec![Vec::new(); n];
    // best child peak for each (link, parent peak)
    let mut back: Vec<Vec<usize>> = vec![Vec::new(); skel.link_count()];

    for &j in skel.joint_order().iter().rev() {
        let candidates = peaks.joint(j);
        let mut scores: Vec<f64> = candidates.iter().map(|p| p.prob.ln()).collect();
        if j == skel.root() {
            for (s, p) in scores.iter_mut().zip(candidates) {
                *s += root_log_density(&p.location(), params);
            }
        }
        for &l in skel.child_links(j) {
            let child = skel.links()[l].child;
            let child_peaks = peaks.joint(child);
            let link = params.link(l);
            let mut choice = Vec::with_capacity(candidates.len());
            for (s, p) in scores.iter_mut().zip(candidates) {
                let parent = p.location();
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (m, c) in child_peaks.iter().enumerate() {
                    let v = link_log_density(&parent, &c.location(), link) + subtree[child][m];
                    if v > best {
                        best = v;
                        arg = m;
                    }
                }
                *s += best;
                choice.push(arg);
            }
            back[l] = choice;
        }
        subtree[j] = scores;
    }

    let mut choice = vec![0usize; n];
    let root_scores = &subtree[skel.root()];
    for (k, &v) in root_scores.iter().enumerate() {
        if v > root_scores[choice[skel.root()]] {
            choice[skel.root()] = k;
        }
    }
    for &j in skel.joint_order() {
        for &l in skel.child_links(j) {
            choice[skel.links()[l].child] = back[l][choice[j]];
        }
    }
    Ok(refined_from_choice(peaks, params, choice))
}

/// Scores every configuration with [`refinement_objective`].
///
/// Among equal scores the configuration that is lexicographically smallest in
/// breadth-first joint order wins, matching [`refine_pose`].
pub fn brute_force_best_pose(peaks: &PeakSet, params: &PoseModelParams) -> Result<RefinedPose, LikelihoodError> {
    check_peaks(peaks, params)?;
    let count = peaks.configuration_count();
    if count > BRUTE_FORCE_LIMIT {
        return Err(LikelihoodError::SearchSpaceTooLarge(count));
    }
    let skel = params.skeleton();
    let order = skel.joint_order();
    let sizes: Vec<usize> = (0..skel.joint_count()).map(|j| peaks.joint(j).len()).collect();
    let key = |c: &[usize]| order.iter().map(|&j| c[j]).collect::<Vec<_>>();

    let mut current = vec![0usize; sizes.len()];
    let mut best = current.clone();
    let mut best_score = refinement_objective(peaks, params, &current);
    let mut best_key = key(&best);
    'outer: loop {
        let mut j = 0;
        loop {
            if j == sizes.len() {
                break 'outer;
            }
            current[j] += 1;
            if current[j] < sizes[j] {
                break;
            }
            current[j] = 0;
            j += 1;
        }
        let score = refinement_objective(peaks, params, &current);
        if score > best_score || (score == best_score && key(&current) < best_key) {
            best_score = score;
            best.clone_from(&current);
            best_key = key(&best);
        }
    }
    Ok(refined_from_choice(peaks, params, best))
}

/// `Σ_joints −Σ_k p_k ln p_k` over the normalized peak probabilities.
pub fn multi_peak_entropy(peaks: &PeakSet) -> Result<f64, LikelihoodError> {
    let mut total = 0.0;
    for (j, joint) in peaks.iter().enumerate() {
        if joint.is_empty() {
            return Err(LikelihoodError::EmptyPeakSet(j));
        }
        for p in joint {
            if p.prob > 0.0 {
                total -= p.prob * p.prob.ln();
            }
        }
    }
    Ok(total)
}
