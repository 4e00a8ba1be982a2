//! Likelihood-driven sample selection for annotation.
//!
//! Unlabeled samples are scored by the expected log-likelihood of their heatmap
//! peaks (lowest first), by multi-peak entropy (highest first) or by a seeded
//! hash of their id (lowest first), and the extreme `B` are selected.

mod simulation;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::heatmap::{extract_peaks, Heatmap, HeatmapError, PeakConfig};
use crate::likelihood::{expected_log_likelihood, multi_peak_entropy, refine_pose, LikelihoodError};
use crate::model::{Pose, PoseModelParams};

pub use simulation::{
    run_simulation, GridConfig, NoiseConfig, OodGenerator, PoseGenerator, SelectionRecord, SimulationConfig,
    SimulationReport, StrategyMetrics,
};

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("sample `{0}` has no heatmap")]
    MissingHeatmap(String),
    #[error("no parameters for sample `{0}`")]
    MissingParams(String),
    #[error("budget {budget} exceeds the {pool} available samples")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("auc needs both classes, the {0} class is empty")]
    EmptyClass(&'static str),
    #[error("sample `{0}` is both labeled and unlabeled")]
    OverlappingPools(String),
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error("non-finite score for sample `{0}`")]
    NonFiniteScore(String),
    #[error("sample `{id}`: {source}")]
    Heatmap { id: String, source: HeatmapError },
    #[error("sample `{id}`: {source}")]
    Likelihood { id: String, source: LikelihoodError },
}

/// Acquisition strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Vl4pose,
    Entropy,
    Random,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Vl4pose => "vl4pose",
            StrategyKind::Entropy => "entropy",
            StrategyKind::Random => "random",
        }
    }

    /// Whether the lowest score is selected first.
    pub fn ascending(self) -> bool {
        !matches!(self, StrategyKind::Entropy)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vl4pose" => Ok(Self::Vl4pose),
            "entropy" | "multi_peak_entropy" => Ok(Self::Entropy),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Which likelihood ranks samples under the vl4pose strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    /// Expected log-likelihood over peak distributions.
    #[default]
    Expected,
    /// Objective of the best single peak configuration.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Vl4pose(Ranking),
    MultiPeakEntropy,
    Random { seed: u64 },
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::Vl4pose(_) => StrategyKind::Vl4pose,
            Strategy::MultiPeakEntropy => StrategyKind::Entropy,
            Strategy::Random { .. } => StrategyKind::Random,
        }
    }
}

/// Where per-sample network parameters come from.
#[derive(Debug, Clone, Copy)]
pub enum ParamsSource<'a> {
    Fitted(&'a PoseModelParams),
    PerImage(&'a BTreeMap<String, PoseModelParams>),
}

impl<'a> ParamsSource<'a> {
    pub fn get(&self, id: &str) -> Result<&'a PoseModelParams, ActiveError> {
        match self {
            ParamsSource::Fitted(p) => Ok(p),
            ParamsSource::PerImage(map) => map.get(id).ok_or_else(|| ActiveError::MissingParams(id.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledSample {
    pub heatmap: Option<Arc<Heatmap>>,
    /// Hidden ground truth, used only when simulating annotation.
    pub truth: Option<Pose>,
    pub is_ood: bool,
}

#[derive(Debug, Clone)]
pub struct SamplePool {
    labeled: BTreeMap<String, Pose>,
    unlabeled: BTreeMap<String, UnlabeledSample>,
    budget: usize,
}

impl SamplePool {
    pub fn new(
        labeled: BTreeMap<String, Pose>,
        unlabeled: BTreeMap<String, UnlabeledSample>,
        budget: usize,
    ) -> Result<Self, ActiveError> {
        if let Some(id) = labeled.keys().find(|id| unlabeled.contains_key(*id)) {
            return Err(ActiveError::OverlappingPools(id.clone()));
        }
        if budget > unlabeled.len() {
            return Err(ActiveError::BudgetExceedsPool { budget, pool: unlabeled.len() });
        }
        Ok(Self { labeled, unlabeled, budget })
    }

    pub fn labeled(&self) -> &BTreeMap<String, Pose> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeMap<String, UnlabeledSample> {
        &self.unlabeled
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Moves annotated samples into the labeled set using their hidden ground truth.
    pub fn annotate(&mut self, ids: &[String]) -> Result<(), ActiveError> {
        for id in ids {
            let sample = self.unlabeled.remove(id).ok_or_else(|| ActiveError::MissingHeatmap(id.clone()))?;
            let truth = sample.truth.ok_or_else(|| ActiveError::MissingParams(id.clone()))?;
            self.labeled.insert(id.clone(), truth);
        }
        Ok(())
    }
}

/// Per-sample scores keyed by id.
pub type ScoreTable = BTreeMap<String, f64>;

/// Uniform draw in `[0, 1)` from SHA-256 of the seed and the sample id.
pub fn random_draw(seed: u64, id: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Scores one heatmap under a strategy.
pub fn score_heatmap(
    id: &str,
    heatmap: &Heatmap,
    params: Option<&PoseModelParams>,
    strategy: Strategy,
    peaks: &PeakConfig,
) -> Result<f64, ActiveError> {
    if let Strategy::Random { seed } = strategy {
        return Ok(random_draw(seed, id));
    }
    let peak_set =
        extract_peaks(heatmap, peaks).map_err(|source| ActiveError::Heatmap { id: id.to_string(), source })?;
    let lik = |source| ActiveError::Likelihood { id: id.to_string(), source };
    let score = match strategy {
        Strategy::MultiPeakEntropy => multi_peak_entropy(&peak_set).map_err(lik)?,
        Strategy::Vl4pose(ranking) => {
            let params = params.ok_or_else(|| ActiveError::MissingParams(id.to_string()))?;
            match ranking {
                Ranking::Expected => expected_log_likelihood(&peak_set, params).map_err(lik)?.total,
                Ranking::Max => refine_pose(&peak_set, params).map_err(lik)?.objective,
            }
        }
        Strategy::Random { .. } => unreachable!(),
    };
    if !score.is_finite() {
        return Err(ActiveError::NonFiniteScore(id.to_string()));
    }
    Ok(score)
}

/// Scores every unlabeled sample; samples are scored in parallel.
pub fn score_pool(
    pool: &SamplePool,
    params: ParamsSource<'_>,
    strategy: Strategy,
    peaks: &PeakConfig,
) -> Result<ScoreTable, ActiveError> {
    pool.unlabeled
        .par_iter()
        .map(|(id, sample)| {
            let heatmap = sample.heatmap.as_ref().ok_or_else(|| ActiveError::MissingHeatmap(id.clone()))?;
            let p = match strategy {
                Strategy::Vl4pose(_) => Some(params.get(id)?),
                _ => None,
            };
            Ok((id.clone(), score_heatmap(id, heatmap, p, strategy, peaks)?))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: StrategyKind,
    /// Selected ids in priority order.
    pub selected: Vec<String>,
    pub scores: ScoreTable,
}

/// Orders ids by selection priority: score in the strategy's direction, then ascending id.
pub fn priority_order(scores: &ScoreTable, strategy: StrategyKind) -> Vec<String> {
    let mut entries: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    entries.sort_by(|a, b| {
        let by_score = if strategy.ascending() { a.1.total_cmp(&b.1) } else { b.1.total_cmp(&a.1) };
        by_score.then_with(|| a.0.cmp(b.0))
    });
    entries.into_iter().map(|(k, _)| k.clone()).collect()
}

/// Picks the extreme `budget` samples under the strategy's ordering.
pub fn select_batch(
    scores: &ScoreTable,
    strategy: StrategyKind,
    budget: usize,
) -> Result<SelectionResult, ActiveError> {
    if budget > scores.len() {
        return Err(ActiveError::BudgetExceedsPool { budget, pool: scores.len() });
    }
    let mut selected = priority_order(scores, strategy);
    selected.truncate(budget);
    Ok(SelectionResult { strategy, selected, scores: scores.clone() })
}

/// Normalized Mann–Whitney U: probability that a random OOD score lies below a
/// random in-distribution score, ties counting one half.
pub fn ood_ranking_auc(in_distribution: &[f64], ood: &[f64]) -> Result<f64, ActiveError> {
    if in_distribution.is_empty() {
        return Err(ActiveError::EmptyClass("in-distribution"));
    }
    if ood.is_empty() {
        return Err(ActiveError::EmptyClass("out-of-distribution"));
    }
    let mut all: Vec<(f64, bool)> =
        in_distribution.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks, 1-based
    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_id += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_id, n_ood) = (in_distribution.len() as f64, ood.len() as f64);
    let u = rank_sum_id - n_id * (n_id + 1.0) / 2.0;
    Ok(u / (n_id * n_ood))
}

/// Selection-priority value: lower means selected earlier.
pub(crate) fn priority_value(score: f64, strategy: StrategyKind) -> f64 {
    if strategy.ascending() {
        score
    } else {
        -score
    }
}

pub(crate) fn ids_set(ids: &[String]) -> BTreeSet<&str> {
    ids.iter().map(String::as_str).collect()
}
