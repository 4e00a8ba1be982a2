use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ids_set, ood_ranking_auc, priority_order, priority_value, random_draw, score_pool, ActiveError, ParamsSource,
    Ranking, SamplePool, ScoreTable, Strategy, StrategyKind, UnlabeledSample,
};
use crate::calibration::{fit_distance_params, LabeledPoseSet};
use crate::heatmap::{render_gaussian_heatmap, Distractor, PeakConfig};
use crate::likelihood::point_log_likelihood;
use crate::model::{validate_skeleton, Pose, PoseModelParams, Skeleton, SkeletonSpec};

/// Nominal `(row, col)` link vectors of the built-in skeleton, in link order.
const TEMPLATE: [(f64, f64); 15] = [
    (3.0, 0.0),
    (3.0, 0.0),
    (7.0, 0.0),
    (1.0, -3.0),
    (6.0, 0.0),
    (6.0, 0.0),
    (1.0, 3.0),
    (6.0, 0.0),
    (6.0, 0.0),
    (0.0, -4.0),
    (5.0, -1.0),
    (5.0, 0.0),
    (0.0, 4.0),
    (5.0, 1.0),
    (5.0, 0.0),
];

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { height: 64, width: 64 }
    }
}

/// In-distribution pose generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseGenerator {
    /// Multiplier on the template link lengths.
    pub length_scale: f64,
    /// Standard deviation of each link length, in pixels.
    pub length_sd: f64,
    /// Half-width of the uniform jitter applied to each link direction.
    pub angle_range_deg: f64,
}

impl Default for PoseGenerator {
    fn default() -> Self {
        Self { length_scale: 1.5, length_sd: 0.5, angle_range_deg: 10.0 }
    }
}

/// Out-of-distribution generator, relative to the in-distribution one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodGenerator {
    /// Shift added to every link length, in units of `length_sd`.
    pub length_shift_sd: f64,
    /// Direction jitter; defaults to the in-distribution value.
    pub angle_range_deg: Option<f64>,
}

impl Default for OodGenerator {
    fn default() -> Self {
        Self { length_shift_sd: 5.0, angle_range_deg: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub peak_sigma: f64,
    /// Distractor bumps per unlabeled heatmap, each on a uniformly drawn joint.
    pub distractors: usize,
    pub distractor_amplitude: f64,
    /// Half-width of the square around the joint's true cell where its distractor lands;
    /// `None` places it anywhere on the grid.
    pub distractor_radius: Option<usize>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { peak_sigma: 1.5, distractors: 0, distractor_amplitude: 0.5, distractor_radius: None }
    }
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Vl4pose, StrategyKind::Entropy, StrategyKind::Random]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub seed: u64,
    pub rounds: usize,
    pub budget: usize,
    pub initial_labeled: usize,
    pub unlabeled_in_distribution: usize,
    pub unlabeled_ood: usize,
    #[serde(default)]
    pub held_out: usize,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub pose: PoseGenerator,
    #[serde(default)]
    pub ood: OodGenerator,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub peaks: PeakConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub ranking: Ranking,
    /// Fraction of each round's budget drawn at random before the strategy picks the rest.
    #[serde(default)]
    pub initial_random_fraction: f64,
}

impl SimulationConfig {
    pub fn from_json(text: &str) -> Result<Self, ActiveError> {
        serde_json::from_str(text).map_err(|e| ActiveError::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ActiveError> {
        let fail = |msg: String| Err(ActiveError::ConfigInvalid(msg));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let angle_ok = |a: f64| a.is_finite() && (0.0..180.0).contains(&a);
        let pool = self.unlabeled_in_distribution + self.unlabeled_ood;
        if self.rounds == 0 || self.budget == 0 {
            return fail("rounds and budget must be positive".into());
        }
        if self.rounds.saturating_mul(self.budget) > pool {
            return fail(format!("{} rounds of {} exceed the {pool} unlabeled samples", self.rounds, self.budget));
        }
        if self.initial_labeled < 2 {
            return fail("initial_labeled must be at least 2".into());
        }
        if self.grid.height < 3 || self.grid.width < 3 {
            return fail("grid must be at least 3x3".into());
        }
        if !positive(self.pose.length_sd) || !positive(self.pose.length_scale) || !positive(self.noise.peak_sigma) {
            return fail("length_sd, length_scale and peak_sigma must be positive".into());
        }
        let ood_angle = self.ood_angle();
        if !angle_ok(self.pose.angle_range_deg) || !angle_ok(ood_angle) {
            return fail("angle ranges must lie in [0, 180)".into());
        }
        if !self.ood.length_shift_sd.is_finite() {
            return fail("length_shift_sd must be finite".into());
        }
        if self.ood.length_shift_sd == 0.0 && ood_angle == self.pose.angle_range_deg {
            return fail("ood generator must differ from the in-distribution generator".into());
        }
        if !(self.noise.distractor_amplitude.is_finite() && self.noise.distractor_amplitude >= 0.0) {
            return fail("distractor_amplitude must be finite and non-negative".into());
        }
        if !(self.peaks.threshold_ratio > 0.0 && self.peaks.threshold_ratio <= 1.0) || self.peaks.max_peaks == 0 {
            return fail("peaks needs threshold_ratio in (0, 1] and max_peaks >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.initial_random_fraction) {
            return fail("initial_random_fraction must lie in [0, 1]".into());
        }
        if self.strategies.is_empty() {
            return fail("at least one strategy is required".into());
        }
        if self.strategies.iter().collect::<BTreeSet<_>>().len() != self.strategies.len() {
            return fail("strategies must be distinct".into());
        }
        Ok(())
    }

    fn ood_angle(&self) -> f64 {
        self.ood.angle_range_deg.unwrap_or(self.pose.angle_range_deg)
    }
}

/// Per-round metrics of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: StrategyKind,
    /// Labeled pool size after each round.
    pub labeled: Vec<usize>,
    pub ood_selected: Vec<usize>,
    /// Selected OOD over OOD still in the pool.
    pub ood_recall: Vec<Option<f64>>,
    /// Selected OOD over the batch size.
    pub ood_precision: Vec<Option<f64>>,
    /// AUC of OOD vs in-distribution under this strategy's selection priority.
    pub ood_ranking_auc: Vec<Option<f64>>,
    /// Mean point log-likelihood of the held-out poses under the round's fitted model.
    pub heldout_mean_log_likelihood: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub round: usize,
    pub strategy: StrategyKind,
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub strategies: Vec<StrategyMetrics>,
    #[serde(skip)]
    pub selections: Vec<SelectionRecord>,
}

impl SimulationReport {
    pub fn metrics(&self, strategy: StrategyKind) -> Option<&StrategyMetrics> {
        self.strategies.iter().find(|m| m.strategy == strategy)
    }
}

struct Generated {
    skeleton: Arc<Skeleton>,
    labeled: BTreeMap<String, Pose>,
    unlabeled: BTreeMap<String, UnlabeledSample>,
    held_out: Vec<Pose>,
}

fn sample_pose(
    rng: &mut ChaCha8Rng,
    skel: &Skeleton,
    cfg: &SimulationConfig,
    length_shift: f64,
    angle_range_deg: f64,
) -> Result<Pose, ActiveError> {
    let (h, w) = (cfg.grid.height as f64, cfg.grid.width as f64);
    let noise = Normal::new(0.0, cfg.pose.length_sd).expect("validated sd");
    let half = angle_range_deg.to_radians();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut real = vec![[0.0f64; 2]; skel.joint_count()];
        for &l in crate::model::topological_link_order(skel) {
            let link = skel.links()[l];
            let (dr, dc) = TEMPLATE[l];
            let base = dr.hypot(dc) * cfg.pose.length_scale;
            let len = (base + length_shift + noise.sample(rng)).max(0.0);
            let angle = dc.atan2(dr) + if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
            let p = real[link.parent];
            real[link.child] = [p[0] + len * angle.cos(), p[1] + len * angle.sin()];
        }
        let coords: Vec<[f64; 2]> = real.iter().map(|c| [c[0].round(), c[1].round()]).collect();
        let min_r = coords.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let max_r = coords.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_c = coords.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
        let max_c = coords.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
        if max_r - min_r > h - 1.0 || max_c - min_c > w - 1.0 {
            continue;
        }
        let shift_r = rng.random_range(-min_r as i64..=(h - 1.0 - max_r) as i64) as f64;
        let shift_c = rng.random_range(-min_c as i64..=(w - 1.0 - max_c) as i64) as f64;
        let placed = coords.iter().map(|c| vec![c[0] + shift_r, c[1] + shift_c]).collect();
        return Ok(Pose::complete(placed).expect("finite coordinates"));
    }
    Err(ActiveError::ConfigInvalid("sampled poses do not fit the grid".into()))
}

fn generate(cfg: &SimulationConfig) -> Result<Generated, ActiveError> {
    let skeleton = Arc::new(validate_skeleton(&SkeletonSpec::mpii()).expect("built-in skeleton is valid"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ood_shift = cfg.ood.length_shift_sd * cfg.pose.length_sd;
    let id_angle = cfg.pose.angle_range_deg;

    let mut labeled = BTreeMap::new();
    for i in 0..cfg.initial_labeled {
        labeled.insert(format!("l{i:05}"), sample_pose(&mut rng, &skeleton, cfg, 0.0, id_angle)?);
    }
    let held_out = (0..cfg.held_out)
        .map(|_| sample_pose(&mut rng, &skeleton, cfg, 0.0, id_angle))
        .collect::<Result<Vec<_>, _>>()?;

    let mut raw: Vec<(Pose, bool)> = Vec::with_capacity(cfg.unlabeled_in_distribution + cfg.unlabeled_ood);
    for _ in 0..cfg.unlabeled_in_distribution {
        raw.push((sample_pose(&mut rng, &skeleton, cfg, 0.0, id_angle)?, false));
    }
    for _ in 0..cfg.unlabeled_ood {
        raw.push((sample_pose(&mut rng, &skeleton, cfg, ood_shift, cfg.ood_angle())?, true));
    }
    raw.shuffle(&mut rng);

    let mut unlabeled = BTreeMap::new();
    for (i, (pose, is_ood)) in raw.into_iter().enumerate() {
        let distractors: Vec<Distractor> = (0..cfg.noise.distractors)
            .map(|_| {
                let joint = rng.random_range(0..skeleton.joint_count());
                let (row, col) = match cfg.noise.distractor_radius {
                    None => (rng.random_range(0..cfg.grid.height), rng.random_range(0..cfg.grid.width)),
                    Some(r) => {
                        let at = pose.coordinate(joint);
                        let (r0, c0) = (at[0] as usize, at[1] as usize);
                        (
                            rng.random_range(r0.saturating_sub(r)..=(r0 + r).min(cfg.grid.height - 1)),
                            rng.random_range(c0.saturating_sub(r)..=(c0 + r).min(cfg.grid.width - 1)),
                        )
                    }
                };
                Distractor { joint, row: row as f64, col: col as f64, amplitude: cfg.noise.distractor_amplitude }
            })
            .collect();
        let heatmap =
            render_gaussian_heatmap(&pose, cfg.grid.height, cfg.grid.width, cfg.noise.peak_sigma, &distractors)
                .map_err(|e| ActiveError::ConfigInvalid(e.to_string()))?;
        unlabeled.insert(
            format!("u{i:05}"),
            UnlabeledSample { heatmap: Some(Arc::new(heatmap)), truth: Some(pose), is_ood },
        );
    }
    Ok(Generated { skeleton, labeled, unlabeled, held_out })
}

fn fit(skeleton: &Arc<Skeleton>, pool: &SamplePool) -> Result<PoseModelParams, ActiveError> {
    let poses: Vec<Pose> = pool.labeled().values().cloned().collect();
    let set =
        LabeledPoseSet::new(skeleton.clone(), poses, None).map_err(|e| ActiveError::ConfigInvalid(e.to_string()))?;
    fit_distance_params(&set).map_err(|e| ActiveError::ConfigInvalid(e.to_string()))
}

fn heldout_mean(held_out: &[Pose], params: &PoseModelParams) -> Option<f64> {
    if held_out.is_empty() {
        return None;
    }
    let sum: f64 =
        held_out.iter().map(|p| point_log_likelihood(p, params).expect("generated poses are complete").total).sum();
    Some(sum / held_out.len() as f64)
}

/// Picks this round's batch, optionally drawing a random share first.
fn choose(scores: &ScoreTable, kind: StrategyKind, budget: usize, random_fraction: f64, seed: u64) -> Vec<String> {
    let n_random = if kind == StrategyKind::Random { 0 } else { (random_fraction * budget as f64).floor() as usize };
    let mut chosen = Vec::with_capacity(budget);
    if n_random > 0 {
        let draws: ScoreTable = scores.keys().map(|id| (id.clone(), random_draw(seed, id))).collect();
        chosen.extend(priority_order(&draws, StrategyKind::Random).into_iter().take(n_random));
    }
    let taken: BTreeSet<String> = chosen.iter().cloned().collect();
    chosen.extend(priority_order(scores, kind).into_iter().filter(|id| !taken.contains(id)).take(budget - n_random));
    chosen
}

/// Runs the synthetic annotation loop for every configured strategy from the same initial pool.
pub fn run_simulation(cfg: &SimulationConfig) -> Result<SimulationReport, ActiveError> {
    cfg.validate()?;
    let generated = generate(cfg)?;
    let initial = SamplePool::new(generated.labeled, generated.unlabeled, cfg.budget)?;
    let hybrid_seed = cfg.seed.wrapping_add(1);

    let mut metrics = Vec::with_capacity(cfg.strategies.len());
    let mut selections = Vec::new();
    for &kind in &cfg.strategies {
        let strategy = match kind {
            StrategyKind::Vl4pose => Strategy::Vl4pose(cfg.ranking),
            StrategyKind::Entropy => Strategy::MultiPeakEntropy,
            StrategyKind::Random => Strategy::Random { seed: cfg.seed },
        };
        let mut pool = initial.clone();
        let mut m = StrategyMetrics {
            strategy: kind,
            labeled: Vec::new(),
            ood_selected: Vec::new(),
            ood_recall: Vec::new(),
            ood_precision: Vec::new(),
            ood_ranking_auc: Vec::new(),
            heldout_mean_log_likelihood: Vec::new(),
        };
        for round in 1..=cfg.rounds {
            let params = fit(&generated.skeleton, &pool)?;
            m.heldout_mean_log_likelihood.push(heldout_mean(&generated.held_out, &params));

            let scores = score_pool(&pool, ParamsSource::Fitted(&params), strategy, &cfg.peaks)?;
            let selected = choose(&scores, kind, cfg.budget, cfg.initial_random_fraction, hybrid_seed);

            let (mut id_priority, mut ood_priority) = (Vec::new(), Vec::new());
            for (id, sample) in pool.unlabeled() {
                let v = priority_value(scores[id], kind);
                if sample.is_ood {
                    ood_priority.push(v);
                } else {
                    id_priority.push(v);
                }
            }
            let chosen = ids_set(&selected);
            let ood_hits = pool.unlabeled().iter().filter(|(id, s)| s.is_ood && chosen.contains(id.as_str())).count();
            let ood_available = ood_priority.len();
            m.ood_selected.push(ood_hits);
            m.ood_recall.push((ood_available > 0).then(|| ood_hits as f64 / ood_available as f64));
            m.ood_precision.push((ood_available > 0).then(|| ood_hits as f64 / selected.len() as f64));
            m.ood_ranking_auc.push(ood_ranking_auc(&id_priority, &ood_priority).ok());

            selections.extend(selected.iter().map(|id| SelectionRecord {
                round,
                strategy: kind,
                id: id.clone(),
                score: scores[id],
            }));
            pool.annotate(&selected)?;
            m.labeled.push(pool.labeled().len());
        }
        metrics.push(m);
    }
    Ok(SimulationReport { config: cfg.clone(), strategies: metrics, selections })
}
