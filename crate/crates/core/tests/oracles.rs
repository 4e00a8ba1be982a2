//! Independent oracles for the likelihood engine.

use std::sync::Arc;

use nalgebra::DMatrix;
use poselik_core::heatmap::PeakSet;
use poselik_core::likelihood::{
    brute_force_best_pose, expected_log_likelihood, link_log_density_distance, link_log_density_offset,
    multi_peak_entropy, point_log_likelihood, refine_pose, refinement_objective,
};
use poselik_core::model::{DistanceParams, Link, LinkParams, ModelKind, OffsetParams, Pose, PoseModelParams, Skeleton};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.5..1.5));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.3
}

/// Cofactor inverse and determinant, for 2x2 and 3x3 only.
fn inverse_and_det(m: &DMatrix<f64>) -> (Vec<Vec<f64>>, f64) {
    let a = |i: usize, j: usize| m[(i, j)];
    match m.nrows() {
        2 => {
            let det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
            (vec![vec![a(1, 1) / det, -a(0, 1) / det], vec![-a(1, 0) / det, a(0, 0) / det]], det)
        }
        3 => {
            let c = |r0: usize, r1: usize, c0: usize, c1: usize| a(r0, c0) * a(r1, c1) - a(r0, c1) * a(r1, c0);
            let cof = [
                [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
                [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
                [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
            ];
            let det = a(0, 0) * cof[0][0] + a(0, 1) * cof[0][1] + a(0, 2) * cof[0][2];
            // inverse = adjugate / det, adjugate = cofactorᵀ
            ((0..3).map(|i| (0..3).map(|j| cof[j][i] / det).collect()).collect(), det)
        }
        _ => unreachable!(),
    }
}

fn oracle_offset_density(parent: &[f64], child: &[f64], offset: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = parent.len();
    let r: Vec<f64> = (0..d).map(|i| child[i] - parent[i] - offset[i]).collect();
    let (inv, det) = inverse_and_det(cov);
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += r[i] * inv[i][j] * r[j];
        }
    }
    -0.5 * quad - 0.5 * det.ln() - 0.5 * d as f64 * LN_2PI
}

fn oracle_distance_density(parent: &[f64], child: &[f64], mean: f64, sigma: f64) -> f64 {
    let dist = parent.iter().zip(child).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let z = (dist - mean) / sigma;
    -z * z / 2.0 - sigma.ln() - LN_2PI / 2.0
}

#[test]
fn offset_density_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for d in [2usize, 3] {
        for _ in 0..200 {
            let cov = random_spd(&mut rng, d);
            let offset: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            let parent: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
            let child: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
            let params = OffsetParams::new(offset.clone(), cov.clone()).unwrap();
            let got = link_log_density_offset(&parent, &child, &params);
            let want = oracle_offset_density(&parent, &child, &offset, &cov);
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "d={d}: {got} vs {want}");
        }
    }
}

#[test]
fn gaussian_anchors() {
    let unit = DistanceParams::new(4.0, 1.0).unwrap();
    let v = link_log_density_distance(&[0.0, 0.0], &[0.0, 4.0], &unit);
    assert!((v - (-0.5 * LN_2PI)).abs() < 1e-12);
    for d in [2usize, 3] {
        let params = OffsetParams::new(vec![1.0; d], DMatrix::identity(d, d)).unwrap();
        let parent = vec![2.0; d];
        let child = vec![3.0; d];
        let v = link_log_density_offset(&parent, &child, &params);
        assert!((v - (-(d as f64) / 2.0 * LN_2PI)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn distance_density_is_rigid_motion_invariant(
        px in -50.0f64..50.0, py in -50.0f64..50.0,
        cx in -50.0f64..50.0, cy in -50.0f64..50.0,
        tx in -100.0f64..100.0, ty in -100.0f64..100.0,
        theta in 0.0f64..std::f64::consts::TAU,
        mean in 0.5f64..30.0, sigma in 0.1f64..5.0,
    ) {
        let p = DistanceParams::new(mean, sigma).unwrap();
        let (s, c) = theta.sin_cos();
        let mv = |x: f64, y: f64| [c * x - s * y + tx, s * x + c * y + ty];
        let base = link_log_density_distance(&[px, py], &[cx, cy], &p);
        let moved = link_log_density_distance(&mv(px, py), &mv(cx, cy), &p);
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
        let oracle = oracle_distance_density(&[px, py], &[cx, cy], mean, sigma);
        prop_assert!((base - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn offset_density_is_translation_invariant(
        seed in any::<u64>(), tx in -100.0f64..100.0, ty in -100.0f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = OffsetParams::new(vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)], random_spd(&mut rng, 2)).unwrap();
        let parent = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let child = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
        let base = link_log_density_offset(&parent, &child, &p);
        let moved = link_log_density_offset(&[parent[0] + tx, parent[1] + ty], &[child[0] + tx, child[1] + ty], &p);
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
    }
}

struct Instance {
    params: PoseModelParams,
    peaks: PeakSet,
}

/// Random tree with 3–16 joints, 1–5 peaks per joint near a nominal pose.
fn random_instance(rng: &mut ChaCha8Rng, kind: ModelKind, max_configs: u128) -> Instance {
    let n = rng.random_range(3..=16usize);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut links: Vec<Link> = (1..n).map(|i| Link { parent: perm[rng.random_range(0..i)], child: perm[i] }).collect();
    links.shuffle(rng);
    let names = (0..n).map(|i| format!("j{i}")).collect();
    let skel = Arc::new(Skeleton::new(names, perm[0], links, 2).unwrap());

    let mut nominal = vec![[0.0f64; 2]; n];
    nominal[skel.root()] = [100.0, 100.0];
    let mut link_params = vec![None; skel.link_count()];
    for &j in skel.joint_order() {
        for &l in skel.child_links(j) {
            let child = skel.links()[l].child;
            let mean = rng.random_range(2.0..8.0);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let step = [mean * angle.cos(), mean * angle.sin()];
            nominal[child] = [nominal[j][0] + step[0], nominal[j][1] + step[1]];
            link_params[l] = Some(match kind {
                ModelKind::Distance => {
                    LinkParams::Distance(DistanceParams::new(mean, rng.random_range(0.5..2.5)).unwrap())
                }
                ModelKind::Offset => LinkParams::Offset(OffsetParams::new(step.to_vec(), random_spd(rng, 2)).unwrap()),
            });
        }
    }
    let root = rng.random_bool(0.5).then(|| {
        let r = nominal[skel.root()];
        match kind {
            ModelKind::Distance => LinkParams::Distance(DistanceParams::new(r[0].hypot(r[1]), 3.0).unwrap()),
            ModelKind::Offset => LinkParams::Offset(OffsetParams::new(r.to_vec(), random_spd(rng, 2) * 4.0).unwrap()),
        }
    });
    let params = PoseModelParams::new(skel, kind, link_params.into_iter().map(Option::unwrap).collect(), root).unwrap();

    let mut counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=5)).collect();
    while counts.iter().map(|&c| c as u128).product::<u128>() > max_configs {
        let i = (0..n).max_by_key(|&i| (counts[i], i)).unwrap();
        counts[i] -= 1;
    }
    let joints = (0..n)
        .map(|j| {
            (0..counts[j])
                .map(|k| {
                    let jitter = if k == 0 { 0.0 } else { 3.0 };
                    let r = (nominal[j][0] + rng.random_range(-jitter..=jitter)).round() as usize;
                    let c = (nominal[j][1] + rng.random_range(-jitter..=jitter)).round() as usize;
                    (r, c, rng.random_range(0.05..1.0))
                })
                .collect()
        })
        .collect();
    Instance { params, peaks: PeakSet::from_scores(joints).unwrap() }
}

/// Σ over all configurations of Π p · point log-likelihood, by odometer.
fn enumerated_expectation(inst: &Instance) -> f64 {
    let n = inst.peaks.joint_count();
    let sizes: Vec<usize> = (0..n).map(|j| inst.peaks.joint(j).len()).collect();
    let mut choice = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let coords = (0..n).map(|j| inst.peaks.joint(j)[choice[j]].location().to_vec()).collect();
        let ll = point_log_likelihood(&Pose::complete(coords).unwrap(), &inst.params).unwrap().total;
        let prob: f64 = (0..n).map(|j| inst.peaks.joint(j)[choice[j]].prob).product();
        total += prob * ll;
        let mut j = 0;
        while j < n {
            choice[j] += 1;
            if choice[j] < sizes[j] {
                break;
            }
            choice[j] = 0;
            j += 1;
        }
        if j == n {
            return total;
        }
    }
}

#[test]
fn point_likelihood_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let inst = random_instance(&mut rng, ModelKind::Distance, 1);
        let pose = inst.peaks.argmax_pose();
        let skel = inst.params.skeleton();
        let mut want = 0.0;
        for (l, link) in skel.links().iter().enumerate() {
            if let LinkParams::Distance(p) = inst.params.link(l) {
                want += oracle_distance_density(
                    pose.coordinate(link.parent),
                    pose.coordinate(link.child),
                    p.mean_distance(),
                    p.sigma(),
                );
            }
        }
        if let Some(LinkParams::Distance(p)) = inst.params.root_params() {
            want += oracle_distance_density(&[0.0, 0.0], pose.coordinate(skel.root()), p.mean_distance(), p.sigma());
        }
        let got = point_log_likelihood(&pose, &inst.params).unwrap().total;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dp_matches_brute_force(seed in any::<u64>(), offset in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if offset { ModelKind::Offset } else { ModelKind::Distance };
        let inst = random_instance(&mut rng, kind, 20_000);
        let dp = refine_pose(&inst.peaks, &inst.params).unwrap();
        let brute = brute_force_best_pose(&inst.peaks, &inst.params).unwrap();
        prop_assert_eq!(&dp.chosen_peak_index, &brute.chosen_peak_index);
        prop_assert_eq!(dp.objective, brute.objective);
        prop_assert_eq!(dp.objective, refinement_objective(&inst.peaks, &inst.params, &dp.chosen_peak_index));
    }

    #[test]
    fn expectation_matches_enumeration(seed in any::<u64>(), offset in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if offset { ModelKind::Offset } else { ModelKind::Distance };
        let inst = random_instance(&mut rng, kind, 5_000);
        let got = expected_log_likelihood(&inst.peaks, &inst.params).unwrap().total;
        let want = enumerated_expectation(&inst);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn expectation_of_single_peaks_is_point_likelihood(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, ModelKind::Distance, 1);
        let e = expected_log_likelihood(&inst.peaks, &inst.params).unwrap();
        let p = point_log_likelihood(&inst.peaks.argmax_pose(), &inst.params).unwrap();
        prop_assert!((e.total - p.total).abs() < 1e-9);
        prop_assert_eq!(refine_pose(&inst.peaks, &inst.params).unwrap().pose, inst.peaks.argmax_pose());
    }

    #[test]
    fn refinement_never_loses_to_argmax(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, ModelKind::Distance, u128::MAX);
        let best = refine_pose(&inst.peaks, &inst.params).unwrap();
        let argmax = vec![0usize; inst.peaks.joint_count()];
        prop_assert!(best.objective >= refinement_objective(&inst.peaks, &inst.params, &argmax));
    }

    #[test]
    fn entropy_matches_direct_evaluation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng, ModelKind::Distance, u128::MAX);
        let direct: f64 = inst.peaks.iter().map(|j| -j.iter().map(|p| p.prob * p.prob.ln()).sum::<f64>()).sum();
        prop_assert!((multi_peak_entropy(&inst.peaks).unwrap() - direct).abs() < 1e-12);
        let single = random_instance(&mut rng, ModelKind::Distance, 1);
        prop_assert_eq!(multi_peak_entropy(&single.peaks).unwrap(), 0.0);
    }
}
