use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use poselik_cli::RunManifest;
use poselik_core::active::{select_batch, ScoreTable, StrategyKind};
use poselik_core::calibration::{fit_distance_params, LabeledPoseSet};
use poselik_core::heatmap::{extract_peaks, render_gaussian_heatmap, write_heatmap_file, Distractor, PeakConfig};
use poselik_core::likelihood::expected_log_likelihood;
use poselik_core::model::{
    validate_skeleton, DistanceParams, LinkParams, ModelKind, Pose, PoseModelParams, SkeletonSpec,
};
use serde_json::Value;

fn poselik(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poselik")).args(args).env_remove("POSELIK_THREADS").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn chain_spec() -> SkeletonSpec {
    SkeletonSpec {
        joints: vec!["a".into(), "b".into(), "c".into()],
        root: "a".into(),
        dimension: 2,
        links: vec![("a".into(), "b".into()), ("b".into(), "c".into())],
    }
}

struct Fixture {
    dir: tempfile::TempDir,
    skeleton: PathBuf,
    params: PathBuf,
    model: PoseModelParams,
}

impl Fixture {
    fn new(spec: SkeletonSpec, mean: f64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let skel = Arc::new(validate_skeleton(&spec).unwrap());
        let links =
            (0..skel.link_count()).map(|_| LinkParams::Distance(DistanceParams::new(mean, 1.0).unwrap())).collect();
        let model = PoseModelParams::new(skel, ModelKind::Distance, links, None).unwrap();
        let skeleton = dir.path().join("skeleton.json");
        let params = dir.path().join("params.json");
        fs::write(&skeleton, serde_json::to_string(&spec).unwrap()).unwrap();
        fs::write(&params, serde_json::to_string(&model.to_spec()).unwrap()).unwrap();
        Self { dir, skeleton, params, model }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes heatmaps under `maps/` and a manifest with relative paths.
    fn manifest(&self, samples: &[(&str, Pose, Vec<Distractor>)]) -> PathBuf {
        fs::create_dir_all(self.path("maps")).unwrap();
        let mut text = String::new();
        for (id, pose, distractors) in samples {
            let h = render_gaussian_heatmap(pose, 32, 32, 1.0, distractors).unwrap();
            write_heatmap_file(&h, self.path(&format!("maps/{id}.pshm"))).unwrap();
            text.push_str(&format!("{{\"id\":\"{id}\",\"path\":\"maps/{id}.pshm\"}}\n"));
        }
        let path = self.path("manifest.jsonl");
        fs::write(&path, text).unwrap();
        path
    }
}

fn chain_pose(b_row: f64) -> Pose {
    Pose::complete(vec![vec![5.0, 5.0], vec![b_row, 5.0], vec![b_row + 10.0, 5.0]]).unwrap()
}

#[test]
fn score_matches_library() {
    let f = Fixture::new(chain_spec(), 10.0);
    let pose = chain_pose(14.0);
    let manifest = f.manifest(&[("only", pose.clone(), vec![])]);
    let out = f.path("scores.jsonl");
    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&f.params),
        "--heatmaps",
        p(&manifest),
        "--mode",
        "expected",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let got = lines(&out);
    assert_eq!(got.len(), 1);
    let h = render_gaussian_heatmap(&pose, 32, 32, 1.0, &[]).unwrap();
    let expected = expected_log_likelihood(&extract_peaks(&h, &PeakConfig::default()).unwrap(), &f.model).unwrap();
    assert_eq!(got[0]["id"], "only");
    assert_eq!(got[0]["mode"], "expected");
    assert_eq!(got[0]["total"].as_f64().unwrap(), expected.total);
    assert_eq!(got[0]["per_link"].as_array().unwrap().len(), 2);

    let m: RunManifest =
        serde_json::from_str(&fs::read_to_string(f.path("scores.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "score");
    assert_eq!(m.samples, 1);
    let map_bytes = fs::read(f.path("maps/only.pshm")).unwrap();
    let digest = m.inputs.iter().find(|(k, _)| k.ends_with("only.pshm")).unwrap().1;
    assert_eq!(*digest, poselik_cli::manifest::sha256_hex(&map_bytes));
    assert!(m.stage_ms("score").is_some() && m.stage_ms("load").is_some());
}

#[test]
fn point_entropy_and_max_modes() {
    let f = Fixture::new(chain_spec(), 10.0);
    let manifest = f.manifest(&[("s", chain_pose(14.0), vec![])]);
    let poses = f.path("poses.jsonl");
    fs::write(&poses, "{\"id\":\"x\",\"pose\":[[0,0],[10,0],[20,0]]}\n").unwrap();
    let out = f.path("point.jsonl");
    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&f.params),
        "--poses",
        p(&poses),
        "--mode",
        "point",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let total = lines(&out)[0]["total"].as_f64().unwrap();
    assert!((total - 2.0 * -0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--heatmaps",
        p(&manifest),
        "--mode",
        "entropy",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out)[0]["total"].as_f64().unwrap(), 0.0);

    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&f.params),
        "--heatmaps",
        p(&manifest),
        "--mode",
        "max",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(lines(&out)[0]["mode"], "max");

    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&f.params),
        "--mode",
        "point",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn per_image_missing_id_is_a_data_error() {
    let f = Fixture::new(chain_spec(), 10.0);
    let manifest = f.manifest(&[("known", chain_pose(14.0), vec![]), ("stranger", chain_pose(15.0), vec![])]);
    let per_image = f.path("per_image.json");
    let entry = serde_json::to_value(f.model.to_spec()).unwrap();
    fs::write(&per_image, serde_json::json!({ "per_image": { "known": entry } }).to_string()).unwrap();
    let out = f.path("scores.jsonl");
    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&per_image),
        "--per-image",
        "--heatmaps",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stranger"));
}

#[test]
fn refine_examples() {
    let f = Fixture::new(chain_spec(), 10.0);
    // b's global max sits 20 rows from a; the weaker peak sits at the modelled distance
    let truth = chain_pose(15.0);
    let misleading = Pose::complete(vec![vec![5.0, 5.0], vec![25.0, 5.0], vec![25.0, 15.0]]).unwrap();
    let decoy = vec![Distractor { joint: 1, row: 15.0, col: 5.0, amplitude: 0.8 }];
    let manifest = f.manifest(&[("plain", truth.clone(), vec![]), ("planted", misleading, decoy)]);
    let out = f.path("refined.jsonl");
    let o = poselik(&[
        "refine",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&f.params),
        "--heatmaps",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = lines(&out);
    assert_eq!(got[0]["id"], "plain");
    assert_eq!(got[0]["pose"], serde_json::json!([[5.0, 5.0], [15.0, 5.0], [25.0, 5.0]]));
    assert_eq!(got[0]["peak_index"], serde_json::json!([0, 0, 0]));
    assert_eq!(got[1]["pose"][1], serde_json::json!([15.0, 5.0]));
    assert_eq!(got[1]["peak_index"][1], 1);
    assert_eq!(got[1]["mode"], "refined");
    assert!(got[1]["objective"].as_f64().unwrap() < got[1]["total"].as_f64().unwrap());

    let empty = f.path("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = poselik(&[
        "refine",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&f.params),
        "--heatmaps",
        p(&empty),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
    let m: RunManifest =
        serde_json::from_str(&fs::read_to_string(f.path("refined.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.samples, 0);
}

#[test]
fn select_examples() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.jsonl");
    fs::write(&scores, "{\"id\":\"c\",\"total\":-1.0}\n{\"id\":\"a\",\"total\":-10.0}\n{\"id\":\"b\",\"total\":-5.0}\n{\"id\":\"d\",\"total\":-5.0}\n").unwrap();
    let out = dir.path().join("selected.json");
    let run = |strategy: &str, budget: &str| {
        let o = poselik(&[
            "select",
            "--scores",
            p(&scores),
            "--strategy",
            strategy,
            "--budget",
            budget,
            "--out",
            p(&out),
            "--seed",
            "9",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        v["selected"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect::<Vec<_>>()
    };
    assert!(run("vl4pose", "0").is_empty());
    assert_eq!(run("vl4pose", "4"), vec!["a", "b", "d", "c"]);
    assert_eq!(run("entropy", "1"), vec!["c"]);
    let table: ScoreTable =
        [("a", -10.0), ("b", -5.0), ("c", -1.0), ("d", -5.0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    assert_eq!(run("vl4pose", "2"), select_batch(&table, StrategyKind::Vl4pose, 2).unwrap().selected);
    assert_eq!(run("random", "2"), run("random", "2"));
    let m: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("selected.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, Some(9));

    let o = poselik(&["select", "--scores", p(&scores), "--strategy", "vl4pose", "--budget", "5", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn calibrate_round_trips_through_files() {
    let spec = chain_spec();
    let dir = tempfile::tempdir().unwrap();
    let skeleton = dir.path().join("skeleton.json");
    fs::write(&skeleton, serde_json::to_string(&spec).unwrap()).unwrap();
    let labeled = dir.path().join("labeled.jsonl");
    let poses = [[0.0, 3.0, 7.0], [0.0, 5.0, 8.0], [0.0, 4.0, 9.0]];
    let text: String = poses
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{{\"id\":\"p{i}\",\"pose\":[[{},0],[{},0],[{},0]]}}\n", r[0], r[1], r[2]))
        .collect();
    fs::write(&labeled, text).unwrap();
    let out = dir.path().join("params.json");
    let o = poselik(&[
        "calibrate",
        "--skeleton",
        p(&skeleton),
        "--labeled",
        p(&labeled),
        "--model",
        "distance",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();

    let skel = Arc::new(validate_skeleton(&spec).unwrap());
    let set = LabeledPoseSet::new(
        skel,
        poses.iter().map(|r| Pose::complete(r.iter().map(|&x| vec![x, 0.0]).collect()).unwrap()).collect(),
        None,
    )
    .unwrap();
    let lib = fit_distance_params(&set).unwrap();
    assert_eq!(doc, serde_json::to_value(lib.to_document()).unwrap());

    // the fitted file feeds straight back into scoring
    let scored = dir.path().join("point.jsonl");
    let o = poselik(&[
        "score",
        "--skeleton",
        p(&skeleton),
        "--params",
        p(&out),
        "--poses",
        p(&labeled),
        "--mode",
        "point",
        "--out",
        p(&scored),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&scored).len(), 3);

    fs::write(&labeled, "{\"id\":\"only\",\"pose\":[[0,0],[1,0],[2,0]]}\n").unwrap();
    let o = poselik(&["calibrate", "--skeleton", p(&skeleton), "--labeled", p(&labeled), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn maxima_mirrors_library() {
    let f = Fixture::new(chain_spec(), 10.0);
    let decoy = vec![Distractor { joint: 2, row: 2.0, col: 28.0, amplitude: 0.6 }];
    let manifest = f.manifest(&[("m", chain_pose(14.0), decoy)]);
    let out = f.path("peaks.jsonl");
    let o =
        poselik(&["maxima", "--heatmaps", p(&manifest), "--threshold", "0.05", "--max-peaks", "10", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let got = lines(&out);
    let joints = got[0]["joints"].as_array().unwrap();
    assert_eq!(joints.len(), 3);
    assert_eq!(joints[0].as_array().unwrap().len(), 1);
    assert_eq!(joints[2].as_array().unwrap().len(), 2);
    assert_eq!(joints[2][0]["row"], 24);
    assert_eq!(joints[2][1]["col"], 28);

    let o = poselik(&["maxima", "--heatmaps", p(&manifest), "--max-peaks", "1", "--out", p(&out)]);
    assert!(o.status.success());
    assert_eq!(lines(&out)[0]["joints"][2].as_array().unwrap().len(), 1);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    fs::write(
        &config,
        r#"{"seed": 5, "rounds": 2, "budget": 4, "initial_labeled": 10, "unlabeled_in_distribution": 30,
            "unlabeled_ood": 4, "held_out": 5, "noise": {"distractors": 1}}"#,
    )
    .unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = poselik(&["simulate", "--config", p(&config), "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let selections = lines(&dir.path().join("a.json.selections.jsonl"));
    assert_eq!(selections.len(), 3 * 2 * 4);
    let ids: BTreeSet<(String, String)> = selections
        .iter()
        .map(|s| (s["strategy"].as_str().unwrap().to_string(), s["id"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(ids.len(), 24);

    let o = poselik(&["simulate", "--config", p(&config), "--out", p(&b), "--seed", "6"]);
    assert!(o.status.success());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let m: RunManifest =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, Some(6));

    fs::write(&config, r#"{"seed": 5, "rounds": 1, "budget": 1, "initial_labeled": 3, "unlabeled_in_distribution": 3, "unlabeled_ood": 0, "speed": 1}"#).unwrap();
    assert_eq!(poselik(&["simulate", "--config", p(&config), "--out", p(&a)]).status.code(), Some(3));
}

#[test]
fn exit_codes() {
    let f = Fixture::new(chain_spec(), 10.0);
    let manifest = f.manifest(&[("s", chain_pose(14.0), vec![])]);
    let out = f.path("o.jsonl");
    assert_eq!(poselik(&["score", "--bogus"]).status.code(), Some(2));
    assert_eq!(poselik(&[]).status.code(), Some(2));
    assert_eq!(poselik(&["--version"]).status.code(), Some(0));

    let bad = f.path("bad.json");
    fs::write(&bad, "{\"model_kind\": \"distance\", \"params\": [{\"mean\": 1.0, \"sigma\": -1.0}, {\"mean\": 1.0, \"sigma\": 1.0}]}").unwrap();
    let o = poselik(&[
        "score",
        "--skeleton",
        p(&f.skeleton),
        "--params",
        p(&bad),
        "--heatmaps",
        p(&manifest),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));

    let broken = f.path("broken.jsonl");
    fs::write(&broken, "{\"id\":\"s\",\"path\":\"maps/s.pshm\"}\n{not json\n").unwrap();
    let o = poselik(&["maxima", "--heatmaps", p(&broken), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(3));

    fs::write(f.path("maps/s.pshm"), b"XXXXjunk").unwrap();
    let o = poselik(&["maxima", "--heatmaps", p(&manifest), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`s`"));

    let o = Command::new(env!("CARGO_BIN_EXE_poselik"))
        .args(["maxima", "--heatmaps", p(&manifest), "--out", p(&out)])
        .env("POSELIK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_follows_manifest_order_under_threads() {
    let f = Fixture::new(chain_spec(), 10.0);
    let samples: Vec<(String, Pose)> =
        (0..150).map(|i| (format!("z{:03}", 149 - i), chain_pose(10.0 + (i % 7) as f64))).collect();
    let refs: Vec<(&str, Pose, Vec<Distractor>)> =
        samples.iter().map(|(id, pose)| (id.as_str(), pose.clone(), vec![])).collect();
    let manifest = f.manifest(&refs);
    let out = f.path("scores.jsonl");
    let o = Command::new(env!("CARGO_BIN_EXE_poselik"))
        .args([
            "score",
            "--skeleton",
            p(&f.skeleton),
            "--params",
            p(&f.params),
            "--heatmaps",
            p(&manifest),
            "--out",
            p(&out),
        ])
        .env("POSELIK_THREADS", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    let ids: Vec<String> = lines(&out).iter().map(|l| l["id"].as_str().unwrap().to_string()).collect();
    let expected: Vec<String> = samples.iter().map(|s| s.0.clone()).collect();
    assert_eq!(ids, expected);
    let m: RunManifest =
        serde_json::from_str(&fs::read_to_string(f.path("scores.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.threads, 4);
}
