use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use poselik_core::active::{random_draw, run_simulation, select_batch, ScoreTable, SimulationConfig, StrategyKind};
use poselik_core::calibration::{
    fit_distance_params, fit_offset_params, parse_image_params, parse_params, CalibrationError, LabeledPoseSet,
};
use poselik_core::formats::{
    parse_jsonl, FormatError, ManifestEntry, PeaksLine, PoseRecord, RefinedLine, ScalarLine, ScoreInput, ScoreLine,
};
use poselik_core::heatmap::{decode_heatmap, extract_peaks, Heatmap, PeakConfig};
use poselik_core::likelihood::{expected_log_likelihood, multi_peak_entropy, point_log_likelihood, refine_pose};
use poselik_core::model::{validate_skeleton, Pose, PoseModelParams, Skeleton, SkeletonSpec};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::{default_manifest_path, sha256_hex, RunManifest};
use crate::{
    CalibrateArgs, Cli, CliError, Command, MaximaArgs, ModelArg, ModelArgs, PeakArgs, RefineArgs, ScoreArgs, ScoreMode,
    SelectArgs, SimulateArgs, StrategyArg,
};

const CHUNK: usize = 64;

pub(crate) fn dispatch(cli: &Cli) -> Result<RunManifest, CliError> {
    let (mut manifest, out) = match &cli.command {
        Command::Score(a) => (score(a)?, &a.out),
        Command::Refine(a) => (refine(a)?, &a.out),
        Command::Select(a) => (select(a, cli.seed)?, &a.out),
        Command::Calibrate(a) => (calibrate(a)?, &a.out),
        Command::Maxima(a) => (maxima(a)?, &a.out),
        Command::Simulate(a) => (simulate(a, cli.seed)?, &a.out),
    };
    if manifest.seed.is_none() {
        manifest.seed = cli.seed;
    }
    let path = cli.manifest.clone().unwrap_or_else(|| default_manifest_path(out));
    write_file(&path, &to_pretty(&manifest))?;
    Ok(manifest)
}

fn new_manifest(command: &str, args: &impl Serialize) -> RunManifest {
    RunManifest::new(command, serde_json::to_value(args).expect("arguments serialize"))
}

fn to_pretty(value: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("plain data serializes");
    bytes.push(b'\n');
    bytes
}

fn read_input(m: &mut RunManifest, path: &Path) -> Result<Vec<u8>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    m.record_input(path, &bytes);
    Ok(bytes)
}

fn read_text(m: &mut RunManifest, path: &Path) -> Result<String, CliError> {
    String::from_utf8(read_input(m, path)?).map_err(|_| CliError::schema(format!("{}: not UTF-8", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_lines(m: &mut RunManifest, path: &Path, lines: &[String]) -> Result<(), CliError> {
    m.time("write", || {
        let mut buf = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
        for l in lines {
            buf.push_str(l);
            buf.push('\n');
        }
        write_file(path, buf.as_bytes())
    })
}

fn format_error(e: FormatError) -> CliError {
    match e {
        FormatError::Io { .. } => CliError::data(e),
        _ => CliError::schema(e),
    }
}

fn read_records<T: serde::de::DeserializeOwned>(m: &mut RunManifest, path: &Path) -> Result<Vec<T>, CliError> {
    let text = read_text(m, path)?;
    parse_jsonl(&text, path).map_err(format_error)
}

fn read_heatmap_manifest(m: &mut RunManifest, path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    let mut entries: Vec<ManifestEntry> = read_records(m, path)?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut seen = std::collections::BTreeSet::new();
    for e in &mut entries {
        if !seen.insert(e.id.clone()) {
            return Err(CliError::schema(format!("{}: duplicate id `{}`", path.display(), e.id)));
        }
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

fn load_skeleton(m: &mut RunManifest, path: &Path) -> Result<Arc<Skeleton>, CliError> {
    let text = read_text(m, path)?;
    let spec: SkeletonSpec =
        serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))?;
    validate_skeleton(&spec).map(Arc::new).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
}

enum Params {
    Shared(PoseModelParams),
    PerImage(BTreeMap<String, PoseModelParams>),
}

impl Params {
    fn get(&self, id: &str) -> Result<&PoseModelParams, CliError> {
        match self {
            Params::Shared(p) => Ok(p),
            Params::PerImage(map) => {
                map.get(id).ok_or_else(|| CliError::data(format!("no parameters for sample `{id}`")))
            }
        }
    }
}

fn calibration_error(path: &Path, e: CalibrationError) -> CliError {
    match e {
        CalibrationError::Io(_) => CliError::data(format!("{}: {e}", path.display())),
        _ => CliError::schema(format!("{}: {e}", path.display())),
    }
}

fn load_params(m: &mut RunManifest, args: &ModelArgs, skel: &Arc<Skeleton>) -> Result<Params, CliError> {
    let path = args.params.as_ref().ok_or_else(|| CliError::usage("--params is required for this mode"))?;
    let text = read_text(m, path)?;
    if args.per_image {
        parse_image_params(&text, skel).map(Params::PerImage)
    } else {
        parse_params(&text, skel).map(Params::Shared)
    }
    .map_err(|e| calibration_error(path, e))
}

fn peak_config(args: &PeakArgs) -> Result<PeakConfig, CliError> {
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(CliError::usage(format!("--threshold must lie in (0, 1], got {}", args.threshold)));
    }
    if args.max_peaks == 0 {
        return Err(CliError::usage("--max-peaks must be positive"));
    }
    Ok(PeakConfig { threshold_ratio: args.threshold, max_peaks: args.max_peaks })
}

fn sample_error(id: &str, e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("sample `{id}`: {e}"))
}

fn line(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Loads heatmaps chunk by chunk and maps each through `f`, keeping manifest order.
fn map_heatmaps<F>(m: &mut RunManifest, entries: &[ManifestEntry], stage: &str, f: F) -> Result<Vec<String>, CliError>
where
    F: Fn(&str, &Heatmap) -> Result<String, CliError> + Sync,
{
    let mut lines = Vec::with_capacity(entries.len());
    for chunk in entries.chunks(CHUNK) {
        let loaded: Vec<Result<(String, Heatmap), CliError>> = m.time("load", || {
            chunk
                .par_iter()
                .map(|e| {
                    let bytes = fs::read(&e.path)
                        .map_err(|err| sample_error(&e.id, format!("cannot read {}: {err}", e.path.display())))?;
                    let h = decode_heatmap(&bytes).map_err(|err| sample_error(&e.id, err))?;
                    Ok((sha256_hex(&bytes), h))
                })
                .collect()
        });
        let mut maps = Vec::with_capacity(chunk.len());
        for (e, r) in chunk.iter().zip(loaded) {
            let (digest, h) = r?;
            m.inputs.insert(e.path.display().to_string(), digest);
            maps.push(h);
        }
        let out: Vec<Result<String, CliError>> =
            m.time(stage, || chunk.par_iter().zip(maps.par_iter()).map(|(e, h)| f(&e.id, h)).collect());
        for r in out {
            lines.push(r?);
        }
    }
    m.samples = entries.len();
    Ok(lines)
}

fn score(a: &ScoreArgs) -> Result<RunManifest, CliError> {
    let mut m = new_manifest("score", a);
    let skel = load_skeleton(&mut m, &a.model.skeleton)?;
    let peaks = peak_config(&a.peaks)?;
    let lines = if a.mode == ScoreMode::Point {
        let path = a.poses.as_ref().ok_or_else(|| CliError::usage("--mode point requires --poses"))?;
        let params = load_params(&mut m, &a.model, &skel)?;
        let records: Vec<PoseRecord> = read_records(&mut m, path)?;
        let lines: Vec<Result<String, CliError>> = m.time("score", || {
            records
                .par_iter()
                .map(|r| {
                    let pose = Pose::from_optional(r.pose.clone()).map_err(|e| sample_error(&r.id, e))?;
                    let report = point_log_likelihood(&pose, params.get(&r.id)?).map_err(|e| sample_error(&r.id, e))?;
                    Ok(line(&ScoreLine { id: &r.id, report: &report }))
                })
                .collect()
        });
        m.samples = records.len();
        lines.into_iter().collect::<Result<Vec<_>, _>>()?
    } else {
        let path = a.heatmaps.as_ref().ok_or_else(|| CliError::usage("--heatmaps is required for this mode"))?;
        let params = match a.mode {
            ScoreMode::Entropy => None,
            _ => Some(load_params(&mut m, &a.model, &skel)?),
        };
        let entries = read_heatmap_manifest(&mut m, path)?;
        let mode = a.mode;
        map_heatmaps(&mut m, &entries, "score", |id, h| {
            let set = extract_peaks(h, &peaks).map_err(|e| sample_error(id, e))?;
            let lik = |e| sample_error(id, e);
            Ok(match (mode, &params) {
                (ScoreMode::Entropy, _) => {
                    line(&ScalarLine { id, mode: "entropy", total: multi_peak_entropy(&set).map_err(lik)? })
                }
                (ScoreMode::Max, Some(p)) => {
                    let total = refine_pose(&set, p.get(id)?).map_err(lik)?.objective;
                    line(&ScalarLine { id, mode: "max", total })
                }
                (_, Some(p)) => {
                    line(&ScoreLine { id, report: &expected_log_likelihood(&set, p.get(id)?).map_err(lik)? })
                }
                (_, None) => unreachable!("params loaded for model-based modes"),
            })
        })?
    };
    write_lines(&mut m, &a.out, &lines)?;
    Ok(m)
}

fn refine(a: &RefineArgs) -> Result<RunManifest, CliError> {
    let mut m = new_manifest("refine", a);
    let skel = load_skeleton(&mut m, &a.model.skeleton)?;
    let peaks = peak_config(&a.peaks)?;
    let params = load_params(&mut m, &a.model, &skel)?;
    let entries = read_heatmap_manifest(&mut m, &a.heatmaps)?;
    let lines = map_heatmaps(&mut m, &entries, "refine", |id, h| {
        let set = extract_peaks(h, &peaks).map_err(|e| sample_error(id, e))?;
        let p = params.get(id)?;
        let refined = refine_pose(&set, p).map_err(|e| sample_error(id, e))?;
        Ok(line(&RefinedLine::new(id, &refined, refined.report(p))))
    })?;
    write_lines(&mut m, &a.out, &lines)?;
    Ok(m)
}

fn maxima(a: &MaximaArgs) -> Result<RunManifest, CliError> {
    let mut m = new_manifest("maxima", a);
    let peaks = peak_config(&a.peaks)?;
    let entries = read_heatmap_manifest(&mut m, &a.heatmaps)?;
    let lines = map_heatmaps(&mut m, &entries, "maxima", |id, h| {
        let set = extract_peaks(h, &peaks).map_err(|e| sample_error(id, e))?;
        Ok(line(&PeaksLine { id: id.to_string(), joints: set.iter().map(<[_]>::to_vec).collect() }))
    })?;
    write_lines(&mut m, &a.out, &lines)?;
    Ok(m)
}

fn select(a: &SelectArgs, seed: Option<u64>) -> Result<RunManifest, CliError> {
    let mut m = new_manifest("select", a);
    let records: Vec<ScoreInput> = read_records(&mut m, &a.scores)?;
    let kind = match a.strategy {
        StrategyArg::Vl4pose => StrategyKind::Vl4pose,
        StrategyArg::Entropy => StrategyKind::Entropy,
        StrategyArg::Random => StrategyKind::Random,
    };
    let seed = seed.unwrap_or(0);
    if kind == StrategyKind::Random {
        m.seed = Some(seed);
    }
    let mut table = ScoreTable::new();
    for r in &records {
        if !r.total.is_finite() {
            return Err(CliError::data(format!("sample `{}`: non-finite score", r.id)));
        }
        let value = if kind == StrategyKind::Random { random_draw(seed, &r.id) } else { r.total };
        if table.insert(r.id.clone(), value).is_some() {
            return Err(CliError::schema(format!("{}: duplicate id `{}`", a.scores.display(), r.id)));
        }
    }
    let result = m.time("select", || select_batch(&table, kind, a.budget)).map_err(CliError::data)?;
    m.samples = records.len();
    write_file(&a.out, &to_pretty(&result))?;
    Ok(m)
}

fn calibrate(a: &CalibrateArgs) -> Result<RunManifest, CliError> {
    let mut m = new_manifest("calibrate", a);
    let skel = load_skeleton(&mut m, &a.skeleton)?;
    let records: Vec<PoseRecord> = read_records(&mut m, &a.labeled)?;
    let poses = records
        .iter()
        .map(|r| Pose::from_optional(r.pose.clone()).map_err(|e| sample_error(&r.id, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let weights =
        records.iter().any(|r| r.weight.is_some()).then(|| records.iter().map(|r| r.weight.unwrap_or(1.0)).collect());
    m.samples = records.len();
    let params = m.time("fit", || {
        let set = LabeledPoseSet::new(skel.clone(), poses, weights)?;
        match a.model {
            ModelArg::Distance => fit_distance_params(&set),
            ModelArg::Offset => fit_offset_params(&set),
        }
    });
    let params = params.map_err(|e| match e {
        CalibrationError::BadPose { index, source } => sample_error(&records[index].id, source),
        other => CliError::data(other),
    })?;
    write_file(&a.out, &to_pretty(&params.to_document()))?;
    Ok(m)
}

fn simulate(a: &SimulateArgs, seed: Option<u64>) -> Result<RunManifest, CliError> {
    let mut m = new_manifest("simulate", a);
    let text = read_text(&mut m, &a.config)?;
    let mut cfg =
        SimulationConfig::from_json(&text).map_err(|e| CliError::schema(format!("{}: {e}", a.config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg).expect("config serializes");
    m.samples = cfg.unlabeled_in_distribution + cfg.unlabeled_ood;
    let report = m.time("simulate", || run_simulation(&cfg)).map_err(CliError::schema)?;
    write_file(&a.out, &to_pretty(&report))?;
    let selections_path = a.selections.clone().unwrap_or_else(|| {
        let mut name = a.out.as_os_str().to_owned();
        name.push(".selections.jsonl");
        PathBuf::from(name)
    });
    let lines: Vec<String> = report.selections.iter().map(line).collect();
    write_lines(&mut m, &selections_path, &lines)?;
    Ok(m)
}
