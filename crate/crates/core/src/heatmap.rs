//! Dense per-joint heatmaps, local-maxima extraction and peak normalization.
//!
//! A joint's keypoint distribution is restricted to the strict local maxima of
//! its heatmap, with probabilities given by a softmax over the raw peak scores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Pose;

pub const MAGIC: &[u8; 4] = b"PSHM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub const DEFAULT_THRESHOLD_RATIO: f64 = 0.05;
pub const DEFAULT_MAX_PEAKS: usize = 10;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("joint {joint} out of range for a heatmap with {count} joints")]
    JointOutOfRange { joint: usize, count: usize },
    #[error("cannot normalize an empty score list")]
    EmptyInput,
    #[error("heatmap must be at least 3x3, got {height}x{width}")]
    BadShape { height: usize, width: usize },
    #[error("expected {expected} values, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("bad magic {0:?}, expected \"PSHM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported heatmap format version {0}")]
    VersionUnsupported(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingData(usize),
    #[error("non-finite value at flat index {0}")]
    NonFiniteValue(usize),
    #[error("joint {joint} at {location:?} lies outside the {height}x{width} grid")]
    OutOfBoundsCoordinate { joint: usize, location: Vec<f64>, height: usize, width: usize },
    #[error("heatmaps need 2D keypoints, joint {joint} has dimension {found}")]
    NotPlanar { joint: usize, found: usize },
    #[error("peak_sigma must be positive and finite, got {0}")]
    BadPeakSigma(f64),
    #[error("joint {0} has no peaks")]
    EmptyPeakList(usize),
    #[error("joint {joint}: peak probabilities sum to {sum}")]
    Unnormalized { joint: usize, sum: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `joints × height × width` scores, joint-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    joints: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl Heatmap {
    pub fn new(joints: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self, HeatmapError> {
        if height < 3 || width < 3 {
            return Err(HeatmapError::BadShape { height, width });
        }
        let expected = joints * height * width;
        if values.len() != expected {
            return Err(HeatmapError::LengthMismatch { expected, found: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(HeatmapError::NonFiniteValue(i));
        }
        Ok(Self { joints, height, width, values })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The `height × width` map of one joint.
    pub fn joint_map(&self, joint: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[joint * n..(joint + 1) * n]
    }

    pub fn get(&self, joint: usize, row: usize, col: usize) -> f32 {
        self.values[(joint * self.height + row) * self.width + col]
    }
}

/// A candidate keypoint location taken from a heatmap local maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub prob: f64,
}

impl Peak {
    pub fn location(&self) -> [f64; 2] {
        [self.row as f64, self.col as f64]
    }
}

/// Per-joint peak lists, each non-empty with probabilities summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeakSet {
    joints: Vec<Vec<Peak>>,
}

impl PeakSet {
    pub fn new(joints: Vec<Vec<Peak>>) -> Result<Self, HeatmapError> {
        for (j, peaks) in joints.iter().enumerate() {
            if peaks.is_empty() {
                return Err(HeatmapError::EmptyPeakList(j));
            }
            let sum: f64 = peaks.iter().map(|p| p.prob).sum();
            if (sum - 1.0).abs() > 1e-9 || peaks.iter().any(|p| p.prob.is_nan() || p.prob < 0.0) {
                return Err(HeatmapError::Unnormalized { joint: j, sum });
            }
        }
        Ok(Self { joints })
    }

    /// Builds a peak set from `(row, col, score)` triples, normalizing each joint by softmax.
    pub fn from_scores(joints: Vec<Vec<(usize, usize, f64)>>) -> Result<Self, HeatmapError> {
        let joints = joints
            .into_iter()
            .map(|peaks| {
                let scores: Vec<f64> = peaks.iter().map(|p| p.2).collect();
                let probs = normalize_peaks(&scores)?;
                Ok(peaks
                    .into_iter()
                    .zip(probs)
                    .map(|((row, col, score), prob)| Peak { row, col, score, prob })
                    .collect())
            })
            .collect::<Result<Vec<_>, HeatmapError>>()?;
        Ok(Self { joints })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint(&self, joint: usize) -> &[Peak] {
        &self.joints[joint]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Peak]> {
        self.joints.iter().map(Vec::as_slice)
    }

    /// Number of full peak configurations, saturating at `u128::MAX`.
    pub fn configuration_count(&self) -> u128 {
        self.joints.iter().fold(1u128, |acc, p| acc.saturating_mul(p.len() as u128))
    }

    /// The pose made of each joint's highest-scoring peak.
    pub fn argmax_pose(&self) -> Pose {
        let coords = self.joints.iter().map(|p| p[0].location().to_vec()).collect();
        Pose::complete(coords).expect("grid locations are finite")
    }
}

/// Peak extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeakConfig {
    pub threshold_ratio: f64,
    pub max_peaks: usize,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { threshold_ratio: DEFAULT_THRESHOLD_RATIO, max_peaks: DEFAULT_MAX_PEAKS }
    }
}

/// Strict 8-connected local maxima of one joint's map.
///
/// Cells must exceed every existing neighbour and reach `threshold_ratio` times the
/// map's global maximum. The row-major-first global maximum is always kept, so a
/// constant map yields the single cell `(0, 0)`. Peaks are sorted by descending
/// score (ties row-major), truncated to `max_peaks` and softmax-normalized.
pub fn local_maxima(
    h: &Heatmap,
    joint: usize,
    threshold_ratio: f64,
    max_peaks: usize,
) -> Result<Vec<Peak>, HeatmapError> {
    if joint >= h.joints {
        return Err(HeatmapError::JointOutOfRange { joint, count: h.joints });
    }
    let (height, width) = (h.height, h.width);
    let map = h.joint_map(joint);

    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    let threshold = threshold_ratio * f64::from(map[best]);

    let mut found: Vec<(usize, usize, f64)> = Vec::new();
    let mut has_best = false;
    for r in 0..height {
        let r0 = r.saturating_sub(1);
        let r1 = (r + 1).min(height - 1);
        for c in 0..width {
            let v = map[r * width + c];
            let idx = r * width + c;
            if idx != best && f64::from(v) < threshold {
                continue;
            }
            let c0 = c.saturating_sub(1);
            let c1 = (c + 1).min(width - 1);
            let mut strict = true;
            'nb: for nr in r0..=r1 {
                for nc in c0..=c1 {
                    if (nr != r || nc != c) && map[nr * width + nc] >= v {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict || idx == best {
                has_best |= idx == best;
                found.push((r, c, f64::from(v)));
            }
        }
    }
    debug_assert!(has_best);

    // stable: equal scores stay in row-major order
    found.sort_by(|a, b| b.2.total_cmp(&a.2));
    found.truncate(max_peaks.max(1));
    let scores: Vec<f64> = found.iter().map(|p| p.2).collect();
    let probs = normalize_peaks(&scores)?;
    Ok(found.into_iter().zip(probs).map(|((row, col, score), prob)| Peak { row, col, score, prob }).collect())
}

/// Runs [`local_maxima`] for every joint.
pub fn extract_peaks(h: &Heatmap, config: &PeakConfig) -> Result<PeakSet, HeatmapError> {
    let joints = (0..h.joints)
        .map(|j| local_maxima(h, j, config.threshold_ratio, config.max_peaks))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PeakSet { joints })
}

/// Softmax with max-subtraction.
pub fn normalize_peaks(scores: &[f64]) -> Result<Vec<f64>, HeatmapError> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Err(HeatmapError::EmptyInput);
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn write_heatmap<W: Write>(h: &Heatmap, mut out: W) -> Result<(), HeatmapError> {
    out.write_all(MAGIC)?;
    for v in [FORMAT_VERSION, h.joints as u32, h.height as u32, h.width as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(h.values.len() * 4);
    for v in &h.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

pub fn read_heatmap<R: Read>(mut input: R) -> Result<Heatmap, HeatmapError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_heatmap(&bytes)
}

/// Parses a complete PSHM byte buffer.
pub fn decode_heatmap(bytes: &[u8]) -> Result<Heatmap, HeatmapError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(HeatmapError::BadMagic(bytes[..4].try_into().unwrap()));
        }
        return Err(HeatmapError::TruncatedPayload { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(HeatmapError::BadMagic(magic));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != FORMAT_VERSION {
        return Err(HeatmapError::VersionUnsupported(version));
    }
    let (joints, height, width) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = joints
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_mul(4))
        .unwrap_or(usize::MAX);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(HeatmapError::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(HeatmapError::TrailingData(payload.len() - expected));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Heatmap::new(joints, height, width, values)
}

pub fn write_heatmap_file(h: &Heatmap, path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    write_heatmap(h, BufWriter::new(File::create(path)?))
}

pub fn read_heatmap_file(path: impl AsRef<Path>) -> Result<Heatmap, HeatmapError> {
    read_heatmap(BufReader::new(File::open(path)?))
}

/// An extra Gaussian bump planted on one joint's map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub joint: usize,
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
}

/// Renders unit-amplitude isotropic Gaussian bumps at each present joint plus any
/// distractors, clipped to `[0, 1]`. Missing joints get an all-zero map.
pub fn render_gaussian_heatmap(
    pose: &Pose,
    height: usize,
    width: usize,
    peak_sigma: f64,
    distractors: &[Distractor],
) -> Result<Heatmap, HeatmapError> {
    if height < 3 || width < 3 {
        return Err(HeatmapError::BadShape { height, width });
    }
    if !(peak_sigma.is_finite() && peak_sigma > 0.0) {
        return Err(HeatmapError::BadPeakSigma(peak_sigma));
    }
    let joints = pose.len();
    let in_bounds = |r: f64, c: f64| r >= 0.0 && c >= 0.0 && r <= (height - 1) as f64 && c <= (width - 1) as f64;
    let mut bumps: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); joints];
    for (j, list) in bumps.iter_mut().enumerate() {
        if !pose.is_present(j) {
            continue;
        }
        let loc = pose.coordinate(j);
        if loc.len() != 2 {
            return Err(HeatmapError::NotPlanar { joint: j, found: loc.len() });
        }
        if !in_bounds(loc[0], loc[1]) {
            return Err(HeatmapError::OutOfBoundsCoordinate { joint: j, location: loc.to_vec(), height, width });
        }
        list.push((loc[0], loc[1], 1.0));
    }
    for d in distractors {
        if d.joint >= joints {
            return Err(HeatmapError::JointOutOfRange { joint: d.joint, count: joints });
        }
        if !in_bounds(d.row, d.col) {
            return Err(HeatmapError::OutOfBoundsCoordinate {
                joint: d.joint,
                location: vec![d.row, d.col],
                height,
                width,
            });
        }
        bumps[d.joint].push((d.row, d.col, d.amplitude));
    }

    let inv = 1.0 / (2.0 * peak_sigma * peak_sigma);
    let mut values = vec![0f32; joints * height * width];
    let mut acc = vec![0f64; height * width];
    for (j, list) in bumps.iter().enumerate() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for &(r0, c0, amp) in list {
            // separable: exp(-(dr² + dc²)/2σ²) = g(dr)·g(dc)
            let gr: Vec<f64> = (0..height).map(|r| (-(r as f64 - r0).powi(2) * inv).exp()).collect();
            let gc: Vec<f64> = (0..width).map(|c| (-(c as f64 - c0).powi(2) * inv).exp()).collect();
            for (r, g) in gr.iter().enumerate() {
                let row = &mut acc[r * width..(r + 1) * width];
                for (cell, h) in row.iter_mut().zip(&gc) {
                    *cell += amp * g * h;
                }
            }
        }
        let out = &mut values[j * height * width..(j + 1) * height * width];
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = a.clamp(0.0, 1.0) as f32;
        }
    }
    Heatmap::new(joints, height, width, values)
}
