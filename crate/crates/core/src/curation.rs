//! Face-track curation: shot detection over colour histograms, IOU face
//! tracking, active-speaker and identity thresholding, and precision-recall
//! operating-point selection.
//!
//! Face detection, landmarks, audio-visual sync and face identity scores are
//! produced elsewhere; a [`FrameStream`] carries their per-frame outputs.

use std::io::{BufRead, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Gender, ManifestRecord};
use crate::eval::ScoreSet;
use crate::{Error, Result};

pub const DEFAULT_SHOT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_IOU_MIN: f64 = 0.5;
pub const DEFAULT_GAP_MAX: u64 = 10;
pub const DEFAULT_SYNC_WINDOW: usize = 25;

/// `(x, y, w, h)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox(pub f64, pub f64, pub f64, pub f64);

impl BoundingBox {
    pub fn area(&self) -> f64 {
        self.2 * self.3
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.0 + self.2).min(other.0 + other.2) - self.0.max(other.0);
        let iy = (self.1 + self.3).min(other.1 + other.3) - self.1.max(other.1);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub landmark_ok: bool,
    pub identity_score: f64,
    pub sync_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_idx: u64,
    pub color_histogram: Vec<f64>,
    #[serde(default)]
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameStream {
    pub frames: Vec<Frame>,
}

impl FrameStream {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let s = Self { frames };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[1].frame_idx <= w[0].frame_idx {
                return Err(Error::InvalidInput(format!(
                    "frame_idx not strictly increasing at {}",
                    w[1].frame_idx
                )));
            }
        }
        for f in &self.frames {
            if f.color_histogram.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "negative or non-finite histogram entry in frame {}",
                    f.frame_idx
                )));
            }
            for d in &f.detections {
                let b = d.bbox;
                if !(b.2 > 0.0 && b.3 > 0.0) || ![b.0, b.1, b.2, b.3].iter().all(|v| v.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "degenerate box in frame {}",
                        f.frame_idx
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for f in &self.frames {
            serde_json::to_writer(&mut *w, f)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut frames = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                frames.push(serde_json::from_str(&line)?);
            }
        }
        Self::new(frames)
    }
}

fn normalized(h: &[f64]) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; h.len()]
    }
}

/// Indices `b` such that a cut lies between frames `b - 1` and `b`.
pub fn shot_boundaries(stream: &FrameStream, threshold: f64) -> Result<Vec<usize>> {
    let first = stream
        .frames
        .first()
        .ok_or_else(|| Error::InvalidInput("empty frame stream".into()))?;
    let bins = first.color_histogram.len();
    if let Some(f) = stream.frames.iter().find(|f| f.color_histogram.len() != bins) {
        return Err(Error::InvalidInput(format!(
            "histogram length {} in frame {} differs from {bins}",
            f.color_histogram.len(),
            f.frame_idx
        )));
    }
    let hists: Vec<Vec<f64>> = stream.frames.iter().map(|f| normalized(&f.color_histogram)).collect();
    Ok((1..hists.len())
        .filter(|&i| {
            let d: f64 = hists[i - 1].iter().zip(&hists[i]).map(|(a, b)| (a - b).abs()).sum();
            d > threshold
        })
        .collect())
}

/// Shots as maximal boundary-free runs of frame positions.
pub fn detect_shots(stream: &FrameStream, threshold: f64) -> Result<Vec<Range<usize>>> {
    let cuts = shot_boundaries(stream, threshold)?;
    let mut starts = vec![0];
    starts.extend(cuts);
    let mut ends: Vec<usize> = starts[1..].to_vec();
    ends.push(stream.frames.len());
    Ok(starts.into_iter().zip(ends).map(|(s, e)| s..e).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceTrack {
    pub shot_id: usize,
    pub frames: Vec<(u64, BoundingBox)>,
    pub identity_scores: Vec<f64>,
    pub sync_scores: Vec<f64>,
}

impl FaceTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn mean_identity_score(&self) -> f64 {
        self.identity_scores.iter().sum::<f64>() / self.identity_scores.len() as f64
    }

    /// Inclusive first and last frame index.
    pub fn frame_span(&self) -> (u64, u64) {
        (self.frames[0].0, self.frames[self.frames.len() - 1].0)
    }

    fn push(&mut self, frame_idx: u64, d: &Detection) {
        self.frames.push((frame_idx, d.bbox));
        self.identity_scores.push(d.identity_score);
        self.sync_scores.push(d.sync_score);
    }
}

/// Greedy IOU tracker over the frames of one shot. A track survives at most
/// `gap_max` frames without a detection.
pub fn group_tracks(frames: &[Frame], shot_id: usize, iou_min: f64, gap_max: u64) -> Vec<FaceTrack> {
    let mut tracks: Vec<FaceTrack> = Vec::new();
    for f in frames {
        let mut pairs = Vec::new();
        for (t, track) in tracks.iter().enumerate() {
            let (last_idx, last_box) = track.frames[track.frames.len() - 1];
            if f.frame_idx.saturating_sub(last_idx) > gap_max + 1 {
                continue;
            }
            for (d, det) in f.detections.iter().enumerate() {
                let iou = last_box.iou(&det.bbox);
                if iou >= iou_min {
                    pairs.push((iou, t, d));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; tracks.len()];
        let mut det_used = vec![false; f.detections.len()];
        for (_, t, d) in pairs {
            if !track_used[t] && !det_used[d] {
                track_used[t] = true;
                det_used[d] = true;
                tracks[t].push(f.frame_idx, &f.detections[d]);
            }
        }
        for (d, det) in f.detections.iter().enumerate() {
            if !det_used[d] {
                let mut track = FaceTrack {
                    shot_id,
                    frames: Vec::new(),
                    identity_scores: Vec::new(),
                    sync_scores: Vec::new(),
                };
                track.push(f.frame_idx, det);
                tracks.push(track);
            }
        }
    }
    tracks
}

/// Sum of `values - threshold`; exactly zero when every value equals the
/// threshold, so the `>=` convention holds without rounding surprises.
fn excess(values: &[f64], threshold: f64) -> f64 {
    values.iter().map(|v| v - threshold).sum()
}

/// Accepts when some `window`-frame run of sync scores has mean at least
/// `threshold`.
pub fn verify_active_speaker(track: &FaceTrack, window: usize, threshold: f64) -> Result<bool> {
    if window == 0 {
        return Err(Error::InvalidInput("window must be at least 1".into()));
    }
    if track.sync_scores.len() < window {
        return Err(Error::InvalidInput(format!(
            "track of {} frames is shorter than the {window}-frame window",
            track.sync_scores.len()
        )));
    }
    Ok(track
        .sync_scores
        .windows(window)
        .any(|w| excess(w, threshold) >= 0.0))
}

/// Accepts when the mean identity score is at least `threshold`.
pub fn verify_identity(track: &FaceTrack, threshold: f64) -> bool {
    !track.identity_scores.is_empty() && excess(&track.identity_scores, threshold) >= 0.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Lowest score threshold whose accepted set has precision at least
/// `target_precision`; scores at or above the threshold are accepted.
pub fn pr_operating_point(scores: &ScoreSet, target_precision: f64) -> Result<OperatingPoint> {
    if scores.trials.iter().any(|t| t.0.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let positives = scores.trials.iter().filter(|t| t.1).count();
    if positives == 0 {
        return Err(Error::InvalidInput("no positive scores".into()));
    }
    let mut sorted = scores.trials.clone();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = None;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        if precision >= target_precision {
            best = Some(OperatingPoint {
                threshold,
                precision,
                recall: tp as f64 / positives as f64,
            });
        }
    }
    best.ok_or_else(|| {
        Error::NoOperatingPoint(format!("precision {target_precision} is not attainable"))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationConfig {
    pub shot_threshold: f64,
    pub iou_min: f64,
    pub gap_max: u64,
    pub sync_window: usize,
    pub sync_threshold: f64,
    pub identity_threshold: f64,
    /// Drop detections whose landmarks failed before tracking.
    pub require_landmarks: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            shot_threshold: DEFAULT_SHOT_THRESHOLD,
            iou_min: DEFAULT_IOU_MIN,
            gap_max: DEFAULT_GAP_MAX,
            sync_window: DEFAULT_SYNC_WINDOW,
            sync_threshold: 0.5,
            identity_threshold: 0.9,
            require_landmarks: true,
        }
    }
}

fn default_fps() -> f64 {
    25.0
}

/// Who is expected in a video and where its audio lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub video_id: String,
    pub poi_id: String,
    pub poi_name: String,
    pub gender: Gender,
    pub nationality: String,
    pub audio_path: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// FrameStream file, relative to the listing that names it.
    #[serde(default)]
    pub frames_path: String,
}

#[derive(Clone, Debug)]
pub struct StreamInput {
    pub meta: StreamMeta,
    pub stream: FrameStream,
}

/// A manifest record plus the frame and audio span it was cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuratedUtterance {
    #[serde(flatten)]
    pub record: ManifestRecord,
    pub frame_start: u64,
    pub frame_end: u64,
    pub audio_start_s: f64,
    pub audio_end_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CurationOutcome {
    pub utterances: Vec<CuratedUtterance>,
    /// `(video_id, reason)` for streams that were skipped.
    pub failed: Vec<(String, String)>,
}

fn curate_stream(input: &StreamInput, cfg: &CurationConfig) -> Result<Vec<CuratedUtterance>> {
    let meta = &input.meta;
    if !(meta.fps > 0.0) {
        return Err(Error::InvalidInput(format!("fps must be positive, got {}", meta.fps)));
    }
    input.stream.validate()?;
    if input.stream.frames.is_empty() {
        return Ok(Vec::new());
    }
    let shots = detect_shots(&input.stream, cfg.shot_threshold)?;
    let mut out = Vec::new();
    for (shot_id, range) in shots.into_iter().enumerate() {
        let frames: Vec<Frame> = input.stream.frames[range]
            .iter()
            .map(|f| Frame {
                frame_idx: f.frame_idx,
                color_histogram: Vec::new(),
                detections: f
                    .detections
                    .iter()
                    .filter(|d| d.landmark_ok || !cfg.require_landmarks)
                    .cloned()
                    .collect(),
            })
            .collect();
        for (track_id, track) in group_tracks(&frames, shot_id, cfg.iou_min, cfg.gap_max)
            .into_iter()
            .enumerate()
        {
            if track.len() < cfg.sync_window {
                continue;
            }
            if !verify_active_speaker(&track, cfg.sync_window, cfg.sync_threshold)? {
                continue;
            }
            if !verify_identity(&track, cfg.identity_threshold) {
                continue;
            }
            let (start, end) = track.frame_span();
            let audio_start_s = start as f64 / meta.fps;
            let audio_end_s = (end + 1) as f64 / meta.fps;
            out.push(CuratedUtterance {
                record: ManifestRecord {
                    poi_id: meta.poi_id.clone(),
                    poi_name: meta.poi_name.clone(),
                    gender: meta.gender,
                    nationality: meta.nationality.clone(),
                    video_id: meta.video_id.clone(),
                    utterance_id: format!("{}_s{shot_id:03}_t{track_id:03}", meta.video_id),
                    audio_path: meta.audio_path.clone(),
                    duration_s: audio_end_s - audio_start_s,
                },
                frame_start: start,
                frame_end: end,
                audio_start_s,
                audio_end_s,
            });
        }
    }
    Ok(out)
}

/// Runs shot detection, tracking, active-speaker and identity checks on each
/// stream. Streams that fail validation are logged and skipped.
pub fn curate(inputs: &[StreamInput], cfg: &CurationConfig) -> CurationOutcome {
    let results: Vec<Result<Vec<CuratedUtterance>>> =
        inputs.par_iter().map(|i| curate_stream(i, cfg)).collect();
    let mut outcome = CurationOutcome::default();
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok(u) => outcome.utterances.extend(u),
            Err(e) => {
                log::warn!("skipping stream {}: {e}", input.meta.video_id);
                outcome.failed.push((input.meta.video_id.clone(), e.to_string()));
            }
        }
    }
    outcome
}
