//! Frame-stream files produced by the face tracker.
//!
//! One JSON object per line: `{"t": seconds, "lm": [[x,y,z] x 478], "bs": [52 floats]}`.
//! Streams are parsed strictly (every malformed line is an error naming the
//! line), validated into a [`StreamReport`], and short tracking dropouts are
//! filled by linear interpolation with [`fill_gaps`].

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_LANDMARKS: usize = 478;
pub const NUM_BLENDSHAPES: usize = 52;

/// Frame rate assumed when a stream has fewer than two frames.
pub const DEFAULT_FRAME_RATE: f64 = 60.0;
/// Inter-frame intervals longer than this many nominal intervals are gaps.
pub const GAP_FACTOR: f64 = 1.5;
pub const DEFAULT_MAX_GAP_S: f64 = 1.0;
pub const BLENDSHAPE_TOLERANCE: f64 = 1e-6;

static BLENDSHAPE_NAMES_JSON: &str = include_str!("../data/blendshape_names_v1.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LandmarkIoError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: timestamp does not increase")]
    NonMonotonicTimestamp { line: usize },
    #[error("line {line}: expected {NUM_LANDMARKS} landmarks and {NUM_BLENDSHAPES} blendshapes, got {landmarks} and {blendshapes}")]
    WrongArity {
        line: usize,
        landmarks: usize,
        blendshapes: usize,
    },
    #[error("stream has no frames")]
    EmptyStream,
    #[error("max_gap_s must be positive, got {0}")]
    BadMaxGap(f64),
    #[error("bad blendshape name list: {0}")]
    BadNameList(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for LandmarkIoError {
    fn from(e: std::io::Error) -> Self {
        LandmarkIoError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    /// Seconds since video start.
    pub t: f64,
    pub landmarks: Vec<[f64; 3]>,
    pub blendshapes: Vec<f64>,
}

/// An interval `(start_s, end_s)` between two consecutive frames that was
/// too long to interpolate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub start_s: f64,
    pub end_s: f64,
}

impl Gap {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub subject_id: String,
    pub video_id: String,
    pub nominal_rate: f64,
    pub frames: Vec<FrameRecord>,
    /// `true` for frames observed by the tracker, `false` for interpolated ones.
    pub validity_mask: Vec<bool>,
    /// Gaps left unfilled by the last [`fill_gaps`] call.
    pub unfilled_gaps: Vec<Gap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub frame_count: usize,
    pub duration_s: f64,
    pub gap_count: usize,
    pub longest_gap_s: f64,
    pub out_of_range_blendshape_count: usize,
    pub dropped_frame_count: usize,
}

#[derive(Deserialize)]
struct RawRecord {
    t: f64,
    lm: Vec<Vec<f64>>,
    bs: Vec<f64>,
}

#[derive(Serialize)]
struct RawRecordRef<'a> {
    t: f64,
    lm: &'a [[f64; 3]],
    bs: &'a [f64],
}

/// Blendshape names in the tracker's canonical order (version 1 of the list).
pub fn blendshape_names() -> Vec<String> {
    parse_name_list(BLENDSHAPE_NAMES_JSON).expect("bundled blendshape list is valid")
}

/// Parse a versioned name-list file: `{"version": 1, "names": [...]}`.
pub fn parse_name_list(json: &str) -> Result<Vec<String>, LandmarkIoError> {
    #[derive(Deserialize)]
    struct NameList {
        version: u32,
        names: Vec<String>,
    }
    let list: NameList =
        serde_json::from_str(json).map_err(|e| LandmarkIoError::BadNameList(e.to_string()))?;
    if list.version != 1 {
        return Err(LandmarkIoError::BadNameList(format!(
            "unsupported version {}",
            list.version
        )));
    }
    if list.names.len() != NUM_BLENDSHAPES {
        return Err(LandmarkIoError::BadNameList(format!(
            "expected {NUM_BLENDSHAPES} names, got {}",
            list.names.len()
        )));
    }
    Ok(list.names)
}

fn parse_line(line: &str, line_no: usize) -> Result<FrameRecord, LandmarkIoError> {
    let malformed = |reason: String| LandmarkIoError::MalformedRecord {
        line: line_no,
        reason,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    if raw.lm.len() != NUM_LANDMARKS || raw.bs.len() != NUM_BLENDSHAPES {
        return Err(LandmarkIoError::WrongArity {
            line: line_no,
            landmarks: raw.lm.len(),
            blendshapes: raw.bs.len(),
        });
    }
    if !raw.t.is_finite() || raw.t < 0.0 {
        return Err(malformed(format!("invalid timestamp {}", raw.t)));
    }
    let mut landmarks = Vec::with_capacity(NUM_LANDMARKS);
    for (i, p) in raw.lm.iter().enumerate() {
        if p.len() != 3 {
            return Err(malformed(format!("landmark {i} has {} coordinates", p.len())));
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(malformed(format!("landmark {i} is not finite")));
        }
        landmarks.push([p[0], p[1], p[2]]);
    }
    if raw.bs.iter().any(|b| !b.is_finite()) {
        return Err(malformed("non-finite blendshape".into()));
    }
    Ok(FrameRecord {
        t: raw.t,
        landmarks,
        blendshapes: raw.bs,
    })
}

/// Nominal rate from the lower median inter-frame interval, snapped to an
/// integer rate when within 0.1% of one.
pub fn infer_rate(times: &[f64]) -> f64 {
    if times.len() < 2 {
        return DEFAULT_FRAME_RATE;
    }
    let mut dts: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    dts.sort_by(|a, b| a.total_cmp(b));
    let rate = 1.0 / dts[(dts.len() - 1) / 2];
    let snapped = rate.round();
    if snapped > 0.0 && ((rate - snapped) / snapped).abs() < 1e-3 {
        snapped
    } else {
        rate
    }
}

/// Parse a line-delimited frame stream. Blank lines are ignored; every other
/// line must be a well-formed record with a strictly increasing timestamp.
pub fn parse_frame_stream<R: BufRead>(
    source: R,
    subject_id: &str,
    video_id: &str,
) -> Result<FrameStream, LandmarkIoError> {
    let mut frames: Vec<FrameRecord> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(&line, line_no)?;
        if let Some(prev) = frames.last() {
            if rec.t <= prev.t {
                return Err(LandmarkIoError::NonMonotonicTimestamp { line: line_no });
            }
        }
        frames.push(rec);
    }
    let times: Vec<f64> = frames.iter().map(|f| f.t).collect();
    let nominal_rate = infer_rate(&times);
    let validity_mask = vec![true; frames.len()];
    Ok(FrameStream {
        subject_id: subject_id.to_string(),
        video_id: video_id.to_string(),
        nominal_rate,
        frames,
        validity_mask,
        unfilled_gaps: Vec::new(),
    })
}

/// Split a `<subject_id>__<video_id>.jsonl` file name into its ids.
pub fn ids_from_path(path: &Path) -> Option<(String, String)> {
    let stem = path.file_name()?.to_str()?.strip_suffix(".jsonl")?;
    let (subject, video) = stem.split_once("__")?;
    if subject.is_empty() || video.is_empty() {
        return None;
    }
    Some((subject.to_string(), video.to_string()))
}

pub fn stream_file_name(subject_id: &str, video_id: &str) -> String {
    format!("{subject_id}__{video_id}.jsonl")
}

/// Read a stream file, taking the ids from its name.
pub fn read_stream_file(path: &Path) -> Result<FrameStream, LandmarkIoError> {
    let (subject, video) = ids_from_path(path).ok_or_else(|| {
        LandmarkIoError::Io(format!(
            "{} is not named <subject>__<video>.jsonl",
            path.display()
        ))
    })?;
    let file = std::fs::File::open(path)?;
    parse_frame_stream(std::io::BufReader::new(file), &subject, &video)
}

pub fn write_frame_record<W: Write>(frame: &FrameRecord, out: &mut W) -> std::io::Result<()> {
    let raw = RawRecordRef {
        t: frame.t,
        lm: &frame.landmarks,
        bs: &frame.blendshapes,
    };
    serde_json::to_writer(&mut *out, &raw)?;
    out.write_all(b"\n")
}

/// Serialize a stream in the line format accepted by [`parse_frame_stream`].
pub fn write_frame_stream<W: Write>(stream: &FrameStream, mut out: W) -> std::io::Result<()> {
    for frame in &stream.frames {
        write_frame_record(frame, &mut out)?;
    }
    out.flush()
}

fn gap_threshold(rate: f64) -> f64 {
    GAP_FACTOR / rate
}

pub fn validate_stream(stream: &FrameStream) -> StreamReport {
    let threshold = gap_threshold(stream.nominal_rate);
    let mut gap_count = 0;
    let mut longest_gap_s: f64 = 0.0;
    let mut dropped = 0;
    for w in stream.frames.windows(2) {
        let dt = w[1].t - w[0].t;
        if dt > threshold {
            gap_count += 1;
            longest_gap_s = longest_gap_s.max(dt);
            dropped += ((dt * stream.nominal_rate).round() as usize).saturating_sub(1);
        }
    }
    let out_of_range = stream
        .frames
        .iter()
        .flat_map(|f| f.blendshapes.iter())
        .filter(|&&b| !(-BLENDSHAPE_TOLERANCE..=1.0 + BLENDSHAPE_TOLERANCE).contains(&b))
        .count();
    let duration_s = match (stream.frames.first(), stream.frames.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    StreamReport {
        frame_count: stream.frames.len(),
        duration_s,
        gap_count,
        longest_gap_s,
        out_of_range_blendshape_count: out_of_range,
        dropped_frame_count: dropped,
    }
}

impl FrameStream {
    /// Clamp blendshapes into [0, 1]; returns how many values were outside
    /// the tolerance band.
    pub fn clamp_blendshapes(&mut self) -> usize {
        let mut count = 0;
        for frame in &mut self.frames {
            for b in &mut frame.blendshapes {
                if !(-BLENDSHAPE_TOLERANCE..=1.0 + BLENDSHAPE_TOLERANCE).contains(b) {
                    count += 1;
                }
                *b = b.clamp(0.0, 1.0);
            }
        }
        count
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }
}

fn lerp_frame(a: &FrameRecord, b: &FrameRecord, t: f64) -> FrameRecord {
    let alpha = (t - a.t) / (b.t - a.t);
    let mix = |x: f64, y: f64| x + alpha * (y - x);
    FrameRecord {
        t,
        landmarks: a
            .landmarks
            .iter()
            .zip(&b.landmarks)
            .map(|(p, q)| [mix(p[0], q[0]), mix(p[1], q[1]), mix(p[2], q[2])])
            .collect(),
        blendshapes: a
            .blendshapes
            .iter()
            .zip(&b.blendshapes)
            .map(|(&x, &y)| mix(x, y))
            .collect(),
    }
}

/// Fill gaps no longer than `max_gap_s` with linearly interpolated frames
/// spaced evenly at (approximately) the nominal rate. Longer gaps are kept
/// and listed in `unfilled_gaps`.
pub fn fill_gaps(stream: &FrameStream, max_gap_s: f64) -> Result<FrameStream, LandmarkIoError> {
    if !(max_gap_s > 0.0) {
        return Err(LandmarkIoError::BadMaxGap(max_gap_s));
    }
    if stream.frames.is_empty() {
        return Err(LandmarkIoError::EmptyStream);
    }
    let rate = stream.nominal_rate;
    let threshold = gap_threshold(rate);
    let mut frames = Vec::with_capacity(stream.frames.len());
    let mut mask = Vec::with_capacity(stream.frames.len());
    let mut unfilled = Vec::new();
    frames.push(stream.frames[0].clone());
    mask.push(stream.validity_mask[0]);
    for i in 1..stream.frames.len() {
        let (a, b) = (&stream.frames[i - 1], &stream.frames[i]);
        let dt = b.t - a.t;
        if dt > threshold {
            if dt <= max_gap_s {
                let steps = (dt * rate).round().max(2.0) as usize;
                for k in 1..steps {
                    let t = a.t + dt * k as f64 / steps as f64;
                    frames.push(lerp_frame(a, b, t));
                    mask.push(false);
                }
            } else {
                unfilled.push(Gap {
                    start_s: a.t,
                    end_s: b.t,
                });
            }
        }
        frames.push(b.clone());
        mask.push(stream.validity_mask[i]);
    }
    Ok(FrameStream {
        subject_id: stream.subject_id.clone(),
        video_id: stream.video_id.clone(),
        nominal_rate: rate,
        frames,
        validity_mask: mask,
        unfilled_gaps: unfilled,
    })
}
