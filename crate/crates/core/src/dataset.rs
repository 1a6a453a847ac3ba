//! Predictor features, window samples, standardisation and splits.
//!
//! Feature channels 0..52 are the blendshapes in tracker order, 52..64 the
//! affine pose matrix flattened row-major. Each [`WindowSample`] pairs the
//! feature block covering an ISC window with that window's ISC value.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::alignment::AlignedFrame;
use crate::landmark_io::{blendshape_names, NUM_BLENDSHAPES};
use crate::isc::IscTrace;
use crate::signal::{
    lowpass_resample, sliding_windows, IrregularSeries, SignalError, UniformSeries, WindowSpec,
    DEFAULT_CUTOFF, DEFAULT_OUT_RATE,
};

pub const NUM_FEATURES: usize = 64;
pub const POSE_OFFSET: usize = NUM_BLENDSHAPES;
pub const MIN_STD: f64 = 1e-8;
pub const DEFAULT_PURGE_S: f64 = 10.0;
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("aligned sequence is empty")]
    EmptyStream,
    #[error("no feature series for subject {subject_id} / video {video_id}")]
    UnmatchedSubjectVideo { subject_id: String, video_id: String },
    #[error("feature and target grids differ: {0}")]
    GridMismatch(String),
    #[error("subject {0} appears in more than one split list")]
    OverlappingSubjectLists(String),
    #[error("subject {0} has no samples")]
    UnknownSubject(String),
    #[error("split {0} is empty")]
    EmptySplit(&'static str),
    #[error("bad split: {0}")]
    BadSplit(String),
    #[error("dataset file: {0}")]
    Io(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e.to_string())
    }
}

/// Names of the 64 feature channels.
pub fn feature_names() -> Vec<String> {
    let mut names = blendshape_names();
    for i in 0..4 {
        for j in 0..3 {
            names.push(format!("pose_r{i}{j}"));
        }
    }
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleSettings {
    pub out_rate: f64,
    pub cutoff: f64,
}

impl Default for ResampleSettings {
    fn default() -> Self {
        ResampleSettings {
            out_rate: DEFAULT_OUT_RATE,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub subject_id: String,
    pub video_id: String,
    pub series: UniformSeries,
}

fn resample_frames(
    aligned: &[AlignedFrame],
    nominal_rate: f64,
    channels: usize,
    settings: &ResampleSettings,
    fill: impl Fn(&AlignedFrame, &mut Vec<f64>),
) -> Result<UniformSeries, DatasetError> {
    if aligned.is_empty() {
        return Err(DatasetError::EmptyStream);
    }
    let mut values = Vec::with_capacity(aligned.len() * channels);
    for f in aligned {
        fill(f, &mut values);
    }
    let input = IrregularSeries::new(
        aligned.iter().map(|f| f.t).collect(),
        channels,
        values,
        aligned.iter().map(|f| f.valid).collect(),
        nominal_rate,
    )?;
    Ok(lowpass_resample(&input, settings.out_rate, settings.cutoff)?)
}

/// 64-channel predictor series on the resampler grid.
pub fn assemble_features(
    aligned: &[AlignedFrame],
    subject_id: &str,
    video_id: &str,
    nominal_rate: f64,
    settings: &ResampleSettings,
) -> Result<FeatureSeries, DatasetError> {
    let series = resample_frames(aligned, nominal_rate, NUM_FEATURES, settings, |f, out| {
        out.extend_from_slice(&f.blendshapes);
        out.extend_from_slice(&f.pose.flatten());
    })?;
    Ok(FeatureSeries {
        subject_id: subject_id.to_string(),
        video_id: video_id.to_string(),
        series,
    })
}

/// Canonical-space x and y of each iris landmark, interleaved per landmark.
pub fn assemble_iris(
    aligned: &[AlignedFrame],
    iris_ids: &[usize],
    nominal_rate: f64,
    settings: &ResampleSettings,
) -> Result<UniformSeries, DatasetError> {
    resample_frames(aligned, nominal_rate, 2 * iris_ids.len(), settings, |f, out| {
        for &i in iris_ids {
            out.push(f.landmarks[i][0]);
            out.push(f.landmarks[i][1]);
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub subject_id: String,
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    /// `rows x 64`, time-major.
    pub x: Vec<f32>,
    pub y: f32,
}

impl WindowSample {
    pub fn rows(&self) -> usize {
        self.x.len() / NUM_FEATURES
    }

    pub fn key(&self) -> (String, String, u64) {
        (self.subject_id.clone(), self.video_id.clone(), self.t_end.to_bits())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub windows: usize,
    pub samples: usize,
    pub dropped_invalid_target: usize,
    pub dropped_invalid_features: usize,
    pub dropped_out_of_range: usize,
}

/// One sample per ISC window whose target and feature block are both valid.
pub fn build_dataset(
    features: &[FeatureSeries],
    targets: &[IscTrace],
    spec: &WindowSpec,
) -> Result<(Vec<WindowSample>, BuildReport), DatasetError> {
    let mut report = BuildReport::default();
    let mut samples = Vec::new();
    for trace in targets {
        let fs = features
            .iter()
            .find(|f| f.subject_id == trace.subject_id && f.video_id == trace.video_id)
            .ok_or_else(|| DatasetError::UnmatchedSubjectVideo {
                subject_id: trace.subject_id.clone(),
                video_id: trace.video_id.clone(),
            })?;
        let s = &fs.series;
        let (len, _) = spec.samples(s.rate)?;
        for (k, &t_end) in trace.times.iter().enumerate() {
            report.windows += 1;
            let pos = (t_end - spec.length_s - s.t0) * s.rate;
            if (pos - pos.round()).abs() > 1e-6 {
                return Err(DatasetError::GridMismatch(format!(
                    "{}/{}: window ending at {t_end} s is off the feature grid (t0 = {})",
                    trace.subject_id, trace.video_id, s.t0
                )));
            }
            let pos = pos.round();
            if pos < 0.0 || pos as usize + len > s.len() {
                report.dropped_out_of_range += 1;
                continue;
            }
            let start = pos as usize;
            if !trace.valid[k] {
                report.dropped_invalid_target += 1;
                continue;
            }
            if !s.valid[start..start + len].iter().all(|&v| v) {
                report.dropped_invalid_features += 1;
                continue;
            }
            samples.push(WindowSample {
                subject_id: trace.subject_id.clone(),
                video_id: trace.video_id.clone(),
                t_start: s.time(start),
                t_end,
                x: s.block(start, len).iter().map(|&v| v as f32).collect(),
                y: trace.values[k] as f32,
            });
        }
    }
    report.samples = samples.len();
    Ok((samples, report))
}

/// Feature windows of a series without targets (for inference on new data).
pub fn unlabelled_windows(fs: &FeatureSeries, spec: &WindowSpec) -> Result<Vec<WindowSample>, DatasetError> {
    let s = &fs.series;
    Ok(sliding_windows(s, spec)?
        .into_iter()
        .filter(|w| w.valid)
        .map(|w| WindowSample {
            subject_id: fs.subject_id.clone(),
            video_id: fs.video_id.clone(),
            t_start: w.start_t,
            t_end: w.end_t,
            x: s.block(w.start_sample, w.len).iter().map(|&v| v as f32).collect(),
            y: f32::NAN,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn identity(channels: usize) -> Self {
        StandardizationStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and population std over every sample and timestep.
    pub fn compute(samples: &[WindowSample]) -> Self {
        let mut sum = vec![0.0f64; NUM_FEATURES];
        let mut count = 0usize;
        for s in samples {
            for row in s.x.chunks_exact(NUM_FEATURES) {
                for (acc, &v) in sum.iter_mut().zip(row) {
                    *acc += v as f64;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut ss = vec![0.0f64; NUM_FEATURES];
        for s in samples {
            for row in s.x.chunks_exact(NUM_FEATURES) {
                for ((acc, &v), m) in ss.iter_mut().zip(row).zip(&mean) {
                    let d = v as f64 - m;
                    *acc += d * d;
                }
            }
        }
        let std = ss
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let sd = (s / n).sqrt();
                if sd < MIN_STD {
                    log::warn!("feature channel {c} is degenerate (std {sd:e}); flooring");
                    MIN_STD
                } else {
                    sd
                }
            })
            .collect();
        StandardizationStats { mean, std }
    }

    /// Short digest identifying these statistics.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn apply(&self, sample: &WindowSample) -> WindowSample {
        let mut out = sample.clone();
        for row in out.x.chunks_exact_mut(NUM_FEATURES) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
        out
    }
}

/// Z-score samples. Without `stats`, statistics are computed from `samples`
/// (which must then be the training split); given stats are never recomputed.
pub fn standardize(
    samples: &[WindowSample],
    stats: Option<&StandardizationStats>,
) -> (Vec<WindowSample>, StandardizationStats) {
    let stats = match stats {
        Some(s) => s.clone(),
        None => StandardizationStats::compute(samples),
    };
    (samples.iter().map(|s| stats.apply(s)).collect(), stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMode {
    BySubject {
        train: Vec<String>,
        val: Vec<String>,
        test: Vec<String>,
    },
    /// Seeded random assignment of the sorted subject ids.
    RandomSubjects {
        n_train: usize,
        n_val: usize,
        n_test: usize,
    },
    /// Final `fraction` of each (subject, video) timeline held out as test,
    /// with train windows ending at least `purge_s` before it.
    ByTime { fraction: f64, purge_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub mode: SplitMode,
    pub seed: u64,
    /// Resolved subject assignment (empty for time splits).
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub descriptor: SplitDescriptor,
}

fn subject_lists(
    samples: &[WindowSample],
    mode: &SplitMode,
    seed: u64,
) -> Result<Option<[Vec<String>; 3]>, DatasetError> {
    let present: BTreeSet<&str> = samples.iter().map(|s| s.subject_id.as_str()).collect();
    match mode {
        SplitMode::BySubject { train, val, test } => {
            let mut seen = BTreeSet::new();
            for id in train.iter().chain(val).chain(test) {
                if !seen.insert(id.as_str()) {
                    return Err(DatasetError::OverlappingSubjectLists(id.clone()));
                }
                if !present.contains(id.as_str()) {
                    return Err(DatasetError::UnknownSubject(id.clone()));
                }
            }
            Ok(Some([train.clone(), val.clone(), test.clone()]))
        }
        SplitMode::RandomSubjects {
            n_train,
            n_val,
            n_test,
        } => {
            if n_train + n_val + n_test > present.len() {
                return Err(DatasetError::BadSplit(format!(
                    "{} subjects requested, {} available",
                    n_train + n_val + n_test,
                    present.len()
                )));
            }
            let mut ids: Vec<String> = present.iter().map(|s| s.to_string()).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let test = ids.split_off(n_train + n_val);
            let val = ids.split_off(*n_train);
            Ok(Some([ids, val, test[..*n_test].to_vec()]))
        }
        SplitMode::ByTime { fraction, purge_s } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(DatasetError::BadSplit(format!("fraction {fraction} not in (0, 1)")));
            }
            if !(*purge_s >= 0.0) {
                return Err(DatasetError::BadSplit(format!("purge {purge_s} < 0")));
            }
            Ok(None)
        }
    }
}

pub fn split_dataset(
    samples: &[WindowSample],
    mode: &SplitMode,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let lists = subject_lists(samples, mode, seed)?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    match (&lists, mode) {
        (Some([tr, va, te]), _) => {
            for s in samples {
                let id = &s.subject_id;
                if tr.contains(id) {
                    train.push(s.clone());
                } else if va.contains(id) {
                    val.push(s.clone());
                } else if te.contains(id) {
                    test.push(s.clone());
                }
            }
            if !va.is_empty() && val.is_empty() {
                return Err(DatasetError::EmptySplit("val"));
            }
            if !te.is_empty() && test.is_empty() {
                return Err(DatasetError::EmptySplit("test"));
            }
        }
        (None, SplitMode::ByTime { fraction, purge_s }) => {
            let mut spans: BTreeMap<(&str, &str), (f64, f64)> = BTreeMap::new();
            for s in samples {
                let e = spans
                    .entry((&s.subject_id, &s.video_id))
                    .or_insert((f64::INFINITY, f64::NEG_INFINITY));
                e.0 = e.0.min(s.t_start);
                e.1 = e.1.max(s.t_end);
            }
            for s in samples {
                let (t0, t1) = spans[&(s.subject_id.as_str(), s.video_id.as_str())];
                let cut = t1 - fraction * (t1 - t0);
                if s.t_start >= cut - 1e-9 {
                    test.push(s.clone());
                } else if s.t_end <= cut - purge_s + 1e-9 {
                    train.push(s.clone());
                }
            }
            if test.is_empty() {
                return Err(DatasetError::EmptySplit("test"));
            }
        }
        _ => unreachable!("subject lists are resolved for every subject mode"),
    }
    if train.is_empty() {
        return Err(DatasetError::EmptySplit("train"));
    }
    let [train_subjects, val_subjects, test_subjects] = lists.unwrap_or_default();
    Ok(DatasetSplit {
        train,
        val,
        test,
        descriptor: SplitDescriptor {
            mode: mode.clone(),
            seed,
            train_subjects,
            val_subjects,
            test_subjects,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub count: usize,
    pub x: String,
    pub y: String,
    pub index: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub endianness: String,
    pub dtype: String,
    pub layout: String,
    pub window_rows: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub window: WindowSpec,
    pub split: SplitDescriptor,
    /// Training-split statistics (the stored blocks are not standardised).
    pub stats: StandardizationStats,
    pub train: SplitFiles,
    pub val: SplitFiles,
    pub test: SplitFiles,
}

fn write_split(dir: &Path, name: &str, samples: &[WindowSample]) -> Result<SplitFiles, DatasetError> {
    let files = SplitFiles {
        count: samples.len(),
        x: format!("{name}_x.f32"),
        y: format!("{name}_y.f32"),
        index: format!("{name}_index.csv"),
    };
    let mut x = BufWriter::new(fs::File::create(dir.join(&files.x))?);
    let mut y = BufWriter::new(fs::File::create(dir.join(&files.y))?);
    let mut idx = BufWriter::new(fs::File::create(dir.join(&files.index))?);
    writeln!(idx, "subject_id,video_id,t_start,t_end")?;
    for s in samples {
        for v in &s.x {
            x.write_all(&v.to_le_bytes())?;
        }
        y.write_all(&s.y.to_le_bytes())?;
        writeln!(idx, "{},{},{},{}", s.subject_id, s.video_id, s.t_start, s.t_end)?;
    }
    x.flush()?;
    y.flush()?;
    idx.flush()?;
    Ok(files)
}

fn read_f32s(path: &Path) -> Result<Vec<f32>, DatasetError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(DatasetError::Io(format!("{} is not a float32 block", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_split(dir: &Path, files: &SplitFiles, rows: usize) -> Result<Vec<WindowSample>, DatasetError> {
    let x = read_f32s(&dir.join(&files.x))?;
    let y = read_f32s(&dir.join(&files.y))?;
    let index = fs::read_to_string(dir.join(&files.index))?;
    let block = rows * NUM_FEATURES;
    if x.len() != files.count * block || y.len() != files.count {
        return Err(DatasetError::Io(format!("{} has the wrong size", files.x)));
    }
    let mut out = Vec::with_capacity(files.count);
    for (i, line) in index.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 || i >= files.count {
            return Err(DatasetError::Io(format!("{}: bad line {}", files.index, i + 2)));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| DatasetError::Io(format!("{}: {e}", files.index)))
        };
        out.push(WindowSample {
            subject_id: f[0].to_string(),
            video_id: f[1].to_string(),
            t_start: num(f[2])?,
            t_end: num(f[3])?,
            x: x[i * block..(i + 1) * block].to_vec(),
            y: y[i],
        });
    }
    if out.len() != files.count {
        return Err(DatasetError::Io(format!("{} has too few rows", files.index)));
    }
    Ok(out)
}

/// Write `manifest.json` plus raw float32 blocks and CSV indices per split.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, window: &WindowSpec) -> Result<DatasetManifest, DatasetError> {
    fs::create_dir_all(dir)?;
    let rows = split.train.first().map(|s| s.rows()).unwrap_or(0);
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        endianness: "little".into(),
        dtype: "float32".into(),
        layout: "x: [count][window_rows][channels] row-major; y: [count]".into(),
        window_rows: rows,
        channels: NUM_FEATURES,
        channel_names: feature_names(),
        window: *window,
        split: split.descriptor.clone(),
        stats: StandardizationStats::compute(&split.train),
        train: write_split(dir, "train", &split.train)?,
        val: write_split(dir, "val", &split.val)?,
        test: write_split(dir, "test", &split.test)?,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DatasetError::Io(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, DatasetSplit), DatasetError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DatasetError::Io(e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION || manifest.endianness != "little" {
        return Err(DatasetError::Io("unsupported dataset format".into()));
    }
    let rows = manifest.window_rows;
    let split = DatasetSplit {
        train: read_split(dir, &manifest.train, rows)?,
        val: read_split(dir, &manifest.val, rows)?,
        test: read_split(dir, &manifest.test, rows)?,
        descriptor: manifest.split.clone(),
    };
    Ok((manifest, split))
}
