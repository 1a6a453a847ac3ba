//! Stream-to-dataset glue shared by the command line and the end-to-end
//! tests, plus a crate-wide error with module-qualified codes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{align_stream, AlignmentError, CanonicalFaceModel};
use crate::dataset::{
    assemble_features, assemble_iris, build_dataset, split_dataset, BuildReport, DatasetError, DatasetSplit, FeatureSeries,
    ResampleSettings, SplitMode, WindowSample,
};
use crate::evaluation::{compare_to_baseline, suppression_study, ChannelGroup, ComparisonReport, EvalError, SuppressionReport};
use crate::isc::{time_resolved_isc, Cohort, IscError, IscTrace};
use crate::landmark_io::{fill_gaps, validate_stream, FrameStream, LandmarkIoError, StreamReport};
use crate::model::{baseline_mean, predict, train_with_progress, EpochLoss, ModelArtifact, ModelConfig, ModelError, Prediction, TrainConfig};
use crate::signal::{SignalError, UniformSeries, WindowSpec};
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    LandmarkIo(#[from] LandmarkIoError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Isc(#[from] IscError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Variant name from a `Debug` rendering: `TooFewSubjects(1)` -> `TooFewSubjects`.
fn variant<E: std::fmt::Debug>(e: &E) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or_default().to_string()
}

impl Error {
    /// `module.Variant`, e.g. `isc.TooFewSubjects`.
    pub fn code(&self) -> String {
        let (module, v) = match self {
            Error::LandmarkIo(e) => ("landmark_io", variant(e)),
            Error::Alignment(e) => ("alignment", variant(e)),
            Error::Signal(e) => ("signal", variant(e)),
            Error::Isc(IscError::Signal(e)) => ("signal", variant(e)),
            Error::Isc(e) => ("isc", variant(e)),
            Error::Dataset(DatasetError::Signal(e)) => ("signal", variant(e)),
            Error::Dataset(e) => ("dataset", variant(e)),
            Error::Model(e) => ("model", variant(e)),
            Error::Evaluation(EvalError::Model(e)) => ("model", variant(e)),
            Error::Evaluation(e) => ("evaluation", variant(e)),
            Error::Synth(e) => ("synth", variant(e)),
            Error::Config(_) => ("cli", "BadConfig".to_string()),
            Error::Io(_) => ("cli", "Io".to_string()),
        };
        format!("{module}.{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub max_gap_s: f64,
    pub resample: ResampleSettings,
}

impl Default for StreamSettings {
    fn default() -> Self {
        StreamSettings { max_gap_s: crate::landmark_io::DEFAULT_MAX_GAP_S, resample: ResampleSettings::default() }
    }
}

/// Everything downstream steps need from one recording.
#[derive(Debug, Clone)]
pub struct ProcessedStream {
    pub report: StreamReport,
    pub features: FeatureSeries,
    pub iris: UniformSeries,
}

/// Gap filling, alignment, and resampling of predictors and iris traces.
pub fn process_stream(
    stream: &FrameStream,
    model: &CanonicalFaceModel,
    settings: &StreamSettings,
) -> Result<ProcessedStream, Error> {
    let report = validate_stream(stream);
    let filled = fill_gaps(stream, settings.max_gap_s)?;
    let aligned = align_stream(&filled, model)?;
    let features = assemble_features(&aligned, &stream.subject_id, &stream.video_id, stream.nominal_rate, &settings.resample)?;
    let iris = assemble_iris(&aligned, &model.iris_ids, stream.nominal_rate, &settings.resample)?;
    Ok(ProcessedStream { report, features, iris })
}

/// ISC traces for every video, videos and subjects in id order.
pub fn cohort_traces(streams: &[ProcessedStream], spec: &WindowSpec) -> Result<Vec<IscTrace>, Error> {
    let mut by_video: BTreeMap<&str, Vec<(String, UniformSeries)>> = BTreeMap::new();
    for p in streams {
        by_video
            .entry(p.features.video_id.as_str())
            .or_default()
            .push((p.features.subject_id.clone(), p.iris.clone()));
    }
    let mut traces = Vec::new();
    for (video, mut subjects) in by_video {
        subjects.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = subjects.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Config(format!("subject {} appears twice for video {video}", w[0].0)));
        }
        traces.extend(time_resolved_isc(&Cohort::new(video, subjects)?, spec)?);
    }
    Ok(traces)
}

/// Traces plus labelled windows for a set of processed streams.
pub fn labelled_windows(
    streams: &[ProcessedStream],
    spec: &WindowSpec,
) -> Result<(Vec<IscTrace>, Vec<WindowSample>, BuildReport), Error> {
    let traces = cohort_traces(streams, spec)?;
    let features: Vec<FeatureSeries> = streams.iter().map(|p| p.features.clone()).collect();
    let (samples, report) = build_dataset(&features, &traces, spec)?;
    Ok((traces, samples, report))
}

/// Model and naive-mean baseline predictions on one evaluation set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: Vec<Prediction>,
    pub baseline: Vec<Prediction>,
    pub comparison: ComparisonReport,
}

/// Scores `artifact` against the training-mean baseline. With `clamp01`,
/// model outputs are clipped to the ISC range first.
pub fn evaluate(
    artifact: &ModelArtifact,
    train_targets: &[f32],
    samples: &[WindowSample],
    clamp01: bool,
) -> Result<Evaluation, Error> {
    let mut model = predict(artifact, samples)?;
    if clamp01 {
        for p in &mut model {
            p.y_pred = p.y_pred.clamp(0.0, 1.0);
        }
    }
    let baseline = baseline_mean(train_targets)?.predict(samples);
    let comparison = compare_to_baseline(&model, &baseline)?;
    Ok(Evaluation { model, baseline, comparison })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub window: WindowSpec,
    pub stream: StreamSettings,
    pub split: SplitMode,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub clamp01: bool,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub reports: Vec<(String, String, StreamReport)>,
    pub traces: Vec<IscTrace>,
    pub build: BuildReport,
    pub split: DatasetSplit,
    pub artifact: ModelArtifact,
    /// On the test split.
    pub evaluation: Evaluation,
    /// On the test split; `None` when no groups were given.
    pub suppression: Option<SuppressionReport>,
}

/// Streams to evaluated model: process each stream as it arrives, compute
/// ISC targets, window, split by subject, train, then score the test split
/// against the baseline and run the suppression study.
pub fn run_experiment<I>(
    streams: I,
    model: &CanonicalFaceModel,
    config: &ExperimentConfig,
    groups: &[ChannelGroup],
    on_epoch: impl FnMut(&EpochLoss),
) -> Result<Experiment, Error>
where
    I: IntoIterator<Item = Result<FrameStream, Error>>,
{
    let mut processed = Vec::new();
    for stream in streams {
        let stream = stream?;
        processed.push(process_stream(&stream, model, &config.stream)?);
    }
    let reports = processed
        .iter()
        .map(|p| (p.features.subject_id.clone(), p.features.video_id.clone(), p.report.clone()))
        .collect();
    let (traces, samples, build) = labelled_windows(&processed, &config.window)?;
    drop(processed);
    let split = split_dataset(&samples, &config.split, config.split_seed)?;
    drop(samples);
    if split.test.is_empty() {
        return Err(Error::Config("the split has no test subjects".into()));
    }
    let artifact = train_with_progress(&split, &config.model, &config.train, on_epoch)?;
    let targets: Vec<f32> = split.train.iter().map(|s| s.y).collect();
    let evaluation = evaluate(&artifact, &targets, &split.test, config.clamp01)?;
    let suppression = if groups.is_empty() { None } else { Some(suppression_study(&artifact, &split.test, groups)?) };
    Ok(Experiment { reports, traces, build, split, artifact, evaluation, suppression })
}
