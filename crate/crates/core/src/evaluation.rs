//! Per-subject error metrics, model-vs-baseline comparison with paired
//! t-tests, and the feature-suppression study.
//!
//! Every aggregate is a mean over subjects; rows are never pooled across
//! subjects.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::dataset::{feature_names, WindowSample, NUM_FEATURES};
use crate::model::{Batch, ModelArtifact, ModelError, Prediction};

static FEATURE_GROUPS_JSON: &str = include_str!("../data/feature_groups_v1.json");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("subject {subject_id} has {n} rows, need at least 2")]
    TooFewSamples { subject_id: String, n: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("row for subject {0} has no target")]
    MissingTarget(String),
    #[error("model and baseline rows differ: {0}")]
    SubjectMismatch(String),
    #[error("unknown channel: {0}")]
    UnknownChannel(String),
    #[error("bad group map: {0}")]
    BadGroupMap(String),
    #[error("no rows to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub mae: f64,
    /// `None` when the subject's targets have zero variance.
    pub r2: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub subjects: Vec<SubjectMetrics>,
    pub mean_mae: f64,
    pub mean_r2: Option<f64>,
    /// Subjects left out of `mean_r2` for zero target variance.
    pub r2_excluded: usize,
}

/// Groups rows by subject (sorted by id) as `(y, y_hat)` pairs.
fn by_subject(rows: &[Prediction]) -> Result<BTreeMap<&str, Vec<(f64, f64)>>, EvalError> {
    let mut map: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let y = r.y_true.ok_or_else(|| EvalError::MissingTarget(r.subject_id.clone()))?;
        map.entry(r.subject_id.as_str()).or_default().push((y, r.y_pred));
    }
    Ok(map)
}

fn metrics_for(subject_id: &str, mut pairs: Vec<(f64, f64)>) -> Result<SubjectMetrics, EvalError> {
    let n = pairs.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { subject_id: subject_id.to_string(), n });
    }
    // fixed summation order makes the result independent of row order
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let nf = n as f64;
    let mae = pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>() / nf;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let ss_tot: f64 = pairs.iter().map(|(y, _)| (y - mean) * (y - mean)).sum();
    let ss_res: f64 = pairs.iter().map(|(y, p)| (y - p) * (y - p)).sum();
    let constant = pairs.iter().all(|p| p.0 == pairs[0].0);
    let r2 = (!constant && ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(SubjectMetrics { subject_id: subject_id.to_string(), mae, r2, n_samples: n })
}

/// MAE and R² per subject, ordered by subject id. The R² denominator uses
/// the subject's own target mean over the evaluated rows.
pub fn subject_metrics(rows: &[Prediction]) -> Result<Vec<SubjectMetrics>, EvalError> {
    by_subject(rows)?.into_iter().map(|(id, pairs)| metrics_for(id, pairs)).collect()
}

pub fn summarize(subjects: Vec<SubjectMetrics>) -> Result<MetricsSummary, EvalError> {
    if subjects.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean_mae = mean(&subjects.iter().map(|s| s.mae).collect::<Vec<_>>());
    let r2: Vec<f64> = subjects.iter().filter_map(|s| s.r2).collect();
    let r2_excluded = subjects.len() - r2.len();
    let mean_r2 = (!r2.is_empty()).then(|| mean(&r2));
    Ok(MetricsSummary { subjects, mean_mae, mean_r2, r2_excluded })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed.
    pub p: f64,
    pub df: usize,
    /// All differences were identical: `t` is ±inf (or 0 when they are all
    /// zero) and `p` is 0 (or 1).
    pub zero_variance_differences: bool,
}

/// Two-tailed p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_tailed_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { subject_id: "<paired>".into(), n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    if d.iter().all(|&v| v == d[0]) {
        let (t, p) = if d[0] == 0.0 { (0.0, 1.0) } else { (d[0].signum() * f64::INFINITY, 0.0) };
        if d[0] != 0.0 {
            log::warn!("paired t-test: all {n} differences equal {}; reporting t = {t}, p = 0", d[0]);
        }
        return Ok(TTest { t, p, df, zero_variance_differences: true });
    }
    let t = mean(&d) / (sample_sd(&d) / (n as f64).sqrt());
    Ok(TTest { t, p: t_two_tailed_p(t, df as f64), df, zero_variance_differences: false })
}

fn paired_or_none(a: &[f64], b: &[f64]) -> Result<Option<TTest>, EvalError> {
    if a.len() < 2 {
        log::warn!("{} subject(s): no paired t-test", a.len());
        return Ok(None);
    }
    paired_t_test(a, b).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectComparison {
    pub subject_id: String,
    pub n_samples: usize,
    pub model_mae: f64,
    pub baseline_mae: f64,
    pub model_r2: Option<f64>,
    pub baseline_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub subjects: Vec<SubjectComparison>,
    pub model_mae_mean: f64,
    pub model_mae_sd: f64,
    pub baseline_mae_mean: f64,
    pub baseline_mae_sd: f64,
    pub model_r2_mean: Option<f64>,
    pub baseline_r2_mean: Option<f64>,
    pub percent_change: f64,
    /// Model minus baseline; `None` with fewer than two subjects.
    pub test: Option<TTest>,
}

pub fn compare_to_baseline(model: &[Prediction], baseline: &[Prediction]) -> Result<ComparisonReport, EvalError> {
    let m = subject_metrics(model)?;
    let b = subject_metrics(baseline)?;
    let ids = |v: &[SubjectMetrics]| v.iter().map(|s| s.subject_id.clone()).collect::<Vec<_>>();
    if ids(&m) != ids(&b) {
        return Err(EvalError::SubjectMismatch(format!("model subjects {:?}, baseline subjects {:?}", ids(&m), ids(&b))));
    }
    let mut subjects = Vec::with_capacity(m.len());
    for (sm, sb) in m.iter().zip(&b) {
        if sm.n_samples != sb.n_samples {
            return Err(EvalError::SubjectMismatch(format!(
                "subject {}: {} model rows, {} baseline rows",
                sm.subject_id, sm.n_samples, sb.n_samples
            )));
        }
        subjects.push(SubjectComparison {
            subject_id: sm.subject_id.clone(),
            n_samples: sm.n_samples,
            model_mae: sm.mae,
            baseline_mae: sb.mae,
            model_r2: sm.r2,
            baseline_r2: sb.r2,
        });
    }
    let mm: Vec<f64> = subjects.iter().map(|s| s.model_mae).collect();
    let bm: Vec<f64> = subjects.iter().map(|s| s.baseline_mae).collect();
    let test = paired_or_none(&mm, &bm)?;
    let model_summary = summarize(m)?;
    let baseline_summary = summarize(b)?;
    let (model_mae_mean, baseline_mae_mean) = (mean(&mm), mean(&bm));
    Ok(ComparisonReport {
        subjects,
        model_mae_mean,
        model_mae_sd: sample_sd(&mm),
        baseline_mae_mean,
        baseline_mae_sd: sample_sd(&bm),
        model_r2_mean: model_summary.mean_r2,
        baseline_r2_mean: baseline_summary.mean_r2,
        percent_change: (model_mae_mean - baseline_mae_mean) / baseline_mae_mean * 100.0,
        test,
    })
}

/// A named set of feature channel indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGroup {
    pub name: String,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPatterns {
    pub name: String,
    /// Feature names; `*` matches any run of characters.
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMap {
    pub version: u32,
    pub groups: Vec<GroupPatterns>,
}

impl GroupMap {
    pub fn from_json(json: &str) -> Result<Self, EvalError> {
        let map: GroupMap = serde_json::from_str(json).map_err(|e| EvalError::BadGroupMap(e.to_string()))?;
        if map.version != 1 {
            return Err(EvalError::BadGroupMap(format!("unsupported version {}", map.version)));
        }
        Ok(map)
    }

    /// eyes, brows, cheeks, mouth, nose, head.
    pub fn builtin() -> Self {
        Self::from_json(FEATURE_GROUPS_JSON).expect("bundled group map is valid")
    }

    /// Resolves patterns against the feature names. A pattern matching no
    /// channel is an error.
    pub fn resolve(&self) -> Result<Vec<ChannelGroup>, EvalError> {
        let names = feature_names();
        let mut seen = std::collections::BTreeSet::new();
        self.groups
            .iter()
            .map(|g| {
                if g.name == NONE_GROUP || !seen.insert(g.name.as_str()) {
                    return Err(EvalError::BadGroupMap(format!("duplicate or reserved group name {:?}", g.name)));
                }
                let mut channels = Vec::new();
                for p in &g.patterns {
                    let hits: Vec<usize> = (0..names.len()).filter(|&i| glob_match(p, &names[i])).collect();
                    if hits.is_empty() {
                        return Err(EvalError::UnknownChannel(format!("{p} (group {})", g.name)));
                    }
                    channels.extend(hits);
                }
                channels.sort_unstable();
                channels.dedup();
                Ok(ChannelGroup { name: g.name.clone(), channels })
            })
            .collect()
    }
}

fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for part in &parts[1..parts.len() - 1] {
        match rest.find(part) {
            Some(i) => rest = &rest[i + part.len()..],
            None => return false,
        }
    }
    true
}

/// Name of the unsuppressed reference condition.
pub const NONE_GROUP: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSuppression {
    pub subject_id: String,
    pub mae: f64,
    pub percent_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSuppression {
    pub group: String,
    pub channels: Vec<usize>,
    pub subjects: Vec<SubjectSuppression>,
    pub mean_percent_change: f64,
    /// Suppressed MAE minus unsuppressed MAE, paired over subjects; `None`
    /// with fewer than two subjects.
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    /// `none` first, then the groups in the order given.
    pub groups: Vec<GroupSuppression>,
}

impl SuppressionReport {
    pub fn group(&self, name: &str) -> Option<&GroupSuppression> {
        self.groups.iter().find(|g| g.group == name)
    }
}

/// Sets `channels` to zero in every row of a standardized batch.
pub fn suppress_channels(batch: &mut Batch, channels: &[usize]) -> Result<(), EvalError> {
    if let Some(&c) = channels.iter().find(|&&c| c >= NUM_FEATURES) {
        return Err(EvalError::UnknownChannel(format!("index {c}")));
    }
    for row in batch.x.chunks_exact_mut(NUM_FEATURES) {
        for &c in channels {
            row[c] = 0.0;
        }
    }
    Ok(())
}

fn predictions_from(samples: &[WindowSample], y_pred: &[f32]) -> Vec<Prediction> {
    samples
        .iter()
        .zip(y_pred)
        .map(|(s, &p)| Prediction {
            subject_id: s.subject_id.clone(),
            video_id: s.video_id.clone(),
            t_end: s.t_end,
            y_pred: p as f64,
            y_true: Some(s.y as f64),
        })
        .collect()
}

/// Predictions with the given channels replaced by the training mean.
pub fn predict_suppressed(
    artifact: &ModelArtifact,
    samples: &[WindowSample],
    channels: &[usize],
) -> Result<Vec<Prediction>, EvalError> {
    let mut batch = Batch::standardize(samples, &artifact.stats)?;
    suppress_channels(&mut batch, channels)?;
    Ok(predictions_from(samples, &artifact.forward(&batch)?))
}

/// Re-runs the model with each group's channels set to the training mean and
/// reports the per-subject change in MAE against the unsuppressed run.
pub fn suppression_study(
    artifact: &ModelArtifact,
    samples: &[WindowSample],
    groups: &[ChannelGroup],
) -> Result<SuppressionReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    for g in groups {
        if let Some(&c) = g.channels.iter().find(|&&c| c >= NUM_FEATURES) {
            return Err(EvalError::UnknownChannel(format!("index {c} in group {}", g.name)));
        }
    }
    let reference = subject_metrics(&predict_suppressed(artifact, samples, &[])?)?;
    let ref_mae: Vec<f64> = reference.iter().map(|s| s.mae).collect();
    let none = ChannelGroup { name: NONE_GROUP.into(), channels: Vec::new() };
    let mut out = Vec::with_capacity(groups.len() + 1);
    for g in std::iter::once(&none).chain(groups) {
        let metrics = if g.channels.is_empty() {
            reference.clone()
        } else {
            subject_metrics(&predict_suppressed(artifact, samples, &g.channels)?)?
        };
        let subjects: Vec<SubjectSuppression> = metrics
            .iter()
            .zip(&ref_mae)
            .map(|(m, &r)| SubjectSuppression {
                subject_id: m.subject_id.clone(),
                mae: m.mae,
                percent_change: percent_change(m.mae, r),
            })
            .collect();
        let mae: Vec<f64> = subjects.iter().map(|s| s.mae).collect();
        let test = paired_or_none(&mae, &ref_mae)?;
        out.push(GroupSuppression {
            group: g.name.clone(),
            channels: g.channels.clone(),
            mean_percent_change: mean(&subjects.iter().map(|s| s.percent_change).collect::<Vec<_>>()),
            subjects,
            test,
        });
    }
    Ok(SuppressionReport { groups: out })
}

fn percent_change(value: f64, reference: f64) -> f64 {
    if value == reference {
        0.0
    } else {
        (value - reference) / reference * 100.0
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(mut w: W, metrics: &[SubjectMetrics]) -> std::io::Result<()> {
    writeln!(w, "subject_id,n_samples,mae,r2")?;
    for m in metrics {
        writeln!(w, "{},{},{},{}", m.subject_id, m.n_samples, m.mae, opt(m.r2))?;
    }
    Ok(())
}

pub fn write_comparison_csv<W: Write>(mut w: W, report: &ComparisonReport) -> std::io::Result<()> {
    writeln!(w, "subject_id,n_samples,model_mae,baseline_mae,model_r2,baseline_r2")?;
    for s in &report.subjects {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.subject_id,
            s.n_samples,
            s.model_mae,
            s.baseline_mae,
            opt(s.model_r2),
            opt(s.baseline_r2)
        )?;
    }
    Ok(())
}

pub fn write_suppression_csv<W: Write>(mut w: W, report: &SuppressionReport) -> std::io::Result<()> {
    writeln!(w, "group,subject_id,mae,percent_change")?;
    for g in &report.groups {
        for s in &g.subjects {
            writeln!(w, "{},{},{},{}", g.group, s.subject_id, s.mae, s.percent_change)?;
        }
    }
    Ok(())
}

pub fn write_predictions_csv<W: Write>(mut w: W, rows: &[Prediction]) -> std::io::Result<()> {
    writeln!(w, "subject_id,video_id,t_end,y_true,y_pred")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.subject_id, r.video_id, r.t_end, opt(r.y_true), r.y_pred)?;
    }
    Ok(())
}

/// Plot-ready tables: per-subject MAE bars, one suppression panel per
/// group, and per-video prediction traces.
pub fn emit_plot_csvs(
    dir: &Path,
    comparison: Option<&ComparisonReport>,
    suppression: Option<&SuppressionReport>,
    predictions: &[Prediction],
) -> Result<Vec<std::path::PathBuf>, EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut create = |name: String| -> std::io::Result<std::io::BufWriter<std::fs::File>> {
        let path = dir.join(name);
        let f = std::fs::File::create(&path)?;
        written.push(path);
        Ok(std::io::BufWriter::new(f))
    };
    if let Some(c) = comparison {
        let mut w = create("mae_by_subject.csv".into())?;
        writeln!(w, "subject_id,condition,mae")?;
        for s in &c.subjects {
            writeln!(w, "{},model,{}", s.subject_id, s.model_mae)?;
            writeln!(w, "{},baseline,{}", s.subject_id, s.baseline_mae)?;
        }
        w.flush()?;
    }
    if let Some(r) = suppression {
        for g in &r.groups {
            let mut w = create(format!("suppression_{}.csv", g.group))?;
            writeln!(w, "subject_id,percent_change")?;
            for s in &g.subjects {
                writeln!(w, "{},{}", s.subject_id, s.percent_change)?;
            }
            w.flush()?;
        }
    }
    let mut videos: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        videos.entry(p.video_id.as_str()).or_default().push(p);
    }
    for (video, rows) in videos {
        let mut w = create(format!("trace_{video}.csv"))?;
        writeln!(w, "subject_id,t_end,y_true,y_pred")?;
        for r in rows {
            writeln!(w, "{},{},{},{}", r.subject_id, r.t_end, opt(r.y_true), r.y_pred)?;
        }
        w.flush()?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(s: &str, y: f64, p: f64) -> Prediction {
        Prediction { subject_id: s.into(), video_id: "v".into(), t_end: 0.0, y_pred: p, y_true: Some(y) }
    }

    #[test]
    fn half_predictions_on_binary_targets() {
        let m = subject_metrics(&[row("a", 0.0, 0.5), row("a", 1.0, 0.5)]).unwrap();
        assert_eq!(m[0].mae, 0.5);
        assert_eq!(m[0].r2, Some(0.0));
    }

    #[test]
    fn glob_patterns() {
        assert!(glob_match("eye*", "eyeBlinkLeft"));
        assert!(glob_match("*Left", "eyeBlinkLeft"));
        assert!(glob_match("eye*Left", "eyeBlinkLeft"));
        assert!(!glob_match("eye*Right", "eyeBlinkLeft"));
        assert!(glob_match("jawOpen", "jawOpen"));
        assert!(!glob_match("jaw", "jawOpen"));
        assert!(glob_match("*", "x"));
        assert!(!glob_match("ab*ba", "aba"));
    }

    #[test]
    fn builtin_groups_are_disjoint_and_cover_head() {
        let groups = GroupMap::builtin().resolve().unwrap();
        let names: Vec<&str> = groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["eyes", "brows", "cheeks", "mouth", "nose", "head"]);
        let head = groups.iter().find(|g| g.name == "head").unwrap();
        assert_eq!(head.channels, (52..64).collect::<Vec<_>>());
        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.channels.clone()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
