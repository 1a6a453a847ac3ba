//! Time-resolved inter-subject correlation (ISC) of iris movements.
//!
//! For every window and channel, all pairwise Pearson correlations between
//! subjects are computed and negative values are clamped to zero. A
//! subject's ISC is the mean clamped correlation with every other subject,
//! averaged over channels. Reduction order is fixed (channel-major, then
//! partner index), so results do not depend on scheduling.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{sliding_windows, SignalError, UniformSeries, WindowSpec};

/// Windows with variance below this have zero correlation with everything.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IscError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("subject series are not on a common time grid: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Pearson correlation; 0 when either input has (population) variance
/// below [`MIN_VARIANCE`].
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, IscError> {
    if a.len() != b.len() {
        return Err(IscError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(IscError::TooFewSamples(n));
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / nf < MIN_VARIANCE || sbb / nf < MIN_VARIANCE {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-subject ISC for one window. Each block is `n x channels`, time-major.
pub fn window_isc(blocks: &[&[f64]], channels: usize) -> Result<Vec<f64>, IscError> {
    let m = blocks.len();
    if m < 2 {
        return Err(IscError::TooFewSubjects(m));
    }
    if channels == 0 {
        return Err(IscError::ShapeMismatch("zero channels".into()));
    }
    let len = blocks[0].len();
    if len % channels != 0 || blocks.iter().any(|b| b.len() != len) {
        return Err(IscError::ShapeMismatch(format!(
            "blocks must all be n x {channels}"
        )));
    }
    let n = len / channels;
    if n < 2 {
        return Err(IscError::TooFewSamples(n));
    }
    let nf = n as f64;

    // centred columns with their sums of squares (or None when degenerate)
    let mut cols: Vec<Option<(Vec<f64>, f64)>> = Vec::with_capacity(m);
    let mut isc = vec![0.0; m];
    let mut column = vec![0.0; n];
    for c in 0..channels {
        cols.clear();
        for block in blocks {
            for (t, v) in column.iter_mut().enumerate() {
                *v = block[t * channels + c];
            }
            let mean = column.iter().sum::<f64>() / nf;
            let centred: Vec<f64> = column.iter().map(|v| v - mean).collect();
            let ss: f64 = centred.iter().map(|v| v * v).sum();
            cols.push(if ss / nf < MIN_VARIANCE { None } else { Some((centred, ss)) });
        }
        let mut sums = vec![0.0; m];
        for i in 0..m {
            for j in i + 1..m {
                let r = match (&cols[i], &cols[j]) {
                    // sqrt(ss * ss) == ss, so identical columns give exactly 1
                    (Some((a, saa)), Some((b, sbb))) => {
                        let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
                    }
                    _ => 0.0,
                };
                let r = r.max(0.0);
                sums[i] += r;
                sums[j] += r;
            }
        }
        for (acc, s) in isc.iter_mut().zip(&sums) {
            *acc += s / (m - 1) as f64;
        }
    }
    Ok(isc.into_iter().map(|v| (v / channels as f64).clamp(0.0, 1.0)).collect())
}

/// Iris series of every subject who watched one video.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub video_id: String,
    pub subjects: Vec<(String, UniformSeries)>,
}

impl Cohort {
    /// Validate and crop all series to their common span on a shared grid.
    pub fn new(video_id: &str, subjects: Vec<(String, UniformSeries)>) -> Result<Self, IscError> {
        if subjects.len() < 2 {
            return Err(IscError::TooFewSubjects(subjects.len()));
        }
        let (rate, channels) = (subjects[0].1.rate, subjects[0].1.channels);
        let mut start_t = f64::NEG_INFINITY;
        let mut end_t = f64::INFINITY;
        for (id, s) in &subjects {
            if s.rate != rate {
                return Err(IscError::GridMismatch(format!("{id}: rate {} vs {rate}", s.rate)));
            }
            if s.channels != channels {
                return Err(IscError::ShapeMismatch(format!(
                    "{id}: {} channels vs {channels}",
                    s.channels
                )));
            }
            let offset = (s.t0 - subjects[0].1.t0) * rate;
            if (offset - offset.round()).abs() > 1e-6 {
                return Err(IscError::GridMismatch(format!("{id}: t0 {} off grid", s.t0)));
            }
            start_t = start_t.max(s.t0);
            end_t = end_t.min(s.time(s.len()));
        }
        let n = ((end_t - start_t) * rate).round().max(0.0) as usize;
        let cropped = subjects
            .into_iter()
            .map(|(id, s)| {
                let start = ((start_t - s.t0) * rate).round() as usize;
                (id, s.slice(start, n))
            })
            .collect();
        Ok(Cohort {
            video_id: video_id.to_string(),
            subjects: cropped,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IscTrace {
    pub subject_id: String,
    pub video_id: String,
    /// Window end times.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl IscTrace {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

pub fn time_resolved_isc(cohort: &Cohort, spec: &WindowSpec) -> Result<Vec<IscTrace>, IscError> {
    let m = cohort.subjects.len();
    if m < 2 {
        return Err(IscError::TooFewSubjects(m));
    }
    let reference = &cohort.subjects[0].1;
    let windows = sliding_windows(reference, spec)?;
    let per_subject_windows: Vec<_> = cohort
        .subjects
        .iter()
        .map(|(_, s)| sliding_windows(s, spec))
        .collect::<Result<_, _>>()?;
    if per_subject_windows.iter().any(|w| w.len() != windows.len()) {
        return Err(IscError::ShapeMismatch("subjects have different lengths".into()));
    }
    let channels = reference.channels;
    let mut traces: Vec<IscTrace> = cohort
        .subjects
        .iter()
        .map(|(id, _)| IscTrace {
            subject_id: id.clone(),
            video_id: cohort.video_id.clone(),
            times: Vec::with_capacity(windows.len()),
            values: Vec::with_capacity(windows.len()),
            valid: Vec::with_capacity(windows.len()),
        })
        .collect();
    for (k, w) in windows.iter().enumerate() {
        let blocks: Vec<&[f64]> = cohort
            .subjects
            .iter()
            .map(|(_, s)| s.block(w.start_sample, w.len))
            .collect();
        let isc = window_isc(&blocks, channels)?;
        let valid = per_subject_windows.iter().all(|ws| ws[k].valid);
        for (trace, v) in traces.iter_mut().zip(isc) {
            trace.times.push(w.end_t);
            trace.values.push(v);
            trace.valid.push(valid);
        }
    }
    Ok(traces)
}

/// CSV with header `subject_id,t,isc,valid`.
pub fn write_traces_csv<W: Write>(traces: &[IscTrace], mut out: W) -> std::io::Result<()> {
    writeln!(out, "subject_id,t,isc,valid")?;
    for tr in traces {
        for ((t, v), ok) in tr.times.iter().zip(&tr.values).zip(&tr.valid) {
            writeln!(out, "{},{},{},{}", tr.subject_id, t, v, *ok as u8)?;
        }
    }
    out.flush()
}

/// Parse the CSV written by [`write_traces_csv`].
pub fn read_traces_csv(text: &str, video_id: &str) -> Result<Vec<IscTrace>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some("subject_id,t,isc,valid") => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let mut traces: Vec<IscTrace> = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(format!("line {}: expected 4 fields", i + 2));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
        let (t, v) = (parse(f[1])?, parse(f[2])?);
        let valid = f[3] == "1";
        match traces.last_mut() {
            Some(tr) if tr.subject_id == f[0] => {
                tr.times.push(t);
                tr.values.push(v);
                tr.valid.push(valid);
            }
            _ => traces.push(IscTrace {
                subject_id: f[0].to_string(),
                video_id: video_id.to_string(),
                times: vec![t],
                values: vec![v],
                valid: vec![valid],
            }),
        }
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // mean-centred: (-4/3, -1/3, 5/3) and (0, -1, 1): r = 2 / sqrt(14/3 * 2)
        let expected = 2.0 / (14.0f64 / 3.0 * 2.0).sqrt();
        let r = pearson(&[1.0, 2.0, 4.0], &[2.0, 1.0, 3.0]).unwrap();
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.6547).abs() < 1e-4);
    }

    #[test]
    fn pearson_errors_and_degenerate() {
        assert_eq!(pearson(&[1.0, 2.0], &[1.0]), Err(IscError::LengthMismatch(2, 1)));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(IscError::TooFewSamples(1)));
        assert_eq!(pearson(&[2.0, 2.0, 2.0], &[1.0, 5.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn identical_windows_give_one() {
        let w: Vec<f64> = (0..40).flat_map(|t| [(t as f64).sin(), (t as f64 * 0.3).cos()]).collect();
        let isc = window_isc(&[&w, &w, &w], 2).unwrap();
        for v in isc {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_pairs_are_clamped() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let c = [4.0, 3.0, 2.0, 1.0];
        // r(1,2) = 1, r(1,3) = r(2,3) = -1
        let isc = window_isc(&[&a, &a, &c], 1).unwrap();
        assert_eq!(isc, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn constant_subject_gets_zero() {
        let a = [1.0, 2.0, 4.0, 3.0];
        let flat = [2.0; 4];
        let isc = window_isc(&[&a, &a, &flat], 1).unwrap();
        assert_eq!(isc[2], 0.0);
        assert!((isc[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn window_isc_errors() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(window_isc(&[&a], 1), Err(IscError::TooFewSubjects(1)));
        assert!(matches!(window_isc(&[&a, &a[..3]], 1), Err(IscError::ShapeMismatch(_))));
    }

    fn series(values: Vec<f64>, t0: f64) -> UniformSeries {
        let n = values.len();
        UniformSeries {
            rate: 4.0,
            t0,
            channels: 1,
            values,
            valid: vec![true; n],
        }
    }

    #[test]
    fn cohort_crops_to_common_span() {
        let a = series((0..240).map(|i| (i as f64 * 0.1).sin()).collect(), 0.0);
        let b = series((0..240).map(|i| (i as f64 * 0.1).cos()).collect(), 0.5);
        let c = Cohort::new("v", vec![("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(c.subjects[0].1.t0, 0.5);
        assert_eq!(c.subjects[0].1.len(), 238);
        assert_eq!(c.subjects[1].1.len(), 238);
    }

    #[test]
    fn cohort_rejects_off_grid_and_single_subject() {
        let a = series(vec![0.0; 80], 0.0);
        let b = series(vec![0.0; 80], 0.1);
        assert!(matches!(
            Cohort::new("v", vec![("a".into(), a.clone()), ("b".into(), b)]),
            Err(IscError::GridMismatch(_))
        ));
        assert!(matches!(
            Cohort::new("v", vec![("a".into(), a)]),
            Err(IscError::TooFewSubjects(1))
        ));
    }

    #[test]
    fn trace_length_and_invalid_propagation() {
        let a = series((0..240).map(|i| (i as f64 * 0.37).sin()).collect(), 0.0);
        let mut b = series((0..240).map(|i| (i as f64 * 0.21).sin()).collect(), 0.0);
        b.valid[100] = false;
        let cohort = Cohort::new("v", vec![("a".into(), a), ("b".into(), b)]).unwrap();
        let traces = time_resolved_isc(&cohort, &WindowSpec::default()).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].times.len(), 51);
        assert_eq!(traces[0].times[0], 10.0);
        // sample 100 lies in windows starting at samples 64..=100 -> k = 16..=25
        for k in 0..51 {
            assert_eq!(traces[0].valid[k], !(16..=25).contains(&k), "k = {k}");
            assert_eq!(traces[0].values[k], traces[1].values[k]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let tr = IscTrace {
            subject_id: "s1".into(),
            video_id: "v".into(),
            times: vec![10.0, 11.0],
            values: vec![0.25, 0.125],
            valid: vec![true, false],
        };
        let mut buf = Vec::new();
        write_traces_csv(std::slice::from_ref(&tr), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("subject_id,t,isc,valid\ns1,10,0.25,1\n"));
        assert_eq!(read_traces_csv(&text, "v").unwrap(), vec![tr]);
    }
}
