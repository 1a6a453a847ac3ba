//! Anti-aliased resampling onto a uniform low-rate grid, and sliding windows.
//!
//! The resampler evaluates a symmetric Blackman-windowed sinc kernel centred
//! on each output time, so it has zero phase and handles irregular input
//! timestamps. Weights are normalised per output sample, which keeps DC exact
//! (also near edges and gaps) while remaining linear in the input values.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmark_io::GAP_FACTOR;

pub const DEFAULT_OUT_RATE: f64 = 4.0;
pub const DEFAULT_CUTOFF: f64 = 2.0;
/// Kernel half-width in units of `1 / cutoff`.
pub const HALF_WIDTH_CYCLES: f64 = 4.0;
/// Minimum fraction of observed input under the kernel support.
pub const MIN_OBSERVED_FRACTION: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("series too short: {duration_s} s available, {required_s} s required")]
    TooShort { duration_s: f64, required_s: f64 },
    #[error("cutoff {cutoff} Hz must be in (0, {nyquist}] Hz")]
    BadCutoff { cutoff: f64, nyquist: f64 },
    #[error("bad window spec: {0}")]
    BadWindowSpec(String),
    #[error("bad input series: {0}")]
    BadInput(String),
}

/// Samples at arbitrary increasing times, `values` stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularSeries {
    pub times: Vec<f64>,
    pub channels: usize,
    pub values: Vec<f64>,
    /// `false` for samples that were interpolated rather than observed.
    pub observed: Vec<bool>,
    pub nominal_rate: f64,
}

impl IrregularSeries {
    pub fn new(
        times: Vec<f64>,
        channels: usize,
        values: Vec<f64>,
        observed: Vec<bool>,
        nominal_rate: f64,
    ) -> Result<Self, SignalError> {
        if channels == 0 || values.len() != times.len() * channels {
            return Err(SignalError::BadInput(format!(
                "{} values for {} samples x {channels} channels",
                values.len(),
                times.len()
            )));
        }
        if observed.len() != times.len() {
            return Err(SignalError::BadInput("observed mask length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SignalError::BadInput("times must increase".into()));
        }
        if !(nominal_rate > 0.0) {
            return Err(SignalError::BadInput("nominal rate must be positive".into()));
        }
        Ok(IrregularSeries {
            times,
            channels,
            values,
            observed,
            nominal_rate,
        })
    }

    /// Single-channel helper for uniformly sampled, fully observed data.
    pub fn from_uniform(rate: f64, t0: f64, samples: &[f64]) -> Self {
        let times = (0..samples.len()).map(|i| t0 + i as f64 / rate).collect();
        IrregularSeries {
            times,
            channels: 1,
            values: samples.to_vec(),
            observed: vec![true; samples.len()],
            nominal_rate: rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformSeries {
    pub rate: f64,
    pub t0: f64,
    pub channels: usize,
    /// Time-major: `values[k * channels + c]`.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl UniformSeries {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 / self.rate
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.rate
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.channels..(k + 1) * self.channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Rows `start..start + len` as one contiguous time-major block.
    pub fn block(&self, start: usize, len: usize) -> &[f64] {
        &self.values[start * self.channels..(start + len) * self.channels]
    }

    /// Samples `start..start + len` as a new series.
    pub fn slice(&self, start: usize, len: usize) -> UniformSeries {
        UniformSeries {
            rate: self.rate,
            t0: self.time(start),
            channels: self.channels,
            values: self.block(start, len).to_vec(),
            valid: self.valid[start..start + len].to_vec(),
        }
    }

    /// CSV dump: `t,<names...>,valid`.
    pub fn write_csv<W: Write>(&self, names: &[String], mut out: W) -> std::io::Result<()> {
        write!(out, "t")?;
        for n in names {
            write!(out, ",{n}")?;
        }
        writeln!(out, ",valid")?;
        for k in 0..self.len() {
            write!(out, "{}", self.time(k))?;
            for v in self.row(k) {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", self.valid[k] as u8)?;
        }
        out.flush()
    }
}

fn blackman_sinc(tau: f64, cutoff: f64, half_width: f64) -> f64 {
    if tau.abs() >= half_width {
        return 0.0;
    }
    let x = 2.0 * cutoff * tau;
    let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
    let u = tau / half_width;
    let window = 0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos();
    sinc * window
}

/// Low-pass filter `input` at `cutoff` Hz and sample it on the grid
/// `k / out_rate` (anchored at time zero) covering the input span.
pub fn lowpass_resample(
    input: &IrregularSeries,
    out_rate: f64,
    cutoff: f64,
) -> Result<UniformSeries, SignalError> {
    let nyquist = out_rate / 2.0;
    if !(cutoff > 0.0 && cutoff <= nyquist) {
        return Err(SignalError::BadCutoff { cutoff, nyquist });
    }
    let (first, last) = match (input.times.first(), input.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => {
            return Err(SignalError::TooShort {
                duration_s: 0.0,
                required_s: 1.0 / out_rate,
            })
        }
    };
    if last - first < 1.0 / out_rate {
        return Err(SignalError::TooShort {
            duration_s: last - first,
            required_s: 1.0 / out_rate,
        });
    }
    let k_first = (first * out_rate - 1e-9).ceil() as i64;
    let k_last = (last * out_rate + 1e-9).floor() as i64;
    let n_out = (k_last - k_first + 1).max(0) as usize;
    let t0 = k_first as f64 / out_rate;

    let half_width = HALF_WIDTH_CYCLES / cutoff;
    let expected = 2.0 * half_width * input.nominal_rate;
    let max_step = GAP_FACTOR / input.nominal_rate;
    let ch = input.channels;
    let mut values = vec![0.0; n_out * ch];
    let mut valid = vec![false; n_out];
    let mut weights = Vec::new();

    for k in 0..n_out {
        let t = t0 + k as f64 / out_rate;
        let lo = input.times.partition_point(|&s| s < t - half_width);
        let hi = input.times.partition_point(|&s| s <= t + half_width);
        weights.clear();
        weights.extend(
            input.times[lo..hi]
                .iter()
                .map(|&s| blackman_sinc(t - s, cutoff, half_width)),
        );
        let total: f64 = weights.iter().sum();
        let out = &mut values[k * ch..(k + 1) * ch];
        if total.abs() < 1e-12 {
            continue;
        }
        // filter deviations from the first sample so constants pass through exactly
        let base = &input.values[lo * ch..(lo + 1) * ch];
        for (w, i) in weights.iter().zip(lo..hi) {
            let w = w / total;
            for ((o, x), b) in out.iter_mut().zip(&input.values[i * ch..(i + 1) * ch]).zip(base) {
                *o += w * (x - b);
            }
        }
        for (o, b) in out.iter_mut().zip(base) {
            *o += b;
        }
        let observed = input.observed[lo..hi].iter().filter(|&&b| b).count() as f64;
        // inside an unfilled gap there is no data at the output time itself
        let next = input.times.partition_point(|&s| s < t);
        let in_gap = next > 0
            && next < input.times.len()
            && input.times[next] - input.times[next - 1] > max_step
            && input.times[next] != t;
        valid[k] = observed / expected >= MIN_OBSERVED_FRACTION && !in_gap;
    }
    Ok(UniformSeries {
        rate: out_rate,
        t0,
        channels: ch,
        values,
        valid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length_s: f64,
    pub step_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            length_s: 10.0,
            step_s: 1.0,
        }
    }
}

fn whole_samples(seconds: f64, rate: f64, what: &str) -> Result<usize, SignalError> {
    let n = seconds * rate;
    let r = n.round();
    if !(seconds > 0.0) || r < 1.0 || (n - r).abs() > 1e-9 {
        return Err(SignalError::BadWindowSpec(format!(
            "{what} {seconds} s is not a positive whole number of samples at {rate} Hz"
        )));
    }
    Ok(r as usize)
}

impl WindowSpec {
    /// Window length and step in samples at `rate`.
    pub fn samples(&self, rate: f64) -> Result<(usize, usize), SignalError> {
        Ok((
            whole_samples(self.length_s, rate, "window length")?,
            whole_samples(self.step_s, rate, "window step")?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub index: usize,
    pub start_sample: usize,
    pub len: usize,
    pub start_t: f64,
    /// Exclusive end of the covered interval; the window's timestamp.
    pub end_t: f64,
    pub valid: bool,
}

/// Window `k` starts at sample `k * step` (exact integer arithmetic).
pub fn sliding_windows(series: &UniformSeries, spec: &WindowSpec) -> Result<Vec<Window>, SignalError> {
    let (len, step) = spec.samples(series.rate)?;
    let n = series.len();
    if n < len {
        return Err(SignalError::TooShort {
            duration_s: series.duration(),
            required_s: spec.length_s,
        });
    }
    let count = (n - len) / step + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * step;
            Window {
                index: k,
                start_sample: start,
                len,
                start_t: series.time(start),
                end_t: series.time(start + len),
                valid: series.valid[start..start + len].iter().all(|&v| v),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(rate: f64, dur: f64, f: impl Fn(f64) -> f64) -> IrregularSeries {
        let n = (dur * rate).round() as usize;
        let xs: Vec<f64> = (0..n).map(|i| f(i as f64 / rate)).collect();
        IrregularSeries::from_uniform(rate, 0.0, &xs)
    }

    fn series_of_len(n: usize) -> UniformSeries {
        UniformSeries {
            rate: 4.0,
            t0: 0.0,
            channels: 2,
            values: vec![0.0; 2 * n],
            valid: vec![true; n],
        }
    }

    #[test]
    fn dc_is_exact() {
        let out = lowpass_resample(&uniform(60.0, 30.0, |_| 1.0), 4.0, 2.0).unwrap();
        assert!(out.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(out.valid.iter().all(|&v| v));
        assert_eq!(out.t0, 0.0);
        assert_eq!(out.len(), 120);
    }

    #[test]
    fn rejects_bad_cutoff_and_short_input() {
        let s = uniform(60.0, 10.0, |_| 1.0);
        assert!(matches!(lowpass_resample(&s, 4.0, 2.5), Err(SignalError::BadCutoff { .. })));
        assert!(matches!(lowpass_resample(&s, 4.0, 0.0), Err(SignalError::BadCutoff { .. })));
        let short = uniform(60.0, 0.1, |_| 1.0);
        assert!(matches!(lowpass_resample(&short, 4.0, 2.0), Err(SignalError::TooShort { .. })));
    }

    #[test]
    fn grid_is_anchored_at_zero() {
        let xs = vec![0.0; 600];
        let s = IrregularSeries::from_uniform(60.0, 0.1, &xs);
        let out = lowpass_resample(&s, 4.0, 2.0).unwrap();
        assert_eq!(out.t0, 0.25);
    }

    #[test]
    fn long_gap_invalidates_samples_inside() {
        let rate = 60.0;
        let times: Vec<f64> = (0..1800)
            .map(|i| i as f64 / rate)
            .filter(|&t| !(10.0..14.0).contains(&t))
            .collect();
        let n = times.len();
        let s = IrregularSeries::new(times, 1, vec![1.0; n], vec![true; n], rate).unwrap();
        let out = lowpass_resample(&s, 4.0, 2.0).unwrap();
        for k in 0..out.len() {
            let t = out.time(k);
            if (10.0..14.0).contains(&t) {
                assert!(!out.valid[k], "t = {t}");
            }
            if !(7.0..17.0).contains(&t) {
                assert!(out.valid[k], "t = {t}");
            }
        }
    }

    #[test]
    fn interpolated_input_counts_as_unobserved() {
        let xs = vec![0.5; 1200];
        let mut s = IrregularSeries::from_uniform(60.0, 0.0, &xs);
        for o in &mut s.observed[300..700] {
            *o = false;
        }
        let out = lowpass_resample(&s, 4.0, 2.0).unwrap();
        // t = 8.33 s is the middle of the interpolated run
        assert!(!out.valid[33]);
        assert!(out.valid[4]);
    }

    #[test]
    fn sixty_seconds_gives_51_windows() {
        let w = sliding_windows(&series_of_len(240), &WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 51);
        assert_eq!(w[0].len, 40);
        assert_eq!(w[50].start_sample, 200);
        assert_eq!(w[0].end_t, 10.0);
    }

    #[test]
    fn ten_seconds_gives_one_window() {
        assert_eq!(sliding_windows(&series_of_len(40), &WindowSpec::default()).unwrap().len(), 1);
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(matches!(
            sliding_windows(&series_of_len(38), &WindowSpec::default()),
            Err(SignalError::TooShort { .. })
        ));
    }

    #[test]
    fn invalid_sample_flags_window() {
        let mut s = series_of_len(48);
        s.valid[41] = false;
        let w = sliding_windows(&s, &WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w[0].valid);
        assert!(!w[1].valid);
        assert!(!w[2].valid);
    }

    #[test]
    fn window_spec_must_be_whole_samples() {
        let spec = WindowSpec {
            length_s: 10.1,
            step_s: 1.0,
        };
        assert!(spec.samples(4.0).is_err());
        assert!(WindowSpec { length_s: 10.0, step_s: 0.0 }.samples(4.0).is_err());
    }

    #[test]
    fn no_drift_over_an_hour() {
        let s = series_of_len(4 * 3600);
        let w = sliding_windows(&s, &WindowSpec::default()).unwrap();
        assert_eq!(w.len(), 3591);
        for win in &w {
            assert_eq!(win.start_sample, win.index * 4);
        }
        assert_eq!(w.last().unwrap().end_t, 3600.0);
    }
}
