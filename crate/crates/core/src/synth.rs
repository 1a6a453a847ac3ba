//! Seeded synthetic cohorts with planted attention structure.
//!
//! Every subject watching a video shares a latent gaze signal (a sum of
//! sinusoids in a low band). While attentive, a subject's gaze follows
//! `coupling * latent + noise`; while distracted it is independent white
//! noise of the same variance, optionally with a gaze offset or a head turn.
//! Frames are written in tracker coordinates (x right, y down, unit image),
//! so they pass through alignment like real recordings.
//!
//! Streams are generated lazily and independently: each one draws from its
//! own ChaCha stream derived from `(seed, subject, video)`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::CanonicalFaceModel;
use crate::landmark_io::{blendshape_names, stream_file_name, write_frame_stream, FrameRecord, FrameStream};

/// Canonical cm to image units.
const FACE_SCALE: f64 = 0.02;
/// Canonical-space gaze excursion (cm) of a unit-variance gaze signal.
const GAZE_CM: f64 = 0.25;
/// Gaze (cm) at which an eyeLook blendshape saturates.
const EYE_LOOK_FULL_CM: f64 = 0.75;
const EYES_OFF_CM: f64 = 1.0;
const LOOK_AWAY_YAW_DEG: (f64, f64) = (20.0, 30.0);
const TRANSITION_S: f64 = 1.0;
const LANDMARK_JITTER: f64 = 1e-4;
const LANDMARK_QUANTUM: f64 = 1e-5;
const BLENDSHAPE_QUANTUM: f64 = 1e-6;
const BLINK_S: f64 = 0.25;

pub const SIGNAL_GROUPS: [&str; 6] = ["eyes", "brows", "cheeks", "mouth", "nose", "head"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    BadConfig(String),
    #[error("no subject {0} / video {1} in this cohort")]
    UnknownStream(usize, usize),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub components: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        LatentSpec { low_hz: 0.05, high_hz: 1.0, components: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    AllAttentive,
    AllDistracted,
    /// Alternating episodes. Each subject-video draws its attentive fraction
    /// uniformly from `attentive_fraction`; episode lengths are
    /// `min_episode_s` plus an exponential tail.
    Mixed { attentive_fraction: (f64, f64), mean_distracted_s: f64, min_episode_s: f64 },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Mixed { attentive_fraction: (0.45, 0.8), mean_distracted_s: 20.0, min_episode_s: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_videos: usize,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub latent: LatentSpec,
    pub coupling: f64,
    pub noise_sd: f64,
    /// Feature groups whose values depend on attention; the rest are
    /// independent of it.
    pub informative_groups: Vec<String>,
    pub schedule: ScheduleSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 6,
            n_videos: 1,
            duration_s: 180.0,
            frame_rate: 30.0,
            latent: LatentSpec::default(),
            coupling: 1.0,
            noise_sd: 0.1,
            informative_groups: vec!["eyes".into(), "head".into()],
            schedule: ScheduleSpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if self.n_subjects < 3 {
            return bad(format!("need at least 3 subjects, got {}", self.n_subjects));
        }
        if self.n_videos == 0 {
            return bad("need at least one video".into());
        }
        if !(self.duration_s >= 30.0) {
            return bad(format!("duration must be at least 30 s, got {}", self.duration_s));
        }
        if !(self.frame_rate >= 4.0 && self.frame_rate <= 240.0) {
            return bad(format!("frame rate {} outside [4, 240]", self.frame_rate));
        }
        let l = &self.latent;
        if !(l.low_hz > 0.0 && l.low_hz < l.high_hz && l.high_hz < self.frame_rate / 2.0) || l.components == 0 {
            return bad(format!("bad latent band {}..{} Hz x {}", l.low_hz, l.high_hz, l.components));
        }
        if !(self.coupling.is_finite() && self.coupling >= 0.0) {
            return bad(format!("coupling must be >= 0, got {}", self.coupling));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad(format!("noise sd must be >= 0, got {}", self.noise_sd));
        }
        if self.coupling == 0.0 && self.noise_sd == 0.0 {
            return bad("coupling and noise sd are both 0: gaze would be constant".into());
        }
        for g in &self.informative_groups {
            if !SIGNAL_GROUPS.contains(&g.as_str()) {
                return bad(format!("unknown feature group {g:?}"));
            }
        }
        if let ScheduleSpec::Mixed { attentive_fraction: (lo, hi), mean_distracted_s, min_episode_s } = self.schedule {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return bad(format!("attentive fraction range ({lo}, {hi}) must lie in (0, 1)"));
            }
            if !(mean_distracted_s > 0.0 && min_episode_s >= 0.0) {
                return bad("episode lengths must be positive".into());
            }
        }
        Ok(())
    }

    fn informative(&self, group: &str) -> bool {
        self.informative_groups.iter().any(|g| g == group)
    }

    pub fn subject_id(&self, s: usize) -> String {
        format!("s{:02}", s + 1)
    }

    pub fn video_id(&self, v: usize) -> String {
        format!("v{}", v + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distraction {
    /// Head turned away; gaze relative to the head is noise.
    LookAway,
    /// Head steady; gaze displaced and noisy.
    EyesOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub start_s: f64,
    pub end_s: f64,
    pub attentive: bool,
    pub distraction: Option<Distraction>,
    /// Head yaw/pitch (degrees) or gaze offset (cm) of a distraction.
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTruth {
    pub subject_id: String,
    pub video_id: String,
    pub episodes: Vec<Episode>,
}

impl StreamTruth {
    /// Fraction of `[t0, t1]` spent attentive.
    pub fn attentive_fraction(&self, t0: f64, t1: f64) -> f64 {
        let covered: f64 = self
            .episodes
            .iter()
            .filter(|e| e.attentive)
            .map(|e| (e.end_s.min(t1) - e.start_s.max(t0)).max(0.0))
            .sum();
        covered / (t1 - t0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub streams: Vec<StreamTruth>,
}

/// Sum of unit-amplitude sinusoids, scaled to unit variance.
#[derive(Debug, Clone)]
struct Latent {
    freqs: Vec<f64>,
    phases: Vec<f64>,
    scale: f64,
}

impl Latent {
    fn draw(spec: &LatentSpec, rng: &mut ChaCha8Rng) -> Self {
        let freqs = (0..spec.components).map(|_| rng.gen_range(spec.low_hz..spec.high_hz)).collect();
        let phases = (0..spec.components).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Latent { freqs, phases, scale: (2.0 / spec.components as f64).sqrt() }
    }

    fn at(&self, t: f64) -> f64 {
        self.freqs.iter().zip(&self.phases).map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() * self.scale
    }
}

#[derive(Debug, Clone, Copy)]
enum Tag {
    Latent = 1,
    Schedule = 2,
    Frames = 3,
    Subject = 4,
}

fn rng_for(seed: u64, tag: Tag, a: usize, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 48) | ((a as u64 & 0xFFFFFF) << 24) | (b as u64 & 0xFFFFFF));
    rng
}

/// A cohort whose streams are generated on demand.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    config: SynthConfig,
    model: CanonicalFaceModel,
    names: Vec<String>,
    /// Per video: x and y latent.
    latents: Vec<[Latent; 2]>,
    truth: Vec<StreamTruth>,
}

impl SyntheticCohort {
    pub fn new(config: SynthConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let latents = (0..config.n_videos)
            .map(|v| {
                let mut rng = rng_for(config.seed, Tag::Latent, v, 0);
                [Latent::draw(&config.latent, &mut rng), Latent::draw(&config.latent, &mut rng)]
            })
            .collect();
        let mut truth = Vec::with_capacity(config.n_subjects * config.n_videos);
        for s in 0..config.n_subjects {
            for v in 0..config.n_videos {
                truth.push(StreamTruth {
                    subject_id: config.subject_id(s),
                    video_id: config.video_id(v),
                    episodes: draw_schedule(&config, &mut rng_for(config.seed, Tag::Schedule, s, v)),
                });
            }
        }
        Ok(SyntheticCohort { config, model: CanonicalFaceModel::builtin(), names: blendshape_names(), latents, truth })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn truth(&self, subject: usize, video: usize) -> Result<&StreamTruth, SynthError> {
        if subject >= self.config.n_subjects || video >= self.config.n_videos {
            return Err(SynthError::UnknownStream(subject, video));
        }
        Ok(&self.truth[subject * self.config.n_videos + video])
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth { config: self.config.clone(), streams: self.truth.clone() }
    }

    /// `(subject, video)` index pairs, subject-major.
    pub fn streams(&self) -> Vec<(usize, usize)> {
        (0..self.config.n_subjects).flat_map(|s| (0..self.config.n_videos).map(move |v| (s, v))).collect()
    }

    pub fn stream(&self, subject: usize, video: usize) -> Result<FrameStream, SynthError> {
        let truth = self.truth(subject, video)?;
        let cfg = &self.config;
        let n = (cfg.duration_s * cfg.frame_rate).floor() as usize + 1;
        let dt = 1.0 / cfg.frame_rate;
        let mut rng = rng_for(cfg.seed, Tag::Frames, subject, video);
        let traits = SubjectTraits::draw(&mut rng_for(cfg.seed, Tag::Subject, subject, 0), self.names.len());
        let eyes_inf = cfg.informative("eyes");
        let attentive_var = cfg.coupling * cfg.coupling + cfg.noise_sd * cfg.noise_sd;
        let distracted_sd = attentive_var.sqrt();

        let mut head = [Ou::new(5.0, 3.0), Ou::new(5.0, 2.0), Ou::new(8.0, 1.5)];
        let mut shift = [Ou::new(10.0, 0.02), Ou::new(10.0, 0.02), Ou::new(20.0, 0.03)];
        let mut bs_ou: Vec<Ou> = (0..self.names.len()).map(|_| Ou::new(2.0, 0.7)).collect();
        let mut blink_left = 0.0;
        let mut next_blink = 0.0;
        let mut frames = Vec::with_capacity(n);
        let latent = &self.latents[video];
        let mut ep = 0;

        for k in 0..n {
            let t = k as f64 * dt;
            while ep + 1 < truth.episodes.len() && t >= truth.episodes[ep].end_s {
                ep += 1;
            }
            let (w, distraction) = attention_weight(&truth.episodes, ep, t);

            // gaze in canonical cm, relative to the head
            let noise: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let wander: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let mut gaze = [0.0; 2];
            for i in 0..2 {
                let att = cfg.coupling * latent[i].at(t) + cfg.noise_sd * noise[i];
                gaze[i] = GAZE_CM * (w * att + (1.0 - w) * distracted_sd * wander[i]);
            }
            if let Some((Distraction::EyesOff, off)) = distraction {
                gaze[0] += (1.0 - w) * off[0];
                gaze[1] += (1.0 - w) * off[1];
            }

            let mut angles = [0.0; 3];
            for (a, ou) in angles.iter_mut().zip(head.iter_mut()) {
                *a = ou.step(dt, &mut rng);
            }
            if let Some((Distraction::LookAway, off)) = distraction {
                angles[0] += (1.0 - w) * off[0];
                angles[1] += (1.0 - w) * off[1];
            }
            let rot = Rotation3::from_euler_angles(angles[1].to_radians(), angles[0].to_radians(), angles[2].to_radians());
            let offs: Vec<f64> = shift.iter_mut().map(|o| o.step(dt, &mut rng)).collect();
            let landmarks = self.landmarks(&rot, [0.5 + offs[0], 0.5 + offs[1], offs[2]], gaze, &mut rng);

            // blinks: Poisson events, more frequent when distracted if the eyes carry signal
            if t >= next_blink {
                blink_left = BLINK_S;
                let rate = if eyes_inf { 0.25 + 0.35 * (1.0 - w) } else { 0.35 };
                next_blink = t + BLINK_S + Exp::new(rate).unwrap().sample(&mut rng);
            }
            let blink = if blink_left > 0.0 {
                let phase = 1.0 - blink_left / BLINK_S;
                blink_left -= dt;
                0.85 * (1.0 - (2.0 * phase - 1.0).abs())
            } else {
                0.0
            };

            let blendshapes = self.blendshapes(&traits, &mut bs_ou, dt, &mut rng, gaze, blink, 1.0 - w);
            frames.push(FrameRecord { t: quantize(t, 1e-6), landmarks, blendshapes });
        }
        Ok(FrameStream {
            subject_id: truth.subject_id.clone(),
            video_id: truth.video_id.clone(),
            nominal_rate: cfg.frame_rate,
            validity_mask: vec![true; frames.len()],
            frames,
            unfilled_gaps: Vec::new(),
        })
    }

    fn landmarks(&self, rot: &Rotation3<f64>, shift: [f64; 3], gaze: [f64; 2], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
        let iris = &self.model.iris_ids;
        self.model
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut c = Vector3::new(p[0], p[1], p[2]);
                if iris.contains(&i) {
                    c.x += gaze[0];
                    c.y += gaze[1];
                }
                let r = rot * c * FACE_SCALE;
                let jitter: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                [
                    quantize(shift[0] + r.x + LANDMARK_JITTER * jitter[0], LANDMARK_QUANTUM),
                    quantize(shift[1] - r.y + LANDMARK_JITTER * jitter[1], LANDMARK_QUANTUM),
                    quantize(shift[2] - r.z + LANDMARK_JITTER * jitter[2], LANDMARK_QUANTUM),
                ]
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn blendshapes(
        &self,
        traits: &SubjectTraits,
        ou: &mut [Ou],
        dt: f64,
        rng: &mut ChaCha8Rng,
        gaze: [f64; 2],
        blink: f64,
        distracted: f64,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let eyes_inf = cfg.informative("eyes");
        self.names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let z = ou[i].step(dt, rng);
                let group = group_of(name);
                let shift = if group != "eyes" && group != "head" && cfg.informative(group) { 1.5 * distracted } else { 0.0 };
                let idle = logistic(traits.bias[i] + z + shift);
                let v = if name == "_neutral" {
                    1e-3 * idle
                } else if name.starts_with("eyeBlink") {
                    (0.05 * idle + blink).min(1.0)
                } else if eyes_inf && name.starts_with("eyeLook") {
                    eye_look(name, gaze) + 0.02 * idle
                } else {
                    idle
                };
                quantize(v.clamp(0.0, 1.0), BLENDSHAPE_QUANTUM)
            })
            .collect()
    }

    /// Generates every stream, writing `<subject>__<video>.jsonl` files plus
    /// `ground_truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
        std::fs::create_dir_all(dir)?;
        let paths = self
            .streams()
            .par_iter()
            .map(|&(s, v)| {
                let stream = self.stream(s, v)?;
                let path = dir.join(stream_file_name(&stream.subject_id, &stream.video_id));
                let f = std::fs::File::create(&path)?;
                write_frame_stream(&stream, std::io::BufWriter::new(f))?;
                Ok(path)
            })
            .collect::<Result<Vec<_>, SynthError>>()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(GROUND_TRUTH_FILE))?);
        serde_json::to_writer_pretty(&mut f, &self.ground_truth()).map_err(|e| SynthError::Io(e.to_string()))?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(paths)
    }
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// All streams and the attention schedule in memory. Prefer
/// [`SyntheticCohort::stream`] for long or large cohorts.
pub fn generate_cohort(config: &SynthConfig) -> Result<(Vec<FrameStream>, GroundTruth), SynthError> {
    let cohort = SyntheticCohort::new(config.clone())?;
    let streams = cohort.streams().into_iter().map(|(s, v)| cohort.stream(s, v)).collect::<Result<_, _>>()?;
    Ok((streams, cohort.ground_truth()))
}

fn group_of(name: &str) -> &'static str {
    if name.starts_with("eye") {
        "eyes"
    } else if name.starts_with("brow") {
        "brows"
    } else if name.starts_with("cheek") {
        "cheeks"
    } else if name.starts_with("mouth") || name.starts_with("jaw") {
        "mouth"
    } else if name.starts_with("noseSneer") {
        "nose"
    } else {
        ""
    }
}

/// Gaze direction to the matching eyeLook blendshape. The subject's left eye
/// sits at canonical x > 0, so looking towards +x is "out" for it.
fn eye_look(name: &str, gaze: [f64; 2]) -> f64 {
    let left = name.ends_with("Left");
    let (h, v) = (gaze[0] / EYE_LOOK_FULL_CM, gaze[1] / EYE_LOOK_FULL_CM);
    let toward_out = if left { h } else { -h };
    let amount = if name.contains("Out") {
        toward_out
    } else if name.contains("In") {
        -toward_out
    } else if name.contains("Up") {
        v
    } else {
        -v
    };
    amount.clamp(0.0, 1.0)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn quantize(v: f64, q: f64) -> f64 {
    (v / q).round() * q
}

#[derive(Debug, Clone)]
struct SubjectTraits {
    bias: Vec<f64>,
}

impl SubjectTraits {
    fn draw(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        SubjectTraits { bias: (0..channels).map(|_| -2.5 + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect() }
    }
}

/// Stationary Ornstein-Uhlenbeck process sampled at the frame interval.
#[derive(Debug, Clone)]
struct Ou {
    tau: f64,
    sd: f64,
    x: Option<f64>,
}

impl Ou {
    fn new(tau: f64, sd: f64) -> Self {
        Ou { tau, sd, x: None }
    }

    fn step(&mut self, dt: f64, rng: &mut ChaCha8Rng) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        let x = match self.x {
            None => self.sd * e,
            Some(x) => {
                let a = (-dt / self.tau).exp();
                a * x + (1.0 - a * a).sqrt() * self.sd * e
            }
        };
        self.x = Some(x);
        x
    }
}

/// Weight of the attentive state at `t` (1 = fully attentive), ramping
/// linearly over [`TRANSITION_S`] after each switch, and the active
/// distraction.
fn attention_weight(episodes: &[Episode], ep: usize, t: f64) -> (f64, Option<(Distraction, [f64; 2])>) {
    let e = &episodes[ep];
    let target = if e.attentive { 1.0 } else { 0.0 };
    let ramp = ((t - e.start_s) / TRANSITION_S).clamp(0.0, 1.0);
    let w = if ep == 0 { target } else { 1.0 - target + (2.0 * target - 1.0) * ramp };
    // during a ramp into attention the previous distraction fades out
    let active = if e.attentive { ep.checked_sub(1).map(|p| &episodes[p]) } else { Some(e) };
    (w, active.and_then(|a| a.distraction.map(|d| (d, a.offset))))
}

fn draw_schedule(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Episode> {
    let (frac, mean_dis, min_ep) = match cfg.schedule {
        ScheduleSpec::AllAttentive => {
            return vec![Episode { start_s: 0.0, end_s: cfg.duration_s, attentive: true, distraction: None, offset: [0.0; 2] }]
        }
        ScheduleSpec::AllDistracted => {
            let (distraction, offset) = draw_distraction(cfg, rng);
            return vec![Episode { start_s: 0.0, end_s: cfg.duration_s, attentive: false, distraction, offset }];
        }
        ScheduleSpec::Mixed { attentive_fraction: (lo, hi), mean_distracted_s, min_episode_s } => {
            (if lo < hi { rng.gen_range(lo..=hi) } else { lo }, mean_distracted_s, min_episode_s)
        }
    };
    let mean_att = mean_dis * frac / (1.0 - frac);
    let tail = |mean: f64, rng: &mut ChaCha8Rng| Exp::new(1.0 / (mean - min_ep).max(1.0)).unwrap().sample(rng);
    let mut attentive = rng.gen_bool(frac);
    let mut t = 0.0;
    let mut out = Vec::new();
    while t < cfg.duration_s {
        let mean = if attentive { mean_att } else { mean_dis };
        let end = (t + min_ep + tail(mean, rng)).min(cfg.duration_s);
        let (distraction, offset) = if attentive { (None, [0.0; 2]) } else { draw_distraction(cfg, rng) };
        out.push(Episode { start_s: t, end_s: end, attentive, distraction, offset });
        t = end;
        attentive = !attentive;
    }
    // a trailing sliver shorter than the minimum joins the previous episode
    if out.len() > 1 && out[out.len() - 1].end_s - out[out.len() - 1].start_s < min_ep {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end_s = last.end_s;
    }
    out
}

fn draw_distraction(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Option<Distraction>, [f64; 2]) {
    let head = cfg.informative("head");
    let kind = if head && rng.gen_bool(0.5) { Distraction::LookAway } else { Distraction::EyesOff };
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let offset = match kind {
        Distraction::LookAway => [sign * rng.gen_range(LOOK_AWAY_YAW_DEG.0..LOOK_AWAY_YAW_DEG.1), rng.gen_range(-10.0..10.0)],
        Distraction::EyesOff => {
            let a = rng.gen_range(0.0..2.0 * PI);
            [EYES_OFF_CM * a.cos(), EYES_OFF_CM * a.sin()]
        }
    };
    (Some(kind), offset)
}
