//! Per-frame affine alignment of tracker landmarks onto the canonical face.
//!
//! Stable landmarks are augmented with a ones column (`X`, n x 4) and the
//! 4 x 3 matrix `R` minimising `||X R - C||_F` is found with a Householder
//! QR factorisation. `Y = X R` then maps all 478 landmarks into canonical
//! space, and the 12 entries of `R` are the head-pose features.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmark_io::{FrameStream, NUM_LANDMARKS};

/// Normal-equation condition numbers above this are treated as degenerate.
pub const MAX_CONDITION: f64 = 1e12;

static CANONICAL_MODEL_JSON: &str = include_str!("../data/canonical_face_model_v1.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("stable landmarks are degenerate (normal-equation condition {condition:e})")]
    DegenerateGeometry { condition: f64 },
    #[error("stream has no frames")]
    EmptyStream,
    #[error("every frame in the stream is degenerate")]
    AllFramesDegenerate,
    #[error("bad canonical model: {0}")]
    BadModel(String),
    #[error("expected {expected} landmarks, got {got}")]
    WrongLandmarkCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalFaceModel {
    pub points: Vec<[f64; 3]>,
    pub stable_ids: Vec<usize>,
    pub iris_ids: Vec<usize>,
}

#[derive(Deserialize)]
struct ModelFile {
    version: u32,
    points: Vec<[f64; 3]>,
    stable_ids: Vec<usize>,
    iris_ids: Vec<usize>,
}

impl CanonicalFaceModel {
    pub fn new(
        points: Vec<[f64; 3]>,
        stable_ids: Vec<usize>,
        iris_ids: Vec<usize>,
    ) -> Result<Self, AlignmentError> {
        let bad = |m: String| Err(AlignmentError::BadModel(m));
        if points.len() != NUM_LANDMARKS {
            return bad(format!("expected {NUM_LANDMARKS} points, got {}", points.len()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return bad("non-finite point".into());
        }
        let mut seen = vec![0u8; NUM_LANDMARKS];
        for (ids, tag) in [(&stable_ids, 1u8), (&iris_ids, 2u8)] {
            for &i in ids.iter() {
                if i >= NUM_LANDMARKS {
                    return bad(format!("landmark id {i} out of range"));
                }
                if seen[i] != 0 {
                    return bad(format!("landmark id {i} listed twice"));
                }
                seen[i] = tag;
            }
        }
        if stable_ids.len() < 4 {
            return bad("need at least 4 stable landmarks".into());
        }
        let model = CanonicalFaceModel {
            points,
            stable_ids,
            iris_ids,
        };
        let stable: Vec<[f64; 3]> = model.stable_ids.iter().map(|&i| model.points[i]).collect();
        if let Err(AlignmentError::DegenerateGeometry { .. }) =
            solve_least_squares(&stable, &stable)
        {
            return bad("stable landmarks are coplanar".into());
        }
        Ok(model)
    }

    /// Versioned JSON: `{"version": 1, "points": [...], "stable_ids": [...], "iris_ids": [...]}`.
    pub fn from_json(json: &str) -> Result<Self, AlignmentError> {
        let file: ModelFile =
            serde_json::from_str(json).map_err(|e| AlignmentError::BadModel(e.to_string()))?;
        if file.version != 1 {
            return Err(AlignmentError::BadModel(format!(
                "unsupported version {}",
                file.version
            )));
        }
        Self::new(file.points, file.stable_ids, file.iris_ids)
    }

    /// The bundled stand-in model (see `tools/gen_canonical_model.py`).
    pub fn builtin() -> Self {
        Self::from_json(CANONICAL_MODEL_JSON).expect("bundled canonical model is valid")
    }

    pub fn stable_points(&self) -> Vec<[f64; 3]> {
        self.stable_ids.iter().map(|&i| self.points[i]).collect()
    }
}

/// Affine map from homogeneous frame coordinates to canonical space:
/// rows 0..3 are the linear part, row 3 the translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffinePose {
    pub r: [[f64; 3]; 4],
}

impl AffinePose {
    pub fn identity() -> Self {
        AffinePose {
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        let mut p = Self::identity();
        p.r[3] = t;
        p
    }

    /// Row-major flattening (12 values), the order used for pose features.
    pub fn flatten(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (row, chunk) in self.r.iter().zip(out.chunks_exact_mut(3)) {
            chunk.copy_from_slice(row);
        }
        out
    }

    pub fn from_flat(v: &[f64; 12]) -> Self {
        let mut r = [[0.0; 3]; 4];
        for (row, chunk) in r.iter_mut().zip(v.chunks_exact(3)) {
            row.copy_from_slice(chunk);
        }
        AffinePose { r }
    }

    pub fn apply_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.r;
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = p[0] * r[0][j] + p[1] * r[1][j] + p[2] * r[2][j] + r[3][j];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub t: f64,
    /// Canonical-space landmarks `Y = X R`.
    pub landmarks: Vec<[f64; 3]>,
    pub pose: AffinePose,
    pub blendshapes: Vec<f64>,
    pub valid: bool,
}

/// Householder QR least squares of `[src | 1] R = dst`. Returns the 4x3
/// solution, or `DegenerateGeometry` when `cond(X^T X) > MAX_CONDITION`.
fn solve_least_squares(src: &[[f64; 3]], dst: &[[f64; 3]]) -> Result<AffinePose, AlignmentError> {
    let n = src.len();
    if n < 4 {
        return Err(AlignmentError::DegenerateGeometry {
            condition: f64::INFINITY,
        });
    }
    // a is n x 4, b is n x 3, both stored row by row.
    let mut a: Vec<[f64; 4]> = src.iter().map(|p| [p[0], p[1], p[2], 1.0]).collect();
    let mut b: Vec<[f64; 3]> = dst.to_vec();

    let mut v = vec![0.0; n];
    for k in 0..4 {
        let norm = (k..n).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(AlignmentError::DegenerateGeometry {
                condition: f64::INFINITY,
            });
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        for i in k..n {
            v[i] = a[i][k];
        }
        v[k] -= alpha;
        let vnorm2: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..4 {
            let s: f64 = (k..n).map(|i| v[i] * a[i][j]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..n {
                a[i][j] -= s * v[i];
            }
        }
        for j in 0..3 {
            let s: f64 = (k..n).map(|i| v[i] * b[i][j]).sum::<f64>() * 2.0 / vnorm2;
            for i in k..n {
                b[i][j] -= s * v[i];
            }
        }
    }

    let upper = Matrix4::from_fn(|i, j| if j >= i { a[i][j] } else { 0.0 });
    let sv = upper.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    if !(condition <= MAX_CONDITION) {
        return Err(AlignmentError::DegenerateGeometry { condition });
    }

    let mut r = [[0.0; 3]; 4];
    for j in 0..3 {
        for i in (0..4).rev() {
            let mut s = b[i][j];
            for k in i + 1..4 {
                s -= a[i][k] * r[k][j];
            }
            r[i][j] = s / a[i][i];
        }
    }
    Ok(AffinePose { r })
}

/// Fit the affine pose mapping this frame's stable landmarks onto the
/// canonical model.
pub fn fit_affine(
    frame_landmarks: &[[f64; 3]],
    model: &CanonicalFaceModel,
) -> Result<AffinePose, AlignmentError> {
    if frame_landmarks.len() != NUM_LANDMARKS {
        return Err(AlignmentError::WrongLandmarkCount {
            expected: NUM_LANDMARKS,
            got: frame_landmarks.len(),
        });
    }
    let src: Vec<[f64; 3]> = model.stable_ids.iter().map(|&i| frame_landmarks[i]).collect();
    solve_least_squares(&src, &model.stable_points())
}

pub fn apply_affine(frame_landmarks: &[[f64; 3]], pose: &AffinePose) -> Vec<[f64; 3]> {
    frame_landmarks.iter().map(|p| pose.apply_point(p)).collect()
}

/// Frobenius residual of the pose on the model's stable landmarks.
pub fn stable_residual(
    frame_landmarks: &[[f64; 3]],
    pose: &AffinePose,
    model: &CanonicalFaceModel,
) -> f64 {
    model
        .stable_ids
        .iter()
        .map(|&i| {
            let y = pose.apply_point(&frame_landmarks[i]);
            let c = model.points[i];
            (0..3).map(|j| (y[j] - c[j]).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

/// Align every frame of a stream. Degenerate frames are marked invalid and
/// take the previous valid pose (or the next one, for leading frames).
pub fn align_stream(
    stream: &FrameStream,
    model: &CanonicalFaceModel,
) -> Result<Vec<AlignedFrame>, AlignmentError> {
    if stream.frames.is_empty() {
        return Err(AlignmentError::EmptyStream);
    }
    let fits: Vec<Option<AffinePose>> = stream
        .frames
        .iter()
        .map(|f| fit_affine(&f.landmarks, model).ok())
        .collect();
    let first_valid = fits
        .iter()
        .position(Option::is_some)
        .ok_or(AlignmentError::AllFramesDegenerate)?;
    let mut last = fits[first_valid].expect("position found a fit");
    let aligned = stream
        .frames
        .iter()
        .zip(&fits)
        .zip(&stream.validity_mask)
        .map(|((frame, fit), &observed)| {
            let pose = match fit {
                Some(p) => {
                    last = *p;
                    *p
                }
                None => last,
            };
            AlignedFrame {
                t: frame.t,
                landmarks: apply_affine(&frame.landmarks, &pose),
                pose,
                blendshapes: frame.blendshapes.clone(),
                valid: observed && fit.is_some(),
            }
        })
        .collect();
    Ok(aligned)
}

#[derive(Serialize)]
struct AlignedRecordRef<'a> {
    t: f64,
    lm: &'a [[f64; 3]],
    bs: &'a [f64],
    pose: [f64; 12],
}

/// Aligned frames in the frame-stream line format plus a 12-float `pose`.
pub fn write_aligned<W: std::io::Write>(frames: &[AlignedFrame], mut out: W) -> std::io::Result<()> {
    for f in frames {
        let rec = AlignedRecordRef {
            t: f.t,
            lm: &f.landmarks,
            bs: &f.blendshapes,
            pose: f.pose.flatten(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
