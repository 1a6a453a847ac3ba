//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use attnsync::model::nn::{Mode, Network};
use attnsync::model::{loss_and_grad, Architecture, ConvBlock, ModelConfig};
use attnsync::signal::UniformSeries;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const H: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;
/// Denominator floor, so that entries whose true gradient is ~0 are judged
/// on absolute error instead.
pub const FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn tiny_hybrid(rows: usize, cols: usize) -> ModelConfig {
    ModelConfig {
        architecture: Architecture::Hybrid {
            conv: vec![
                ConvBlock { channels: 4, kernel: 3, pool: 2 },
                ConvBlock { channels: 4, kernel: 3, pool: 2 },
            ],
            lstm_hidden: 8,
            dense: vec![8],
        },
        input_rows: rows,
        input_cols: cols,
        seed: 3,
    }
}

pub struct Check {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Entries re-checked at `H / 10` because the `H` stencil straddled a
    /// ReLU or max-pool switch.
    pub kinks: usize,
}

/// Compares every trainable gradient entry of the named slices (all slices
/// when `only` is empty) with a central difference of the loss.
///
/// An entry that fails at `H` is re-checked once at `H / 10`. If a switch point
/// lies within `H` the two differences disagree and the smaller step is the
/// meaningful one; a wrong analytic gradient fails at both.
pub fn check(net: &Network, params: &[f64], x: &[f64], y: &[f64], mode: Mode, only: &[&str]) -> Check {
    let (_, grad, _) = loss_and_grad(net, params, x, y, mode).unwrap();
    let loss_at = |p: &[f64]| loss_and_grad(net, p, x, y, mode).unwrap().0;
    let mut p = params.to_vec();
    let mut out = Check { max_rel: 0.0, worst: String::new(), checked: 0, kinks: 0 };
    let central = |p: &mut Vec<f64>, i: usize, h: f64| {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_at(p);
        p[i] = orig - h;
        let down = loss_at(p);
        p[i] = orig;
        (up - down) / (2.0 * h)
    };
    let rel_err = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
    for s in &net.layout.slices {
        if !s.trainable || (!only.is_empty() && !only.contains(&s.name.as_str())) {
            continue;
        }
        for i in s.offset..s.offset + s.len {
            let mut numeric = central(&mut p, i, H);
            let mut rel = rel_err(grad[i], numeric);
            if rel >= MAX_REL {
                out.kinks += 1;
                numeric = central(&mut p, i, H / 10.0);
                rel = rel_err(grad[i], numeric);
            }
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{}[{}]: analytic {:e} numeric {:e}", s.name, i - s.offset, grad[i], numeric);
            }
            out.checked += 1;
        }
    }
    out
}

/// Sets batch-norm running statistics to random non-trivial values.
pub fn randomize_running_stats(net: &Network, params: &mut [f64], seed: u64) {
    let mut rng = rng(seed);
    for s in &net.layout.slices {
        if s.name.ends_with("running_mean") || s.name.ends_with("running_var") {
            for v in &mut params[s.offset..s.offset + s.len] {
                *v = if s.name.ends_with("var") { rng.gen_range(0.2..2.0) } else { rng.gen_range(-0.5..0.5) };
            }
        }
    }
}

/// Textbook Pearson r from raw sums; 0 for a near-constant input.
pub fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    if va < 1e-12 || vb < 1e-12 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    cov / (va.sqrt() * vb.sqrt())
}

/// Per-subject, per-window ISC straight from the definition: mean over
/// channels of the mean clamped correlation with every other subject.
pub fn naive_isc(subjects: &[UniformSeries], len: usize, step: usize) -> Vec<Vec<f64>> {
    let ch = subjects[0].channels;
    let n = subjects[0].len();
    let m = subjects.len();
    let mut out = vec![Vec::new(); m];
    let mut start = 0;
    while start + len <= n {
        for i in 0..m {
            let mut total = 0.0;
            for c in 0..ch {
                let col = |k: usize| subjects[k].channel(c)[start..start + len].to_vec();
                let mut s = 0.0;
                for j in (0..m).filter(|&j| j != i) {
                    s += naive_pearson(&col(i), &col(j)).max(0.0);
                }
                total += s / (m - 1) as f64;
            }
            out[i].push(total / ch as f64);
        }
        start += step;
    }
    out
}

pub fn uniform_series(rate: f64, channels: usize, values: Vec<f64>) -> UniformSeries {
    let n = values.len() / channels;
    UniformSeries { rate, t0: 0.0, channels, values, valid: vec![true; n] }
}

/// Random rotation (unit quaternion), scale, and translation.
pub fn random_rigid(rng: &mut impl Rng) -> ([[f64; 3]; 3], f64, [f64; 3]) {
    let q: [f64; 4] = loop {
        let q = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    let rot = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let scale = rng.gen_range(0.2..5.0);
    let t = [0; 3].map(|_| rng.gen_range(-2.0..2.0));
    (rot, scale, t)
}

pub fn transform(points: &[[f64; 3]], rot: &[[f64; 3]; 3], scale: f64, t: &[f64; 3]) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| [0, 1, 2].map(|i| scale * (rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2]) + t[i]))
        .collect()
}

/// 4 Hz series holding exactly `windows` 10 s windows at 1 s steps.
/// Subjects share a common signal with per-subject sign and noise, so
/// pairwise correlations take both signs. Channel 0 of subject 0 is
/// sometimes constant.
pub fn random_cohort(seed: u64, subjects: usize, windows: usize, channels: usize) -> Vec<UniformSeries> {
    let mut r = rng(seed);
    let n = 40 + 4 * (windows - 1);
    let shared: Vec<f64> = (0..n * channels).map(|_| StandardNormal.sample(&mut r)).collect();
    let constant = r.gen_bool(0.3);
    (0..subjects)
        .map(|s| {
            let w: f64 = r.gen_range(-1.0..1.0);
            let values = shared
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if constant && s == 0 && i % channels == 0 {
                        0.25
                    } else {
                        w * v + r.sample::<f64, _>(StandardNormal) * 0.7 + 3.0
                    }
                })
                .collect();
            uniform_series(4.0, channels, values)
        })
        .collect()
}

