//! Single-subject ISC regressor: network definitions, training, inference and
//! the on-disk artifact.

pub mod gemm;
pub mod nn;
pub mod scalar;

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSplit, StandardizationStats, WindowSample, NUM_FEATURES};
use nn::{ForwardPass, Layer, Mode, Network, ParamLayout, ParamSlice, Shape, BN_MOMENTUM};
use scalar::Scalar;

pub const ARTIFACT_MAGIC: &[u8; 8] = b"ATTNMODL";
pub const ARTIFACT_VERSION: u32 = 1;
/// Rows of a 10 s window at 4 Hz.
pub const DEFAULT_INPUT_ROWS: usize = 40;
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("input standardized with stats {found}, model expects {expected}")]
    UnstandardizedInput { expected: String, found: String },
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("no targets given")]
    EmptyTargets,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("invalid artifact: {0}")]
    BadArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Conv blocks (conv, ReLU, batch-norm, max-pool) over the window seen as
    /// a one-channel image, an LSTM over the time axis, then a dense head.
    Hybrid { conv: Vec<ConvBlock>, lstm_hidden: usize, dense: Vec<usize> },
    /// Flattened window through ReLU hidden layers.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_rows: usize,
    pub input_cols: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform(f64),
    Const(f64),
}

struct NetBuilder {
    layout: ParamLayout,
    init: Vec<(usize, usize, Init)>,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl NetBuilder {
    fn new(input: Shape) -> Self {
        NetBuilder { layout: ParamLayout::default(), init: Vec::new(), layers: Vec::new(), shapes: vec![input] }
    }

    fn shape(&self) -> Shape {
        *self.shapes.last().expect("input shape")
    }

    fn param(&mut self, name: String, len: usize, trainable: bool, rule: Init) -> usize {
        let off = self.layout.push(name, len, trainable);
        self.init.push((off, len, rule));
        off
    }

    fn layer(&mut self, l: Layer, out: Shape) {
        self.layers.push(l);
        self.shapes.push(out);
    }

    /// ReLU dense layers of the given widths, then a linear scalar output.
    fn dense_head(&mut self, mut input: usize, widths: &[usize]) -> Result<(), ModelError> {
        for (i, &wd) in widths.iter().chain(std::iter::once(&1)).enumerate() {
            if wd == 0 {
                return Err(ModelError::BadConfig("dense width 0".into()));
            }
            let last = i == widths.len();
            let name = if last { "out".to_string() } else { format!("fc{}", i + 1) };
            let bound = 1.0 / (input as f64).sqrt();
            let weight = self.param(format!("{name}.weight"), wd * input, true, Init::Uniform(bound));
            let bias = self.param(format!("{name}.bias"), wd, true, Init::Uniform(bound));
            self.layer(Layer::Dense { input, output: wd, weight, bias }, [wd, 1, 1]);
            if !last {
                self.layer(Layer::Relu, [wd, 1, 1]);
            }
            input = wd;
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn hybrid(seed: u64) -> Self {
        ModelConfig {
            architecture: Architecture::Hybrid {
                conv: vec![
                    ConvBlock { channels: 4, kernel: 3, pool: 2 },
                    ConvBlock { channels: 8, kernel: 3, pool: 2 },
                ],
                lstm_hidden: 16,
                dense: vec![16],
            },
            input_rows: DEFAULT_INPUT_ROWS,
            input_cols: NUM_FEATURES,
            seed,
        }
    }

    pub fn mlp(seed: u64) -> Self {
        ModelConfig {
            architecture: Architecture::Mlp { hidden: vec![64, 32] },
            input_rows: DEFAULT_INPUT_ROWS,
            input_cols: NUM_FEATURES,
            seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.architecture {
            Architecture::Hybrid { .. } => "hybrid",
            Architecture::Mlp { .. } => "mlp",
        }
    }

    pub fn build(&self) -> Result<Network, ModelError> {
        self.build_with_init().map(|(n, _)| n)
    }

    fn build_with_init(&self) -> Result<(Network, Vec<(usize, usize, Init)>), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.input_rows == 0 || self.input_cols == 0 {
            return bad("empty input shape".into());
        }
        let mut nb = NetBuilder::new([1, self.input_rows, self.input_cols]);
        match &self.architecture {
            Architecture::Hybrid { conv, lstm_hidden, dense } => {
                if conv.is_empty() {
                    return bad("hybrid needs at least one conv block".into());
                }
                if *lstm_hidden == 0 {
                    return bad("lstm hidden size 0".into());
                }
                for (bi, block) in conv.iter().enumerate() {
                    let [c, h, w] = nb.shape();
                    if block.channels == 0 || block.kernel == 0 || block.kernel % 2 == 0 || block.pool == 0 {
                        return bad(format!("conv block {} needs channels > 0, odd kernel, pool > 0", bi + 1));
                    }
                    if h / block.pool == 0 || w / block.pool == 0 {
                        return bad(format!("conv block {} pools a {h}x{w} map to nothing", bi + 1));
                    }
                    let (oc, k, p, n) = (block.channels, block.kernel, block.pool, bi + 1);
                    let bound = 1.0 / ((c * k * k) as f64).sqrt();
                    let weight = nb.param(format!("conv{n}.weight"), oc * c * k * k, true, Init::Uniform(bound));
                    let bias = nb.param(format!("conv{n}.bias"), oc, true, Init::Uniform(bound));
                    nb.layer(Layer::Conv2d { in_c: c, out_c: oc, k, h, w, weight, bias }, [oc, h, w]);
                    nb.layer(Layer::Relu, [oc, h, w]);
                    let gamma = nb.param(format!("bn{n}.gamma"), oc, true, Init::Const(1.0));
                    let beta = nb.param(format!("bn{n}.beta"), oc, true, Init::Const(0.0));
                    let mean = nb.param(format!("bn{n}.running_mean"), oc, false, Init::Const(0.0));
                    let var = nb.param(format!("bn{n}.running_var"), oc, false, Init::Const(1.0));
                    nb.layer(Layer::BatchNorm { c: oc, spatial: h * w, gamma, beta, mean, var }, [oc, h, w]);
                    nb.layer(Layer::MaxPool { c: oc, h, w, size: p }, [oc, h / p, w / p]);
                }
                let [c, steps, w] = nb.shape();
                let hd = *lstm_hidden;
                let f = c * w;
                let bound = 1.0 / (hd as f64).sqrt();
                let w_ih = nb.param("lstm.weight_ih".into(), 4 * hd * f, true, Init::Uniform(bound));
                let w_hh = nb.param("lstm.weight_hh".into(), 4 * hd * hd, true, Init::Uniform(bound));
                let bias = nb.param("lstm.bias".into(), 4 * hd, true, Init::Uniform(bound));
                nb.layer(Layer::Lstm { c, steps, w, hidden: hd, w_ih, w_hh, bias }, [hd, 1, 1]);
                nb.dense_head(hd, dense)?;
            }
            Architecture::Mlp { hidden } => {
                nb.dense_head(self.input_rows * self.input_cols, hidden)?;
            }
        }
        Ok((Network { layers: nb.layers, shapes: nb.shapes, layout: nb.layout }, nb.init))
    }

    /// Seeded initial parameters: uniform in `+-1/sqrt(fan_in)` for weights
    /// and biases, unit scale and zero shift for batch-norm.
    pub fn init_params(&self) -> Result<Vec<f64>, ModelError> {
        let (net, rules) = self.build_with_init()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut p = vec![0.0; net.layout.total];
        for (off, len, rule) in rules {
            for v in &mut p[off..off + len] {
                *v = match rule {
                    Init::Uniform(b) => rng.gen_range(-b..b),
                    Init::Const(c) => c,
                };
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Stop after this many epochs without improvement of the monitored loss.
    pub patience: Option<usize>,
    /// Decoupled weight decay on weight matrices and kernels (not on biases
    /// or batch-norm parameters): each step also subtracts
    /// `learning_rate * weight_decay * w`.
    pub weight_decay: f64,
    /// Probability of replacing a whole input channel of a training window
    /// with its training mean (zero after standardization).
    pub channel_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            patience: None,
            weight_decay: 0.0,
            channel_dropout: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.epochs == 0 {
            return Err(ModelError::BadConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::BadConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(ModelError::BadConfig("Adam moments need 0 <= beta < 1 and epsilon > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(ModelError::BadConfig("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.channel_dropout) {
            return Err(ModelError::BadConfig("channel dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments. Entries outside `mask` are left alone.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    mask: Vec<bool>,
    decay: Vec<bool>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, mask: Vec<bool>) -> Self {
        let n = mask.len();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            decay: mask.clone(),
            mask,
        }
    }

    /// Restricts weight decay to the entries set in `decay`.
    pub fn with_decay_mask(mut self, decay: Vec<bool>) -> Self {
        assert_eq!(decay.len(), self.mask.len());
        self.decay = decay;
        self
    }

    pub fn step<G: Scalar>(&mut self, params: &mut [f64], grad: &[G]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grad[i].to_f64();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            let wd = if self.decay[i] { self.weight_decay * params[i] } else { 0.0 };
            params[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + wd);
        }
    }
}

/// Mean squared error, accumulated in double precision.
pub fn mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64, ModelError> {
    if pred.len() != target.len() {
        return Err(ModelError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.is_empty() {
        return Err(ModelError::EmptyTargets);
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p.to_f64() - t.to_f64()).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

/// MSE and its gradient with respect to every parameter.
pub fn loss_and_grad<T: Scalar>(
    net: &Network,
    params: &[T],
    x: &[T],
    y: &[T],
    mode: Mode,
) -> Result<(f64, Vec<T>, Vec<nn::BnUpdate>), ModelError> {
    let mut pass = ForwardPass::default();
    let (loss, grad) = loss_and_grad_into(net, &mut pass, params, x, y, mode)?;
    Ok((loss, grad, pass.bn_updates))
}

/// As [`loss_and_grad`], reusing the buffers of `pass`; batch-norm updates
/// are left in `pass.bn_updates`.
pub fn loss_and_grad_into<T: Scalar>(
    net: &Network,
    pass: &mut ForwardPass<T>,
    params: &[T],
    x: &[T],
    y: &[T],
    mode: Mode,
) -> Result<(f64, Vec<T>), ModelError> {
    let batch = y.len();
    check_input_len(net, x.len(), batch)?;
    net.forward_into(pass, params, x, batch, mode);
    let loss = mse(pass.output(), y)?;
    let scale = T::from_f64(2.0 / batch as f64);
    let d: Vec<T> = pass.output().iter().zip(y).map(|(&p, &t)| scale * (p - t)).collect();
    let grad = net.backward(params, pass, &d);
    Ok((loss, grad))
}

fn check_input_len(net: &Network, len: usize, batch: usize) -> Result<(), ModelError> {
    let [c, h, w] = net.input_shape();
    if len != batch * c * h * w {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{batch}x{h}x{w}"),
            found: format!("{len} values"),
        });
    }
    Ok(())
}

/// Samples standardized with a particular set of statistics.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub rows: usize,
    pub fingerprint: String,
}

impl Batch {
    /// Standardizes raw samples. All samples must share one window length.
    pub fn standardize(samples: &[WindowSample], stats: &StandardizationStats) -> Result<Batch, ModelError> {
        let rows = samples.first().map(|s| s.rows()).unwrap_or(0);
        let mut x = Vec::with_capacity(samples.len() * rows * NUM_FEATURES);
        let mut y = Vec::with_capacity(samples.len());
        for s in samples {
            if s.x.len() != rows * NUM_FEATURES {
                return Err(ModelError::ShapeMismatch {
                    expected: format!("{rows}x{NUM_FEATURES}"),
                    found: format!("{} values", s.x.len()),
                });
            }
            for row in s.x.chunks_exact(NUM_FEATURES) {
                for ((v, m), sd) in row.iter().zip(&stats.mean).zip(&stats.std) {
                    x.push(((*v as f64 - m) / sd) as f32);
                }
            }
            y.push(s.y);
        }
        Ok(Batch { x, y, rows, fingerprint: stats.fingerprint() })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.rows * NUM_FEATURES
    }

    fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let sl = self.sample_len();
        let mut x = Vec::with_capacity(idx.len() * sl);
        for &i in idx {
            x.extend_from_slice(&self.x[i * sl..(i + 1) * sl]);
        }
        (x, idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub epochs_run: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// `"val"` or `"train"` (when there is no validation split).
    pub selected_on: String,
    pub history: Vec<EpochLoss>,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub slices: Vec<ParamSlice>,
    pub stats: StandardizationStats,
    pub metadata: Option<TrainingMetadata>,
}

#[derive(Serialize, Deserialize)]
struct ArtifactHeader {
    config: ModelConfig,
    slices: Vec<ParamSlice>,
    stats: StandardizationStats,
    metadata: Option<TrainingMetadata>,
}

impl ModelArtifact {
    /// Freshly initialized model bound to `stats`.
    pub fn untrained(config: ModelConfig, stats: StandardizationStats) -> Result<Self, ModelError> {
        let net = config.build()?;
        let params = config.init_params()?.iter().map(|&v| v as f32).collect();
        Ok(ModelArtifact { config, params, slices: net.layout.slices, stats, metadata: None })
    }

    pub fn network(&self) -> Result<Network, ModelError> {
        let net = self.config.build()?;
        if net.layout.total != self.params.len() {
            return Err(ModelError::BadArtifact(format!(
                "{} parameters stored, config needs {}",
                self.params.len(),
                net.layout.total
            )));
        }
        Ok(net)
    }

    pub fn param(&self, name: &str) -> Option<&[f32]> {
        self.slices.iter().find(|s| s.name == name).map(|s| &self.params[s.offset..s.offset + s.len])
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let expected = self.stats.fingerprint();
        if batch.fingerprint != expected {
            return Err(ModelError::UnstandardizedInput { expected, found: batch.fingerprint.clone() });
        }
        if !batch.is_empty() && batch.rows != self.config.input_rows {
            return Err(ModelError::ShapeMismatch {
                expected: format!("{} rows", self.config.input_rows),
                found: format!("{} rows", batch.rows),
            });
        }
        Ok(())
    }

    /// Inference-mode predictions for a standardized batch.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<f32>, ModelError> {
        self.check_batch(batch)?;
        let net = self.network()?;
        let sl = batch.sample_len();
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.x.chunks(PREDICT_BATCH * sl.max(1)) {
            let n = chunk.len() / sl;
            out.extend(net.forward(&self.params, chunk, n, Mode::Infer).into_output());
        }
        Ok(out)
    }

    /// Loss and parameter gradient on a standardized batch.
    pub fn backward(&self, batch: &Batch, mode: Mode) -> Result<(f64, Vec<f32>), ModelError> {
        self.check_batch(batch)?;
        let net = self.network()?;
        let (loss, grad, _) = loss_and_grad(&net, &self.params, &batch.x, &batch.y, mode)?;
        Ok((loss, grad))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = ArtifactHeader {
            config: self.config.clone(),
            slices: self.slices.clone(),
            stats: self.stats.clone(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::BadArtifact(e.to_string()))?;
        let mut out = Vec::with_capacity(32 + json.len() + 4 * self.params.len());
        out.extend_from_slice(ARTIFACT_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::BadArtifact(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != ARTIFACT_MAGIC {
            return Err(bad("not a model artifact"));
        }
        let mut u4 = [0u8; 4];
        let mut u8b = [0u8; 8];
        r.read_exact(&mut u4).map_err(|_| bad("truncated"))?;
        let version = u32::from_le_bytes(u4);
        if version != ARTIFACT_VERSION {
            return Err(ModelError::BadArtifact(format!("unsupported version {version}")));
        }
        r.read_exact(&mut u8b).map_err(|_| bad("truncated"))?;
        let hlen = u64::from_le_bytes(u8b) as usize;
        if r.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: ArtifactHeader =
            serde_json::from_slice(&r[..hlen]).map_err(|e| ModelError::BadArtifact(e.to_string()))?;
        r = &r[hlen..];
        r.read_exact(&mut u8b).map_err(|_| bad("truncated"))?;
        let count = u64::from_le_bytes(u8b) as usize;
        if r.len() != count * 4 {
            return Err(bad("parameter block length does not match count"));
        }
        let params = r.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let art = ModelArtifact {
            config: header.config,
            params,
            slices: header.slices,
            stats: header.stats,
            metadata: header.metadata,
        };
        let net = art.network()?;
        if net.layout.slices != art.slices {
            return Err(bad("parameter slices do not match config"));
        }
        Ok(art)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Trains with Adam on MSE over seeded shuffled mini-batches and keeps the
/// parameters of the epoch with the lowest validation loss (training loss
/// when the validation split is empty).
pub fn train(split: &DatasetSplit, mconfig: &ModelConfig, tconfig: &TrainConfig) -> Result<ModelArtifact, ModelError> {
    train_with_progress(split, mconfig, tconfig, |_| {})
}

pub fn train_with_progress(
    split: &DatasetSplit,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<ModelArtifact, ModelError> {
    tconfig.validate()?;
    if split.train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let net = mconfig.build()?;
    let stats = StandardizationStats::compute(&split.train);
    let train_b = Batch::standardize(&split.train, &stats)?;
    let val_b = Batch::standardize(&split.val, &stats)?;
    if train_b.rows != mconfig.input_rows || (!val_b.is_empty() && val_b.rows != mconfig.input_rows) {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{} rows", mconfig.input_rows),
            found: format!("{} rows", train_b.rows),
        });
    }

    let mut master = mconfig.init_params()?;
    let mut adam = Adam::new(tconfig, net.layout.trainable_mask()).with_decay_mask(net.layout.decay_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    drop_rng.set_stream(1);
    let n = train_b.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;
    let mut pass = ForwardPass::default();

    for epoch in 1..=tconfig.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, idx) in order.chunks(tconfig.batch_size).enumerate() {
            // Batch statistics of a single sample are degenerate.
            if idx.len() < 2 && n >= 2 {
                continue;
            }
            let (mut x, y) = train_b.gather(idx);
            if tconfig.channel_dropout > 0.0 {
                drop_channels(&mut x, train_b.rows, tconfig.channel_dropout, &mut drop_rng);
            }
            let params: Vec<f32> = master.iter().map(|&v| v as f32).collect();
            let (loss, grad) = loss_and_grad_into(&net, &mut pass, &params, &x, &y, Mode::Train)?;
            if !loss.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {bi}; last epoch losses: {:?}", history.last());
                return Err(ModelError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            adam.step(&mut master, &grad);
            for u in &pass.bn_updates {
                for (c, (&m, &v)) in u.batch_mean.iter().zip(&u.batch_var_unbiased).enumerate() {
                    let rm = &mut master[u.mean_offset + c];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
                    let rv = &mut master[u.var_offset + c];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * v;
                }
            }
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;
        let val_loss = if val_b.is_empty() {
            None
        } else {
            let params: Vec<f32> = master.iter().map(|&v| v as f32).collect();
            let pred = predict_raw(&net, &params, &val_b);
            Some(mse(&pred, &val_b.y)?)
        };
        let rec = EpochLoss { epoch, train: train_loss, val: val_loss };
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");
        on_epoch(&rec);
        history.push(rec);
        let monitored = val_loss.unwrap_or(train_loss);
        if best.as_ref().map_or(true, |(b, _, _)| monitored < *b) {
            best = Some((monitored, epoch, master.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if tconfig.patience.is_some_and(|p| since_best >= p) {
            log::info!("stopping early after epoch {epoch}");
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(ModelArtifact {
        config: mconfig.clone(),
        params: best_params.iter().map(|&v| v as f32).collect(),
        slices: net.layout.slices.clone(),
        stats,
        metadata: Some(TrainingMetadata {
            format_version: ARTIFACT_VERSION,
            train_config: tconfig.clone(),
            epochs_run: history.len(),
            best_epoch,
            selected_on: if val_b.is_empty() { "train" } else { "val" }.into(),
            history,
            n_train: n,
            n_val: val_b.len(),
        }),
    })
}

/// Zeroes each (window, channel) column with probability `p`.
fn drop_channels(x: &mut [f32], rows: usize, p: f64, rng: &mut ChaCha8Rng) {
    for window in x.chunks_exact_mut(rows * NUM_FEATURES) {
        for c in 0..NUM_FEATURES {
            if rng.gen_bool(p) {
                window.iter_mut().skip(c).step_by(NUM_FEATURES).for_each(|v| *v = 0.0);
            }
        }
    }
}

fn predict_raw(net: &Network, params: &[f32], batch: &Batch) -> Vec<f32> {
    let sl = batch.sample_len();
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.x.chunks(PREDICT_BATCH * sl.max(1)) {
        out.extend(net.forward(params, chunk, chunk.len() / sl, Mode::Infer).into_output());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub video_id: String,
    pub t_end: f64,
    pub y_pred: f64,
    /// Absent for unlabelled windows.
    pub y_true: Option<f64>,
}

/// Standardizes raw samples with the artifact's statistics and runs the
/// network in inference mode.
pub fn predict(artifact: &ModelArtifact, samples: &[WindowSample]) -> Result<Vec<Prediction>, ModelError> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Batch::standardize(samples, &artifact.stats)?;
    let pred = artifact.forward(&batch)?;
    Ok(samples
        .iter()
        .zip(pred)
        .map(|(s, p)| Prediction {
            subject_id: s.subject_id.clone(),
            video_id: s.video_id.clone(),
            t_end: s.t_end,
            y_pred: p as f64,
            y_true: s.y.is_finite().then_some(s.y as f64),
        })
        .collect())
}

/// Predicts the training-target mean for every input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanBaseline {
    pub mean: f64,
}

impl MeanBaseline {
    pub fn predict(&self, samples: &[WindowSample]) -> Vec<Prediction> {
        samples
            .iter()
            .map(|s| Prediction {
                subject_id: s.subject_id.clone(),
                video_id: s.video_id.clone(),
                t_end: s.t_end,
                y_pred: self.mean,
                y_true: s.y.is_finite().then_some(s.y as f64),
            })
            .collect()
    }
}

pub fn baseline_mean(targets: &[f32]) -> Result<MeanBaseline, ModelError> {
    if targets.is_empty() {
        return Err(ModelError::EmptyTargets);
    }
    Ok(MeanBaseline { mean: targets.iter().map(|&v| v as f64).sum::<f64>() / targets.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes_compose() {
        let net = ModelConfig::hybrid(0).build().unwrap();
        assert_eq!(net.shapes[0], [1, 40, 64]);
        assert_eq!(net.output_len(), 1);
        let lstm = net.layers.iter().find(|l| matches!(l, Layer::Lstm { .. })).unwrap();
        assert!(matches!(lstm, Layer::Lstm { c: 8, steps: 10, w: 16, hidden: 16, .. }));
        assert!(net.layout.total < 100_000);
        let mlp = ModelConfig::mlp(0).build().unwrap();
        assert_eq!(mlp.layout.total, 2560 * 64 + 64 + 64 * 32 + 32 + 32 + 1);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = ModelConfig::hybrid(0);
        c.input_rows = 3;
        assert!(matches!(c.build(), Err(ModelError::BadConfig(_))));
        let mut c = ModelConfig::hybrid(0);
        if let Architecture::Hybrid { conv, .. } = &mut c.architecture {
            conv[0].kernel = 2;
        }
        assert!(c.build().is_err());
        let t = TrainConfig { epochs: 0, ..Default::default() };
        assert!(t.validate().is_err());
        let t = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(t.validate().is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.0f64, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mse(&[0.3f64, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(matches!(mse(&[0.0f64], &[1.0, 2.0]), Err(ModelError::LengthMismatch(1, 2))));
    }

    #[test]
    fn baseline_examples() {
        let b = baseline_mean(&[0.2, 0.4]).unwrap();
        assert!((b.mean - 0.3).abs() < 1e-7);
        assert!(matches!(baseline_mean(&[]), Err(ModelError::EmptyTargets)));
    }
}
