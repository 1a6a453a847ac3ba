//! Layer kernels and the sequential network that strings them together.
//! Activations are stored sample-major as `[batch, channels, height, width]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{dot, gemm, gemm_nt, sq_dev, sum};
use super::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Samples per gradient partial. Partials are summed in chunk order, so the
/// result does not depend on how many threads ran them.
pub const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub slices: Vec<ParamSlice>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, len: usize, trainable: bool) -> usize {
        let offset = self.total;
        self.slices.push(ParamSlice { name: name.into(), offset, len, trainable });
        self.total += len;
        offset
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// Trainable weight matrices and kernels, i.e. everything weight decay
    /// applies to.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.slices {
            let weight = s.name.ends_with(".weight") || s.name.ends_with(".weight_ih") || s.name.ends_with(".weight_hh");
            mask[s.offset..s.offset + s.len].fill(s.trainable && weight);
        }
        mask
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for s in &self.slices {
            mask[s.offset..s.offset + s.len].fill(s.trainable);
        }
        mask
    }
}

/// Per-sample activation shape.
pub type Shape = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d { in_c: usize, out_c: usize, k: usize, h: usize, w: usize, weight: usize, bias: usize },
    Relu,
    BatchNorm { c: usize, spatial: usize, gamma: usize, beta: usize, mean: usize, var: usize },
    MaxPool { c: usize, h: usize, w: usize, size: usize },
    /// Reads `[C, T, W]` as a length-`T` sequence of `C * W` features and
    /// emits the final hidden state.
    Lstm { c: usize, steps: usize, w: usize, hidden: usize, w_ih: usize, w_hh: usize, bias: usize },
    Dense { input: usize, output: usize, weight: usize, bias: usize },
}

/// Per-layer saved state. Which fields are used depends on the layer:
/// batch-norm keeps `xhat` and the inverse std, pooling keeps argmax indices,
/// the LSTM keeps its input sequence, gate activations, cells and hidden
/// states.
#[derive(Default)]
struct LayerCache<T> {
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    d: Vec<T>,
    idx: Vec<u32>,
}

/// Running-statistic update produced by a training-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_offset: usize,
    pub var_offset: usize,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

/// Activations and caches of one forward pass. Reusing a pass across calls
/// keeps its buffers allocated.
pub struct ForwardPass<T> {
    pub batch: usize,
    pub mode: Mode,
    /// Input followed by every layer's output. A ReLU takes over its input
    /// buffer, so the slot before a ReLU holds stale data.
    acts: Vec<Vec<T>>,
    caches: Vec<LayerCache<T>>,
    pub bn_updates: Vec<BnUpdate>,
    grad_a: Vec<T>,
    grad_b: Vec<T>,
}

impl<T> Default for ForwardPass<T> {
    fn default() -> Self {
        ForwardPass {
            batch: 0,
            mode: Mode::Infer,
            acts: Vec::new(),
            caches: Vec::new(),
            bn_updates: Vec::new(),
            grad_a: Vec::new(),
            grad_b: Vec::new(),
        }
    }
}

impl<T> ForwardPass<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn into_output(mut self) -> Vec<T> {
        self.acts.pop().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub shapes: Vec<Shape>,
    pub layout: ParamLayout,
}

fn numel(s: &Shape) -> usize {
    s[0] * s[1] * s[2]
}

fn reset<T: Scalar>(v: &mut Vec<T>, len: usize) {
    v.clear();
    v.resize(len, T::ZERO);
}

/// Sizes a buffer the caller overwrites completely, skipping the zero fill.
fn resize_stale<T: Clone + Default>(v: &mut Vec<T>, len: usize) {
    v.resize(len, T::default());
}

impl Network {
    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_len(&self) -> usize {
        numel(self.shapes.last().expect("network has shapes"))
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], batch: usize, mode: Mode) -> ForwardPass<T> {
        let mut pass = ForwardPass::default();
        self.forward_into(&mut pass, params, x, batch, mode);
        pass
    }

    pub fn forward_into<T: Scalar>(&self, pass: &mut ForwardPass<T>, params: &[T], x: &[T], batch: usize, mode: Mode) {
        assert_eq!(params.len(), self.layout.total, "parameter vector length");
        assert_eq!(x.len(), batch * numel(&self.shapes[0]), "input length");
        pass.batch = batch;
        pass.mode = mode;
        pass.bn_updates.clear();
        pass.acts.resize_with(self.layers.len() + 1, Vec::new);
        pass.caches.resize_with(self.layers.len(), LayerCache::default);
        pass.acts[0].clear();
        pass.acts[0].extend_from_slice(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let in_len = numel(&self.shapes[li]);
            let out_len = numel(&self.shapes[li + 1]);
            let (before, after) = pass.acts.split_at_mut(li + 1);
            let cur = &mut before[li];
            let out = &mut after[0];
            let cache = &mut pass.caches[li];
            match *layer {
                Layer::Conv2d { in_c, out_c, k, h, w, weight, bias } => {
                    let wt = &params[weight..weight + out_c * in_c * k * k];
                    let b = &params[bias..bias + out_c];
                    resize_stale(out, batch * out_len);
                    let col_len = in_c * k * k * h * w;
                    out.par_chunks_mut(out_len).zip(cur.par_chunks(in_len)).for_each_init(
                        || vec![T::ZERO; col_len],
                        |col, (o, xi)| conv_forward(in_c, out_c, k, h, w, wt, b, xi, o, col),
                    );
                }
                Layer::Relu => {
                    std::mem::swap(cur, out);
                    for v in out.iter_mut() {
                        if !(*v > T::ZERO) {
                            *v = T::ZERO;
                        }
                    }
                }
                Layer::BatchNorm { c, spatial, gamma, beta, mean, var } => {
                    resize_stale(out, cur.len());
                    resize_stale(&mut cache.a, cur.len());
                    resize_stale(&mut cache.b, c);
                    let upd = bn_forward(c, spatial, batch, cur, params, [gamma, beta, mean, var], mode, out, &mut cache.a, &mut cache.b);
                    pass.bn_updates.extend(upd);
                }
                Layer::MaxPool { c, h, w, size } => {
                    resize_stale(out, batch * out_len);
                    resize_stale(&mut cache.idx, batch * out_len);
                    for ((xs, os), ar) in cur.chunks(in_len).zip(out.chunks_mut(out_len)).zip(cache.idx.chunks_mut(out_len)) {
                        pool_forward(c, h, w, size, xs, os, ar);
                    }
                }
                Layer::Lstm { c, steps, w, hidden, w_ih, w_hh, bias } => {
                    let f = c * w;
                    let g = 4 * hidden;
                    let wit = transpose(&params[w_ih..w_ih + g * f], g, f);
                    let wht = transpose(&params[w_hh..w_hh + g * hidden], g, hidden);
                    let b = &params[bias..bias + g];
                    resize_stale(&mut cache.a, batch * steps * f);
                    resize_stale(&mut cache.b, batch * steps * g);
                    resize_stale(&mut cache.c, batch * steps * hidden);
                    resize_stale(&mut cache.d, batch * steps * hidden);
                    resize_stale(out, batch * hidden);
                    let ch = GRAD_CHUNK;
                    cache
                        .a
                        .par_chunks_mut(ch * steps * f)
                        .zip(cache.b.par_chunks_mut(ch * steps * g))
                        .zip(cache.c.par_chunks_mut(ch * steps * hidden))
                        .zip(cache.d.par_chunks_mut(ch * steps * hidden))
                        .zip(out.par_chunks_mut(ch * hidden))
                        .zip(cur.par_chunks(ch * in_len))
                        .for_each(|(((((sq, ga), ce), hi), o), xi)| {
                            let dims = LstmDims { c, steps, w, hidden, samples: xi.len() / in_len };
                            lstm_forward(&dims, &wit, &wht, b, xi, sq, ga, ce, hi, o);
                        });
                }
                Layer::Dense { input, output, weight, bias } => {
                    let wt = &params[weight..weight + output * input];
                    let b = &params[bias..bias + output];
                    resize_stale(out, batch * output);
                    for row in out.chunks_mut(output) {
                        row.copy_from_slice(b);
                    }
                    gemm_nt(batch, output, input, cur, wt, out);
                }
            }
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the network output. Entries for non-trainable buffers
    /// stay zero.
    pub fn backward<T: Scalar>(&self, params: &[T], pass: &mut ForwardPass<T>, d_out: &[T]) -> Vec<T> {
        let batch = pass.batch;
        assert_eq!(d_out.len(), pass.output().len(), "output gradient length");
        let mut grad = vec![T::ZERO; self.layout.total];
        let mut dy = std::mem::take(&mut pass.grad_a);
        let mut dx = std::mem::take(&mut pass.grad_b);
        dy.clear();
        dy.extend_from_slice(d_out);
        for li in (0..self.layers.len()).rev() {
            let need_dx = li > 0;
            let in_len = numel(&self.shapes[li]);
            let out_len = numel(&self.shapes[li + 1]);
            let x: &[T] = &pass.acts[li];
            let cache = &pass.caches[li];
            match self.layers[li] {
                Layer::Conv2d { in_c, out_c, k, h, w, weight, bias } => {
                    let kk = in_c * k * k;
                    let col_len = kk * h * w;
                    let wt = &params[weight..weight + out_c * kk];
                    let partials = chunked_partials(batch, out_c * kk + out_c, &mut [], 0, col_len, |samples, g, _, col| {
                        let (gw, gb) = g.split_at_mut(out_c * kk);
                        for s in samples {
                            let xs = &x[s * in_len..(s + 1) * in_len];
                            conv_param_grad(in_c, out_c, k, h, w, xs, &dy[s * out_len..(s + 1) * out_len], gw, gb, col);
                        }
                    });
                    grad[weight..weight + out_c * kk].copy_from_slice(&partials[..out_c * kk]);
                    grad[bias..bias + out_c].copy_from_slice(&partials[out_c * kk..]);
                    if need_dx {
                        reset(&mut dx, batch * in_len);
                        dx.par_chunks_mut(in_len).zip(dy.par_chunks(out_len)).for_each_init(
                            || vec![T::ZERO; col_len],
                            |col, (dxs, dys)| conv_input_grad(in_c, out_c, k, h, w, wt, dys, dxs, col),
                        );
                    }
                }
                Layer::Relu => {
                    for (d, &v) in dy.iter_mut().zip(&pass.acts[li + 1]) {
                        if !(v > T::ZERO) {
                            *d = T::ZERO;
                        }
                    }
                    continue;
                }
                Layer::BatchNorm { c, spatial, gamma, beta, .. } => {
                    let (xhat, inv_std) = (&cache.a, &cache.b);
                    let g = &params[gamma..gamma + c];
                    let n = (batch * spatial) as f64;
                    for ch in 0..c {
                        let planes = (0..batch).map(|s| (s * c + ch) * spatial..(s * c + ch + 1) * spatial);
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for r in planes.clone() {
                            sum_dy += sum(&dy[r.clone()]).to_f64();
                            sum_dy_xhat += dot(&dy[r.clone()], &xhat[r]).to_f64();
                        }
                        grad[gamma + ch] = T::from_f64(sum_dy_xhat);
                        grad[beta + ch] = T::from_f64(sum_dy);
                        let scale = g[ch] * inv_std[ch];
                        let (m_dy, m_dyx) = match pass.mode {
                            Mode::Infer => (T::ZERO, T::ZERO),
                            Mode::Train => (T::from_f64(sum_dy / n), T::from_f64(sum_dy_xhat / n)),
                        };
                        for r in planes {
                            for (d, &xh) in dy[r.clone()].iter_mut().zip(&xhat[r]) {
                                *d = scale * (*d - m_dy - xh * m_dyx);
                            }
                        }
                    }
                    continue;
                }
                Layer::MaxPool { h, w, size, .. } => {
                    let exact = size == 2 && h % 2 == 0 && w % 2 == 0;
                    if exact {
                        resize_stale(&mut dx, batch * in_len);
                    } else {
                        reset(&mut dx, batch * in_len);
                    }
                    for ((dxs, ar), dys) in dx.chunks_mut(in_len).zip(cache.idx.chunks(out_len)).zip(dy.chunks(out_len)) {
                        if exact {
                            let ow = w / 2;
                            for ((rows, ar), dys) in dxs.chunks_exact_mut(2 * w).zip(ar.chunks_exact(ow)).zip(dys.chunks_exact(ow)) {
                                pool2_row_grad(rows, ar, dys);
                            }
                            continue;
                        }
                        for (&a, &d) in ar.iter().zip(dys) {
                            dxs[a as usize] += d;
                        }
                    }
                }
                Layer::Lstm { c, steps, w, hidden, w_ih, w_hh, bias } => {
                    let (seq, gates, cells, hid) = (&cache.a, &cache.b, &cache.c, &cache.d);
                    let f = c * w;
                    let g = 4 * hidden;
                    let wi = &params[w_ih..w_ih + g * f];
                    let wh = &params[w_hh..w_hh + g * hidden];
                    resize_stale(&mut dx, if need_dx { batch * in_len } else { 0 });
                    let plen = g * f + g * hidden + g;
                    let partials = chunked_partials(batch, plen, &mut dx, in_len, 0, |samples, pg, dxs, _| {
                        let (gwi, rest) = pg.split_at_mut(g * f);
                        let (gwh, gb) = rest.split_at_mut(g * hidden);
                        let dims = LstmDims { c, steps, w, hidden, samples: samples.len() };
                        let (s0, s1) = (samples.start * steps, samples.end * steps);
                        lstm_backward(
                            &dims,
                            wi,
                            wh,
                            &seq[s0 * f..s1 * f],
                            &gates[s0 * g..s1 * g],
                            &cells[s0 * hidden..s1 * hidden],
                            &hid[s0 * hidden..s1 * hidden],
                            &dy[samples.start * hidden..samples.end * hidden],
                            gwi,
                            gwh,
                            gb,
                            (!dxs.is_empty()).then_some(dxs),
                        );
                    });
                    grad[w_ih..w_ih + g * f].copy_from_slice(&partials[..g * f]);
                    grad[w_hh..w_hh + g * hidden].copy_from_slice(&partials[g * f..g * f + g * hidden]);
                    grad[bias..bias + g].copy_from_slice(&partials[g * f + g * hidden..]);
                }
                Layer::Dense { input, output, weight, bias } => {
                    let wt = &params[weight..weight + output * input];
                    gemm(output, input, batch, &dy, 1, output, x, &mut grad[weight..weight + output * input]);
                    for row in dy.chunks(output) {
                        for (gb, &d) in grad[bias..bias + output].iter_mut().zip(row) {
                            *gb += d;
                        }
                    }
                    reset(&mut dx, if need_dx { batch * input } else { 0 });
                    if need_dx {
                        gemm(batch, input, output, &dy, output, 1, wt, &mut dx);
                    }
                }
            }
            std::mem::swap(&mut dy, &mut dx);
        }
        pass.grad_a = dy;
        pass.grad_b = dx;
        grad
    }
}

/// Runs `f(samples, partial, chunk_out, scratch)` over fixed chunks of
/// samples and sums the chunk partials in chunk order. `out` holds `out_len`
/// values per sample and may be empty when no per-sample output is wanted.
fn chunked_partials<T: Scalar, F>(batch: usize, len: usize, out: &mut [T], out_len: usize, scratch: usize, f: F) -> Vec<T>
where
    F: Fn(std::ops::Range<usize>, &mut [T], &mut [T], &mut [T]) + Sync,
{
    let run = |ci: usize, o: &mut [T]| {
        let mut g = vec![T::ZERO; len];
        let mut tmp = vec![T::ZERO; scratch];
        f(ci * GRAD_CHUNK..((ci + 1) * GRAD_CHUNK).min(batch), &mut g, o, &mut tmp);
        g
    };
    let parts: Vec<Vec<T>> = if out.is_empty() {
        (0..batch.div_ceil(GRAD_CHUNK)).into_par_iter().map(|ci| run(ci, &mut [])).collect()
    } else {
        out.par_chunks_mut(GRAD_CHUNK * out_len).enumerate().map(|(ci, o)| run(ci, o)).collect()
    };
    let mut total = vec![T::ZERO; len];
    for p in &parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += *v;
        }
    }
    total
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::ZERO; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn im2col<T: Scalar>(in_c: usize, k: usize, h: usize, w: usize, x: &[T], col: &mut [T]) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for ic in 0..in_c {
        let plane = &x[ic * p..(ic + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ic * k + ky) * k + kx) * p..][..p];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::ZERO);
                    dst[x1..].fill(T::ZERO);
                    let off = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[off..off + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(in_c: usize, k: usize, h: usize, w: usize, col: &[T], dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let p = h * w;
    for ic in 0..in_c {
        let plane = &mut dx[ic * p..(ic + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ic * k + ky) * k + kx) * p..][..p];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                let x0 = (-ddx).max(0) as usize;
                let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let off = (x0 as isize + ddx) as usize;
                    let dst = &mut plane[sy as usize * w + off..sy as usize * w + off + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(in_c: usize, out_c: usize, k: usize, h: usize, w: usize, wt: &[T], b: &[T], x: &[T], out: &mut [T], col: &mut [T]) {
    let p = h * w;
    let kk = in_c * k * k;
    im2col(in_c, k, h, w, x, col);
    for (oc, plane) in out.chunks_mut(p).enumerate() {
        plane.fill(b[oc]);
    }
    gemm(out_c, p, kk, wt, kk, 1, col, out);
}

#[allow(clippy::too_many_arguments)]
fn conv_param_grad<T: Scalar>(in_c: usize, out_c: usize, k: usize, h: usize, w: usize, x: &[T], dy: &[T], gw: &mut [T], gb: &mut [T], col: &mut [T]) {
    let p = h * w;
    let kk = in_c * k * k;
    im2col(in_c, k, h, w, x, col);
    gemm_nt(out_c, kk, p, dy, col, gw);
    for (oc, g) in gb.iter_mut().enumerate() {
        *g += sum(&dy[oc * p..(oc + 1) * p]);
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_input_grad<T: Scalar>(in_c: usize, out_c: usize, k: usize, h: usize, w: usize, wt: &[T], dy: &[T], dx: &mut [T], dcol: &mut [T]) {
    let p = h * w;
    let kk = in_c * k * k;
    dcol.fill(T::ZERO);
    gemm(kk, p, out_c, wt, 1, kk, dy, dcol);
    col2im(in_c, k, h, w, dcol, dx);
}

#[allow(clippy::too_many_arguments)]
fn bn_forward<T: Scalar>(
    c: usize,
    spatial: usize,
    batch: usize,
    x: &[T],
    params: &[T],
    [gamma, beta, mean, var]: [usize; 4],
    mode: Mode,
    out: &mut [T],
    xhat: &mut [T],
    inv_std: &mut [T],
) -> Option<BnUpdate> {
    let n = batch * spatial;
    let mut batch_mean = vec![0.0; c];
    let mut batch_var = vec![0.0; c];
    for ch in 0..c {
        let planes = (0..batch).map(|s| (s * c + ch) * spatial..(s * c + ch + 1) * spatial);
        let (mu, v) = match mode {
            Mode::Train => {
                let mu = planes.clone().map(|r| sum(&x[r]).to_f64()).sum::<f64>() / n as f64;
                let mt = T::from_f64(mu);
                let ss = planes.clone().map(|r| sq_dev(&x[r], mt).to_f64()).sum::<f64>();
                batch_mean[ch] = mu;
                batch_var[ch] = if n > 1 { ss / (n - 1) as f64 } else { ss };
                (mu, ss / n as f64)
            }
            Mode::Infer => (params[mean + ch].to_f64(), params[var + ch].to_f64()),
        };
        let is = T::from_f64(1.0 / (v + BN_EPS).sqrt());
        inv_std[ch] = is;
        let mu = T::from_f64(mu);
        let g = params[gamma + ch];
        let bt = params[beta + ch];
        for r in planes {
            for ((o, xh), &xv) in out[r.clone()].iter_mut().zip(&mut xhat[r.clone()]).zip(&x[r]) {
                *xh = (xv - mu) * is;
                *o = g * *xh + bt;
            }
        }
    }
    (mode == Mode::Train).then_some(BnUpdate {
        mean_offset: mean,
        var_offset: var,
        batch_mean,
        batch_var_unbiased: batch_var,
    })
}

fn pool_forward<T: Scalar>(c: usize, h: usize, w: usize, size: usize, x: &[T], out: &mut [T], arg: &mut [u32]) {
    let oh = h / size;
    let ow = w / size;
    if size == 2 {
        for ch in 0..c {
            for oy in 0..oh {
                let top = ch * h * w + 2 * oy * w;
                let orow = (ch * oh + oy) * ow;
                pool2_row(&x[top..top + w], &x[top + w..top + 2 * w], top as u32, w as u32, &mut out[orow..orow + ow], &mut arg[orow..orow + ow]);
            }
        }
        return;
    }
    for ch in 0..c {
        let plane = ch * h * w;
        for oy in 0..oh {
            let orow = (ch * oh + oy) * ow;
            let (o, a) = (&mut out[orow..orow + ow], &mut arg[orow..orow + ow]);
            let top = plane + oy * size * w;
            for ox in 0..ow {
                let mut best = top + ox * size;
                let mut bv = x[best];
                for dy in 0..size {
                    let r = top + dy * w + ox * size;
                    for (i, &v) in (r..r + size).zip(&x[r..r + size]) {
                        // Selects rather than branches: the comparison is
                        // unpredictable on real activations.
                        let take = v > bv;
                        bv = if take { v } else { bv };
                        best = if take { i } else { best };
                    }
                }
                o[ox] = bv;
                a[ox] = best as u32;
            }
        }
    }
}

/// One output row of a 2x2 pool. Candidates are visited in row-major order
/// and only a strictly larger value displaces the current best, matching the
/// general path.
fn pool2_row<T: Scalar>(r0: &[T], r1: &[T], base: u32, w: u32, out: &mut [T], arg: &mut [u32]) {
    let pairs = r0.chunks_exact(2).zip(r1.chunks_exact(2));
    for (ox, ((a, b), (o, g))) in pairs.zip(out.iter_mut().zip(arg.iter_mut())).enumerate() {
        let (m1, i1) = if a[1] > a[0] { (a[1], 1) } else { (a[0], 0) };
        let (m2, i2) = if b[1] > b[0] { (b[1], w + 1) } else { (b[0], w) };
        let take = m2 > m1;
        *o = if take { m2 } else { m1 };
        *g = base + 2 * ox as u32 + if take { i2 } else { i1 };
    }
}

/// Writes the gradient for two input rows of a 2x2 pool, zeros included.
fn pool2_row_grad<T: Scalar>(rows: &mut [T], arg: &[u32], dy: &[T]) {
    let w = rows.len() / 2;
    let (r0, r1) = rows.split_at_mut(w);
    for (((a, b), &g), &d) in r0.chunks_exact_mut(2).zip(r1.chunks_exact_mut(2)).zip(arg).zip(dy) {
        // Offset of the winner within the 2x2 block, recovered from its
        // absolute index.
        let g = g as usize;
        let col = g % w % 2;
        let row = (g / w) % 2;
        let sel = [row == 0 && col == 0, row == 0 && col == 1, row == 1 && col == 0, row == 1 && col == 1];
        a[0] = if sel[0] { d } else { T::ZERO };
        a[1] = if sel[1] { d } else { T::ZERO };
        b[0] = if sel[2] { d } else { T::ZERO };
        b[1] = if sel[3] { d } else { T::ZERO };
    }
}

struct LstmDims {
    c: usize,
    steps: usize,
    w: usize,
    hidden: usize,
    samples: usize,
}

/// Runs a chunk of samples through the LSTM. Buffers are time-major: row
/// `t * samples + s`. Gate order within each 4H row: input, forget, cell,
/// output.
#[allow(clippy::too_many_arguments)]
fn lstm_forward<T: Scalar>(
    d: &LstmDims,
    wit: &[T],
    wht: &[T],
    b: &[T],
    x: &[T],
    seq: &mut [T],
    gates: &mut [T],
    cells: &mut [T],
    hid: &mut [T],
    out: &mut [T],
) {
    let LstmDims { c, steps, w, hidden, samples: ns } = *d;
    let f = c * w;
    let g = 4 * hidden;
    let in_len = c * steps * w;
    for s in 0..ns {
        for t in 0..steps {
            for ch in 0..c {
                let src = s * in_len + (ch * steps + t) * w;
                let dst = (t * ns + s) * f + ch * w;
                seq[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    for row in gates.chunks_mut(g) {
        row.copy_from_slice(b);
    }
    gemm(steps * ns, g, f, seq, f, 1, wit, gates);
    for t in 0..steps {
        if t > 0 {
            let prev = &hid[(t - 1) * ns * hidden..t * ns * hidden];
            gemm(ns, g, hidden, prev, hidden, 1, wht, &mut gates[t * ns * g..(t + 1) * ns * g]);
        }
        for s in 0..ns {
            let row = t * ns + s;
            let a = &mut gates[row * g..(row + 1) * g];
            for j in 0..hidden {
                a[j] = a[j].sigmoid();
                a[hidden + j] = a[hidden + j].sigmoid();
                a[2 * hidden + j] = a[2 * hidden + j].tanh();
                a[3 * hidden + j] = a[3 * hidden + j].sigmoid();
                let prev_c = if t == 0 { T::ZERO } else { cells[(row - ns) * hidden + j] };
                let cell = a[hidden + j] * prev_c + a[j] * a[2 * hidden + j];
                cells[row * hidden + j] = cell;
                hid[row * hidden + j] = a[3 * hidden + j] * cell.tanh();
            }
        }
    }
    out.copy_from_slice(&hid[(steps - 1) * ns * hidden..steps * ns * hidden]);
}

#[allow(clippy::too_many_arguments)]
fn lstm_backward<T: Scalar>(
    d: &LstmDims,
    wi: &[T],
    wh: &[T],
    seq: &[T],
    gates: &[T],
    cells: &[T],
    hid: &[T],
    dh_last: &[T],
    gwi: &mut [T],
    gwh: &mut [T],
    gb: &mut [T],
    dx: Option<&mut [T]>,
) {
    let LstmDims { c, steps, w, hidden, samples: ns } = *d;
    let f = c * w;
    let g = 4 * hidden;
    let mut dgates = vec![T::ZERO; steps * ns * g];
    let mut dh = dh_last.to_vec();
    let mut dc = vec![T::ZERO; ns * hidden];
    for t in (0..steps).rev() {
        for s in 0..ns {
            let row = t * ns + s;
            let a = &gates[row * g..(row + 1) * g];
            let dg = &mut dgates[row * g..(row + 1) * g];
            for j in 0..hidden {
                let (i, fg, cg, o) = (a[j], a[hidden + j], a[2 * hidden + j], a[3 * hidden + j]);
                let c_prev = if t == 0 { T::ZERO } else { cells[(row - ns) * hidden + j] };
                let tc = cells[row * hidden + j].tanh();
                let dhv = dh[s * hidden + j];
                let dcell = dc[s * hidden + j] + dhv * o * (T::ONE - tc * tc);
                dg[j] = dcell * cg * i * (T::ONE - i);
                dg[hidden + j] = dcell * c_prev * fg * (T::ONE - fg);
                dg[2 * hidden + j] = dcell * i * (T::ONE - cg * cg);
                dg[3 * hidden + j] = dhv * tc * o * (T::ONE - o);
                dc[s * hidden + j] = dcell * fg;
            }
        }
        if t > 0 {
            dh.fill(T::ZERO);
            gemm(ns, hidden, g, &dgates[t * ns * g..], g, 1, wh, &mut dh);
        }
    }
    gemm(g, f, steps * ns, &dgates, 1, g, seq, gwi);
    if steps > 1 {
        gemm(g, hidden, (steps - 1) * ns, &dgates[ns * g..], 1, g, &hid[..(steps - 1) * ns * hidden], gwh);
    }
    for row in dgates.chunks(g) {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    if let Some(dx) = dx {
        let mut dseq = vec![T::ZERO; steps * ns * f];
        gemm(steps * ns, f, g, &dgates, g, 1, wi, &mut dseq);
        let in_len = c * steps * w;
        for s in 0..ns {
            for t in 0..steps {
                for ch in 0..c {
                    let dst = s * in_len + (ch * steps + t) * w;
                    let src = (t * ns + s) * f + ch * w;
                    dx[dst..dst + w].copy_from_slice(&dseq[src..src + w]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let (c, k, h, w) = (2, 3, 5, 7);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..c * k * k * h * w).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut col = vec![0.0; y.len()];
        im2col(c, k, h, w, &x, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(c, k, h, w, &y, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn size_two_pooling_matches_general_path() {
        let (c, h, w) = (2, 6, 8);
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7) % 5) as f64).collect();
        let mut out = vec![0.0; c * 3 * 4];
        let mut arg = vec![0u32; out.len()];
        pool_forward(c, h, w, 2, &x, &mut out, &mut arg);
        for ch in 0..c {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                    for i in [best + 1, best + w, best + w + 1] {
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    let o = (ch * 3 + oy) * 4 + ox;
                    assert_eq!((out[o], arg[o] as usize), (x[best], best));
                }
            }
        }
    }

    #[test]
    fn pooling_picks_block_maxima() {
        let x = [1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0];
        let mut out = [0.0; 2];
        let mut arg = [0u32; 2];
        pool_forward(1, 2, 4, 2, &x, &mut out, &mut arg);
        assert_eq!(out, [5.0, 7.0]);
        assert_eq!(arg, [1, 7]);
    }
}
