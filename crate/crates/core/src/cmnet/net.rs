//! Batched forward and backward passes.
//!
//! Activations of the convolutional stage are kept as `[channels, B * H * W]`
//! matrices so both convolutions become one GEMM over an im2col buffer.
//! The dense stage works on `[B, features]` row matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::params::{CmnetParams, Gradients};
use crate::error::{Error, Result};
use crate::features::Planes;
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Softmax class scores of one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub p1: f64,
    pub p0: f64,
    pub logit1: f64,
    pub logit0: f64,
}

impl Scores {
    fn from_logits(logit0: f64, logit1: f64) -> Self {
        let top = logit0.max(logit1);
        let e0 = (logit0 - top).exp();
        let e1 = (logit1 - top).exp();
        let s = e0 + e1;
        Self {
            p1: e1 / s,
            p0: e0 / s,
            logit1,
            logit0,
        }
    }

    pub fn prob(&self, label: u8) -> f64 {
        if label == 1 {
            self.p1
        } else {
            self.p0
        }
    }
}

/// Mean cross-entropy `-(1/K) sum [z ln p1 + (1 - z) ln p0]`, log argument clamped at 1e-12.
pub fn loss(scores: &[Scores], labels: &[u8]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    assert!(!scores.is_empty());
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(s, &z)| -s.prob(z).max(1e-12).ln())
        .sum();
    total / scores.len() as f64
}

fn check_batch(params: &CmnetParams, batch: &[&Planes]) -> Result<()> {
    let m = params.arch.input_dim;
    if batch.is_empty() {
        return Err(Error::InvalidParams("empty batch".into()));
    }
    if params.arch.in_channels != 2 {
        return Err(Error::dim("2 input channels", params.arch.in_channels));
    }
    if let Some(bad) = batch.iter().find(|p| p.m() != m) {
        return Err(Error::dim(format!("{m}x{m} planes"), format!("{0}x{0}", bad.m())));
    }
    Ok(())
}

fn stack_input(batch: &[&Planes], m: usize) -> Array2<f64> {
    let hw = m * m;
    let mut x = Array2::zeros((2, batch.len() * hw));
    for (b, planes) in batch.iter().enumerate() {
        let data = planes.as_slice();
        for c in 0..2 {
            x.row_mut(c)
                .as_slice_mut()
                .unwrap()[b * hw..(b + 1) * hw]
                .copy_from_slice(&data[c * hw..(c + 1) * hw]);
        }
    }
    x
}

struct ConvGeom {
    channels: usize,
    batch: usize,
    size: usize,
    out: usize,
    k: usize,
    pad: usize,
}

fn im2col(x: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (n, o, k) = (g.size, g.out, g.k);
    let mut cols = Array2::zeros((g.channels * k * k, g.batch * o * o));
    for c in 0..g.channels {
        let src = x.row(c);
        let src = src.as_slice().unwrap();
        for ki in 0..k {
            for kj in 0..k {
                let mut dst = cols.row_mut(c * k * k + ki * k + kj);
                let dst = dst.as_slice_mut().unwrap();
                for b in 0..g.batch {
                    for oi in 0..o {
                        let ii = (oi + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= n as isize {
                            continue;
                        }
                        let srow = &src[b * n * n + ii as usize * n..][..n];
                        let drow = &mut dst[b * o * o + oi * o..][..o];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = (oj + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < n as isize {
                                *d = srow[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (n, o, k) = (g.size, g.out, g.k);
    let mut x = Array2::zeros((g.channels, g.batch * n * n));
    for c in 0..g.channels {
        let mut dst = x.row_mut(c);
        let dst = dst.as_slice_mut().unwrap();
        for ki in 0..k {
            for kj in 0..k {
                let src = cols.row(c * k * k + ki * k + kj);
                let src = src.as_slice().unwrap();
                for b in 0..g.batch {
                    for oi in 0..o {
                        let ii = (oi + ki) as isize - g.pad as isize;
                        if ii < 0 || ii >= n as isize {
                            continue;
                        }
                        let drow = &mut dst[b * n * n + ii as usize * n..][..n];
                        let srow = &src[b * o * o + oi * o..][..o];
                        for (oj, s) in srow.iter().enumerate() {
                            let jj = (oj + kj) as isize - g.pad as isize;
                            if jj >= 0 && jj < n as isize {
                                drow[jj as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `relu(W cols + b)` as `[filters, B * out * out]`.
fn conv_layer(w: &Array2<f64>, bias: &Array1<f64>, cols: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((w.nrows(), cols.ncols()));
    general_mat_mul(1.0, w, cols, 0.0, &mut out);
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row.mapv_inplace(|v| (v + b).max(0.0));
    }
    out
}

struct ConvCache {
    cols1: Array2<f64>,
    a1: Array2<f64>,
    cols2: Array2<f64>,
    a2: Array2<f64>,
    /// For every `(b, feature)`, the column of `a2` that won the max-pool.
    argmax: Array2<usize>,
}

fn geometries(params: &CmnetParams, batch: usize) -> (ConvGeom, ConvGeom) {
    let a = &params.arch;
    (
        ConvGeom {
            channels: a.in_channels,
            batch,
            size: a.input_dim,
            out: a.conv1_out(),
            k: a.kernel,
            pad: a.pad(),
        },
        ConvGeom {
            channels: a.conv1_filters,
            batch,
            size: a.conv1_out(),
            out: a.conv2_out(),
            k: a.kernel,
            pad: a.pad(),
        },
    )
}

fn conv_stage(params: &CmnetParams, batch: &[&Planes]) -> (Array2<f64>, ConvCache) {
    let a = &params.arch;
    let nb = batch.len();
    let (g1, g2) = geometries(params, nb);
    let x = stack_input(batch, a.input_dim);
    let cols1 = im2col(&x, &g1);
    let a1 = conv_layer(&params.conv1_w, &params.conv1_b, &cols1);
    let cols2 = im2col(&a1, &g2);
    let a2 = conv_layer(&params.conv2_w, &params.conv2_b, &cols2);

    let (o, pool, ph) = (a.conv2_out(), a.pool, a.pooled());
    let per_channel = ph * ph;
    let mut feat = Array2::zeros((nb, a.flatten_len()));
    let mut argmax = Array2::zeros((nb, a.flatten_len()));
    for c in 0..a.conv2_filters {
        let row = a2.row(c);
        let row = row.as_slice().unwrap();
        for b in 0..nb {
            for pi in 0..ph {
                for pj in 0..ph {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for di in 0..pool {
                        for dj in 0..pool {
                            let idx = b * o * o + (pi * pool + di) * o + pj * pool + dj;
                            if row[idx] > best {
                                best = row[idx];
                                at = idx;
                            }
                        }
                    }
                    let f = c * per_channel + pi * ph + pj;
                    feat[[b, f]] = best;
                    argmax[[b, f]] = at;
                }
            }
        }
    }
    (
        feat,
        ConvCache {
            cols1,
            a1,
            cols2,
            a2,
            argmax,
        },
    )
}

/// Flattened, pooled convolution features `[B, flatten_len]`. Deterministic:
/// the first dropout layer comes after this point.
pub fn conv_features(params: &CmnetParams, batch: &[&Planes]) -> Result<Array2<f64>> {
    check_batch(params, batch)?;
    Ok(conv_stage(params, batch).0)
}

fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), q: f64, rng: &mut R) -> Option<Array2<f64>> {
    if q <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - q);
    // 32-bit uniforms: exact for the 0.5 and 0.25 rates and half the stream cost
    let cut = (q * 4_294_967_296.0).round() as u64;
    let mut mask = Array2::zeros(shape);
    mask.iter_mut().for_each(|v| {
        *v = if u64::from(rng.next_u32()) < cut { 0.0 } else { keep };
    });
    Some(mask)
}

struct HeadCache {
    /// Features after the first dropout.
    input: Array2<f64>,
    mask1: Option<Array2<f64>>,
    z1: Array2<f64>,
    /// Hidden activations after ReLU and the second dropout.
    hidden: Array2<f64>,
    mask2: Option<Array2<f64>>,
    scores: Vec<Scores>,
}

fn dense(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), w.nrows()));
    general_mat_mul(1.0, x, &w.t(), 0.0, &mut out);
    out += b;
    out
}

fn head_stage<R: Rng + ?Sized>(
    params: &CmnetParams,
    mut feat: Array2<f64>,
    dropout: Option<&mut R>,
) -> HeadCache {
    let (q1, q2) = params.arch.drop_probs();
    let (mask1, rng) = match dropout {
        Some(rng) => (dropout_mask(feat.dim(), q1, rng), Some(rng)),
        None => (None, None),
    };
    if let Some(m) = &mask1 {
        feat *= m;
    }
    let z1 = dense(&feat, &params.fc1_w, &params.fc1_b);
    let mut hidden = z1.mapv(|v| v.max(0.0));
    let mask2 = rng.and_then(|rng| dropout_mask(hidden.dim(), q2, rng));
    if let Some(m) = &mask2 {
        hidden *= m;
    }
    let logits = dense(&hidden, &params.fc2_w, &params.fc2_b);
    // column 0 is H0, column 1 is H1
    let scores = logits
        .axis_iter(Axis(0))
        .map(|l| Scores::from_logits(l[0], l[1]))
        .collect();
    HeadCache {
        input: feat,
        mask1,
        z1,
        hidden,
        mask2,
        scores,
    }
}

/// Dense-stage gradients; `grads` must be zeroed for the dense tensors.
/// Returns the gradient with respect to the pre-dropout features when asked.
fn head_backward(
    params: &CmnetParams,
    cache: &HeadCache,
    labels: &[u8],
    grads: &mut Gradients,
    want_input_grad: bool,
) -> Option<Array2<f64>> {
    let nb = labels.len() as f64;
    let mut dlogits = Array2::zeros((labels.len(), 2));
    for (b, (s, &z)) in cache.scores.iter().zip(labels).enumerate() {
        dlogits[[b, 0]] = (s.p0 - if z == 0 { 1.0 } else { 0.0 }) / nb;
        dlogits[[b, 1]] = (s.p1 - if z == 1 { 1.0 } else { 0.0 }) / nb;
    }
    general_mat_mul(1.0, &dlogits.t(), &cache.hidden, 0.0, &mut grads.fc2_w);
    grads.fc2_b = dlogits.sum_axis(Axis(0));

    let mut dz1 = dlogits.dot(&params.fc2_w);
    if let Some(m) = &cache.mask2 {
        dz1 *= m;
    }
    dz1.zip_mut_with(&cache.z1, |d, &z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    general_mat_mul(1.0, &dz1.t(), &cache.input, 0.0, &mut grads.fc1_w);
    grads.fc1_b = dz1.sum_axis(Axis(0));

    if !want_input_grad {
        return None;
    }
    let mut dfeat = dz1.dot(&params.fc1_w);
    if let Some(m) = &cache.mask1 {
        dfeat *= m;
    }
    Some(dfeat)
}

fn conv_backward(params: &CmnetParams, cache: &ConvCache, dfeat: &Array2<f64>, grads: &mut Gradients) {
    let nb = dfeat.nrows();
    let (_, g2) = geometries(params, nb);
    let per_channel = params.arch.pooled() * params.arch.pooled();

    let mut da2 = Array2::zeros(cache.a2.raw_dim());
    for b in 0..nb {
        for (f, &d) in dfeat.row(b).iter().enumerate() {
            let c = f / per_channel;
            da2[[c, cache.argmax[[b, f]]]] += d;
        }
    }
    da2.zip_mut_with(&cache.a2, |d, &a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    general_mat_mul(1.0, &da2, &cache.cols2.t(), 0.0, &mut grads.conv2_w);
    grads.conv2_b = da2.sum_axis(Axis(1));

    let mut dcols2 = Array2::zeros(cache.cols2.raw_dim());
    general_mat_mul(1.0, &params.conv2_w.t(), &da2, 0.0, &mut dcols2);
    let mut da1 = col2im(&dcols2, &g2);
    drop(dcols2);
    da1.zip_mut_with(&cache.a1, |d, &a| {
        if a <= 0.0 {
            *d = 0.0
        }
    });
    general_mat_mul(1.0, &da1, &cache.cols1.t(), 0.0, &mut grads.conv1_w);
    grads.conv1_b = da1.sum_axis(Axis(1));
}

/// Class scores for a batch. Train mode draws dropout masks from `rng`; eval
/// mode ignores it.
pub fn forward_batch<R: Rng + ?Sized>(
    params: &CmnetParams,
    batch: &[&Planes],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Scores>> {
    let feat = conv_features(params, batch)?;
    Ok(head_scores(params, feat, mode, rng))
}

/// Dense stage only, from precomputed [`conv_features`].
pub fn head_scores<R: Rng + ?Sized>(
    params: &CmnetParams,
    feat: Array2<f64>,
    mode: Mode,
    rng: &mut R,
) -> Vec<Scores> {
    match mode {
        Mode::Train => head_stage(params, feat, Some(rng)).scores,
        Mode::Eval => head_stage::<SimRng>(params, feat, None).scores,
    }
}

pub fn forward<R: Rng + ?Sized>(
    params: &CmnetParams,
    planes: &Planes,
    mode: Mode,
    rng: &mut R,
) -> Result<Scores> {
    Ok(forward_batch(params, &[planes], mode, rng)?[0])
}

/// Eval-mode scores (dropout disabled).
pub fn forward_eval(params: &CmnetParams, planes: &Planes) -> Result<Scores> {
    Ok(forward_eval_batch(params, &[planes])?[0])
}

pub fn forward_eval_batch(params: &CmnetParams, batch: &[&Planes]) -> Result<Vec<Scores>> {
    let feat = conv_features(params, batch)?;
    Ok(head_stage::<SimRng>(params, feat, None).scores)
}

/// Mean loss over the batch and its exact gradient. In train mode one pair
/// of dropout masks is drawn from `rng` and shared by both passes. With
/// `freeze_conv` the convolution gradients are left at zero and not computed.
pub fn backward<R: Rng + ?Sized>(
    params: &CmnetParams,
    batch: &[&Planes],
    labels: &[u8],
    mode: Mode,
    rng: &mut R,
    freeze_conv: bool,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    check_labels(batch.len(), labels)?;
    let mut grads = Gradients::zeros_like(params);
    let (feat, conv_cache) = conv_stage(params, batch);
    let cache = match mode {
        Mode::Train => head_stage(params, feat, Some(rng)),
        Mode::Eval => head_stage::<SimRng>(params, feat, None),
    };
    let dfeat = head_backward(params, &cache, labels, &mut grads, !freeze_conv);
    if let Some(dfeat) = dfeat {
        conv_backward(params, &conv_cache, &dfeat, &mut grads);
    }
    Ok((loss(&cache.scores, labels), grads))
}

/// Loss and dense-layer gradients from precomputed convolution features.
pub fn backward_head<R: Rng + ?Sized>(
    params: &CmnetParams,
    feat: Array2<f64>,
    labels: &[u8],
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    check_labels(feat.nrows(), labels)?;
    if feat.ncols() != params.arch.flatten_len() {
        return Err(Error::dim(params.arch.flatten_len(), feat.ncols()));
    }
    let mut grads = Gradients::zeros_like(params);
    let cache = match mode {
        Mode::Train => head_stage(params, feat, Some(rng)),
        Mode::Eval => head_stage::<SimRng>(params, feat, None),
    };
    head_backward(params, &cache, labels, &mut grads, false);
    Ok((loss(&cache.scores, labels), grads))
}

fn check_labels(n: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(format!("{n} labels"), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&z| z > 1) {
        return Err(Error::InvalidParams(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}
