//! Layer primitives: float convolution, batch norm, activations, pooling,
//! fully connected, softmax cross-entropy, and the quantize-then-convolve
//! layer ops with their gradient counterparts.

use rayon::prelude::*;

use crate::conv::{lowbit_conv, ConvGeometry};
use crate::error::{MlsError, Result};
use crate::quant::{quantize, MlsTensor, QuantConfig};
use crate::tensor::{RngStream, Tensor4};

/// A learnable tensor with its gradient and momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    pub velocity: Tensor4,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Param {
        let dims = value.dims();
        Param {
            name: name.into(),
            value,
            grad: Tensor4::zeros(dims),
            velocity: Tensor4::zeros(dims),
        }
    }
}

fn shape_err(what: &str, a: [usize; 4], b: [usize; 4]) -> MlsError {
    MlsError::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

// ---------------------------------------------------------------------------
// float convolution (reference engine path for unquantized and lossless layers)
// ---------------------------------------------------------------------------

pub fn conv2d(w: &Tensor4, x: &Tensor4, stride: usize, padding: usize) -> Result<Tensor4> {
    let [co, ci, kh, kw] = w.dims();
    let [n, ci_x, h, wid] = x.dims();
    if ci != ci_x {
        return Err(shape_err("conv2d", w.dims(), x.dims()));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wid + 2 * padding - kw) / stride + 1;
    let mut out = Tensor4::zeros([n, co, ho, wo]);
    let row_len = ho * wo;
    let wdat = w.data();
    let xdat = x.data();
    out.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, chunk)| {
            let ni = row / co;
            let coi = row % co;
            for cii in 0..ci {
                let wbase = (coi * ci + cii) * kh * kw;
                let xbase = (ni * ci + cii) * h * wid;
                let mut oi = 0;
                for ohi in 0..ho {
                    let ih0 = (ohi * stride) as isize - padding as isize;
                    for owi in 0..wo {
                        let iw0 = (owi * stride) as isize - padding as isize;
                        let mut z = 0.0;
                        for ki in 0..kh {
                            let ih = ih0 + ki as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * wid;
                            let wrow = wbase + ki * kw;
                            for kj in 0..kw {
                                let iw = iw0 + kj as isize;
                                if iw < 0 || iw >= wid as isize {
                                    continue;
                                }
                                z += wdat[wrow + kj] * xdat[xrow + iw as usize];
                            }
                        }
                        chunk[oi] += z;
                        oi += 1;
                    }
                }
            }
        });
    Ok(out)
}

pub fn conv2d_weight_grad(
    dz: &Tensor4,
    x: &Tensor4,
    stride: usize,
    padding: usize,
    kernel: (usize, usize),
) -> Result<Tensor4> {
    let [n, co, ho, wo] = dz.dims();
    let [n_x, ci, h, wid] = x.dims();
    if n != n_x {
        return Err(shape_err("conv2d weight grad", dz.dims(), x.dims()));
    }
    let (kh, kw) = kernel;
    debug_assert_eq!((h + 2 * padding - kh) / stride + 1, ho);
    let mut out = Tensor4::zeros([co, ci, kh, kw]);
    let row_len = kh * kw;
    let ddat = dz.data();
    let xdat = x.data();
    out.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, chunk)| {
            let coi = row / ci;
            let cii = row % ci;
            for ni in 0..n {
                let dbase = (ni * co + coi) * ho * wo;
                let xbase = (ni * ci + cii) * h * wid;
                let mut oi = 0;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let mut g = 0.0;
                        for ohi in 0..ho {
                            let ih = (ohi * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = xbase + ih as usize * wid;
                            let drow = dbase + ohi * wo;
                            for owi in 0..wo {
                                let iw = (owi * stride + kj) as isize - padding as isize;
                                if iw < 0 || iw >= wid as isize {
                                    continue;
                                }
                                g += ddat[drow + owi] * xdat[xrow + iw as usize];
                            }
                        }
                        chunk[oi] += g;
                        oi += 1;
                    }
                }
            }
        });
    Ok(out)
}

pub fn conv2d_input_grad(
    dz: &Tensor4,
    w: &Tensor4,
    stride: usize,
    padding: usize,
    input_hw: (usize, usize),
) -> Result<Tensor4> {
    let [n, co, ho, wo] = dz.dims();
    let [co_w, ci, kh, kw] = w.dims();
    if co != co_w {
        return Err(shape_err("conv2d input grad", dz.dims(), w.dims()));
    }
    let (h, wid) = input_hw;
    debug_assert_eq!((h + 2 * padding - kh) / stride + 1, ho);
    let mut out = Tensor4::zeros([n, ci, h, wid]);
    let row_len = h * wid;
    let ddat = dz.data();
    let wdat = w.data();
    out.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(row, chunk)| {
            let ni = row / ci;
            let cii = row % ci;
            for coi in 0..co {
                let dbase = (ni * co + coi) * ho * wo;
                let wbase = (coi * ci + cii) * kh * kw;
                let mut oi = 0;
                for ih in 0..h {
                    for iw in 0..wid {
                        let mut g = 0.0;
                        for ki in 0..kh {
                            let oh_num = ih as isize + padding as isize - ki as isize;
                            if oh_num < 0 || oh_num % stride as isize != 0 {
                                continue;
                            }
                            let ohi = (oh_num / stride as isize) as usize;
                            if ohi >= ho {
                                continue;
                            }
                            for kj in 0..kw {
                                let ow_num = iw as isize + padding as isize - kj as isize;
                                if ow_num < 0 || ow_num % stride as isize != 0 {
                                    continue;
                                }
                                let owi = (ow_num / stride as isize) as usize;
                                if owi >= wo {
                                    continue;
                                }
                                g += ddat[dbase + ohi * wo + owi] * wdat[wbase + ki * kw + kj];
                            }
                        }
                        chunk[oi] += g;
                        oi += 1;
                    }
                }
            }
        });
    Ok(out)
}

// ---------------------------------------------------------------------------
// quantize-then-convolve layer ops
// ---------------------------------------------------------------------------

/// Role tags salted into the RNG stream per quantized operand.
pub const TAG_WEIGHT: u64 = 0;
pub const TAG_ACTIVATION: u64 = 1;
pub const TAG_ERROR: u64 = 2;

pub fn operand_stream(seed: u64, step: u64, layer_id: u64, role: u64) -> RngStream {
    RngStream::new(seed, step, layer_id * 4 + role)
}

/// Quantize both operands and convolve: returns the float output plus the
/// quantized weights/activations cached for the backward pass.
pub fn quantconv_forward(
    w: &Tensor4,
    a: &Tensor4,
    cfg: &QuantConfig,
    stride: usize,
    padding: usize,
    w_stream: &RngStream,
    a_stream: &RngStream,
) -> Result<(Tensor4, MlsTensor, MlsTensor)> {
    let qw = quantize(w, cfg, w_stream)?;
    let qa = quantize(a, cfg, a_stream)?;
    let z = lowbit_conv(&qw, &qa, &ConvGeometry::forward(stride, padding))?;
    Ok((z, qw, qa))
}

/// Quantize the output error and run both gradient convolutions. The input
/// gradient passes through the quantization boundary unchanged
/// (straight-through estimator).
pub fn quantconv_backward(
    dz: &Tensor4,
    qw: &MlsTensor,
    qa: &MlsTensor,
    cfg: &QuantConfig,
    stride: usize,
    padding: usize,
    e_stream: &RngStream,
    need_input_grad: bool,
) -> Result<(Tensor4, Option<Tensor4>, MlsTensor)> {
    let qe = quantize(dz, cfg, e_stream)?;
    let [_, _, kh, kw] = qw.dims();
    let [_, _, h, w] = qa.dims();
    let g = lowbit_conv(&qe, qa, &ConvGeometry::weight_grad(stride, padding, (kh, kw)))?;
    let da = if need_input_grad {
        Some(lowbit_conv(
            &qe,
            qw,
            &ConvGeometry::input_grad(stride, padding, (h, w)),
        )?)
    } else {
        None
    };
    Ok((g, da, qe))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 0.00005;
pub const BN_RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BnState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl BnState {
    pub fn new(name: &str, channels: usize) -> BnState {
        BnState {
            gamma: Param::new(
                format!("{name}.gamma"),
                Tensor4::new([channels, 1, 1, 1], vec![1.0; channels]).unwrap(),
            ),
            beta: Param::new(format!("{name}.beta"), Tensor4::zeros([channels, 1, 1, 1])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    /// normalized activations (x - mean) / sqrt(var + eps)
    pub y: Tensor4,
    pub inv_std: Vec<f64>,
}

/// Normalize per channel over (batch, spatial). In training mode the batch
/// statistics are used (biased variance via E[x^2] - mean^2) and the running
/// buffers are updated; in inference mode the running statistics are used.
pub fn bn_forward(
    x: &Tensor4,
    state: &mut BnState,
    training: bool,
) -> Result<(Tensor4, BnCache)> {
    let [n, c, h, w] = x.dims();
    if c != state.channels() {
        return Err(shape_err("bn channels", x.dims(), [state.channels(), 0, 0, 0]));
    }
    let m = n * h * w;
    if training && m < 2 {
        return Err(MlsError::InvalidInput(format!(
            "batch norm needs at least 2 samples per channel in training, got {m}"
        )));
    }
    let plane = h * w;
    let mut z = Tensor4::zeros(x.dims());
    let mut y = Tensor4::zeros(x.dims());
    let mut inv_std = vec![0.0; c];
    for cc in 0..c {
        let (mean, var) = if training {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for ni in 0..n {
                let base = (ni * c + cc) * plane;
                for &v in &x.data()[base..base + plane] {
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / m as f64;
            let var = (s2 / m as f64 - mean * mean).max(0.0);
            // unbiased correction for the running buffer
            let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
            state.running_mean[cc] =
                (1.0 - BN_RUNNING_MOMENTUM) * state.running_mean[cc] + BN_RUNNING_MOMENTUM * mean;
            state.running_var[cc] =
                (1.0 - BN_RUNNING_MOMENTUM) * state.running_var[cc] + BN_RUNNING_MOMENTUM * unbiased;
            (mean, var)
        } else {
            (state.running_mean[cc], state.running_var[cc].max(0.0))
        };
        let istd = 1.0 / (var + state.eps).sqrt();
        inv_std[cc] = istd;
        let gamma = state.gamma.value.data()[cc];
        let beta = state.beta.value.data()[cc];
        for ni in 0..n {
            let base = (ni * c + cc) * plane;
            for k in base..base + plane {
                let yy = (x.data()[k] - mean) * istd;
                y.data_mut()[k] = yy;
                z.data_mut()[k] = gamma * yy + beta;
            }
        }
    }
    Ok((z, BnCache { y, inv_std }))
}

/// Gradients of the batch-norm transform: per channel,
/// `dgamma = sum(dz*y)`, `dbeta = sum(dz)`, `dy = dz*gamma`,
/// `t1 = sum(dy)`, `t2 = sum(dy*y)`, and
/// `dx = (M*dy - t1 - y*t2) / (M * sqrt(var + eps))`.
pub fn bn_backward(
    dz: &Tensor4,
    cache: &BnCache,
    state: &BnState,
) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = dz.dims();
    if dz.dims() != cache.y.dims() {
        return Err(shape_err("bn backward", dz.dims(), cache.y.dims()));
    }
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = Tensor4::zeros(dz.dims());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for cc in 0..c {
        let gamma = state.gamma.value.data()[cc];
        let mut t1 = 0.0;
        let mut t2 = 0.0;
        let mut dg = 0.0;
        let mut db = 0.0;
        for ni in 0..n {
            let base = (ni * c + cc) * plane;
            for k in base..base + plane {
                let d = dz.data()[k];
                let yy = cache.y.data()[k];
                dg += d * yy;
                db += d;
                let dy = d * gamma;
                t1 += dy;
                t2 += dy * yy;
            }
        }
        dgamma[cc] = dg;
        dbeta[cc] = db;
        let istd = cache.inv_std[cc];
        for ni in 0..n {
            let base = (ni * c + cc) * plane;
            for k in base..base + plane {
                let dy = dz.data()[k] * gamma;
                let yy = cache.y.data()[k];
                dx.data_mut()[k] = (m * dy - t1 - yy * t2) * istd / m;
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// element-wise and shape ops
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor4) -> Tensor4 {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor4::new(x.dims(), data).unwrap()
}

/// Gradient through relu using the cached pre-activation.
pub fn relu_backward(dz: &Tensor4, pre: &Tensor4) -> Tensor4 {
    let data = dz
        .data()
        .iter()
        .zip(pre.data())
        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
        .collect();
    Tensor4::new(dz.dims(), data).unwrap()
}

pub fn ew_add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.dims() != b.dims() {
        return Err(shape_err("ew_add", a.dims(), b.dims()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::new(a.dims(), data)
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element in scan
/// order, so the argmax cache is deterministic.
pub fn maxpool2_forward(x: &Tensor4) -> (Tensor4, Vec<usize>) {
    let [n, c, h, w] = x.dims();
    let ho = h / 2;
    let wo = w / 2;
    let mut out = Tensor4::zeros([n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let mut oi = 0;
    for ni in 0..n {
        for cc in 0..c {
            let base = (ni * c + cc) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let k = base + (2 * oh + di) * w + 2 * ow + dj;
                            if x.data()[k] > best {
                                best = x.data()[k];
                                best_at = k;
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_at;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(dz: &Tensor4, argmax: &[usize], in_dims: [usize; 4]) -> Tensor4 {
    let mut dx = Tensor4::zeros(in_dims);
    for (d, &k) in dz.data().iter().zip(argmax) {
        dx.data_mut()[k] += d;
    }
    dx
}

pub fn global_avg_pool_forward(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let plane = (h * w) as f64;
    let mut out = Tensor4::zeros([n, c, 1, 1]);
    for ni in 0..n {
        for cc in 0..c {
            let base = (ni * c + cc) * h * w;
            let s: f64 = x.data()[base..base + h * w].iter().sum();
            out.data_mut()[ni * c + cc] = s / plane;
        }
    }
    out
}

pub fn global_avg_pool_backward(dz: &Tensor4, in_dims: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = in_dims;
    let plane = (h * w) as f64;
    let mut dx = Tensor4::zeros(in_dims);
    for ni in 0..n {
        for cc in 0..c {
            let d = dz.data()[ni * c + cc] / plane;
            let base = (ni * c + cc) * h * w;
            for v in &mut dx.data_mut()[base..base + h * w] {
                *v = d;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// fully connected
// ---------------------------------------------------------------------------

/// x is (n, d_in, 1, 1) or any shape whose non-batch extent flattens to d_in.
pub fn fc_forward(x: &Tensor4, weight: &Tensor4, bias: &Tensor4) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    let d_in = c * h * w;
    let [d_out, d_in_w, _, _] = weight.dims();
    if d_in != d_in_w {
        return Err(shape_err("fc", x.dims(), weight.dims()));
    }
    let mut out = Tensor4::zeros([n, d_out, 1, 1]);
    for ni in 0..n {
        let xrow = &x.data()[ni * d_in..(ni + 1) * d_in];
        for o in 0..d_out {
            let wrow = &weight.data()[o * d_in..(o + 1) * d_in];
            let mut s = bias.data()[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                s += xv * wv;
            }
            out.data_mut()[ni * d_out + o] = s;
        }
    }
    Ok(out)
}

/// Returns (dx, dweight, dbias).
pub fn fc_backward(
    dz: &Tensor4,
    x: &Tensor4,
    weight: &Tensor4,
) -> Result<(Tensor4, Tensor4, Tensor4)> {
    let [n, c, h, w] = x.dims();
    let d_in = c * h * w;
    let [d_out, _, _, _] = weight.dims();
    let mut dx = Tensor4::zeros(x.dims());
    let mut dw = Tensor4::zeros(weight.dims());
    let mut db = Tensor4::zeros([d_out, 1, 1, 1]);
    for ni in 0..n {
        let xrow = &x.data()[ni * d_in..(ni + 1) * d_in];
        for o in 0..d_out {
            let d = dz.data()[ni * d_out + o];
            db.data_mut()[o] += d;
            let wrow = &weight.data()[o * d_in..(o + 1) * d_in];
            let dxrow = &mut dx.data_mut()[ni * d_in..(ni + 1) * d_in];
            for k in 0..d_in {
                dxrow[k] += d * wrow[k];
            }
            let dwrow = &mut dw.data_mut()[o * d_in..(o + 1) * d_in];
            for k in 0..d_in {
                dwrow[k] += d * xrow[k];
            }
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// criterion
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch with softmax; returns the loss and the
/// gradient w.r.t. the logits.
pub fn softmax_ce(logits: &Tensor4, labels: &[u8]) -> Result<(f64, Tensor4)> {
    let [n, classes, h, w] = logits.dims();
    if h != 1 || w != 1 || n != labels.len() {
        return Err(MlsError::ShapeMismatch(format!(
            "softmax_ce: logits {:?} vs {} labels",
            logits.dims(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut dl = Tensor4::zeros(logits.dims());
    for ni in 0..n {
        let row = &logits.data()[ni * classes..(ni + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let label = labels[ni] as usize;
        if label >= classes {
            return Err(MlsError::InvalidInput(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        loss += log_z - row[label];
        let drow = &mut dl.data_mut()[ni * classes..(ni + 1) * classes];
        for (k, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            drow[k] = (p - if k == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, dl))
}

pub fn accuracy(logits: &Tensor4, labels: &[u8]) -> f64 {
    let [n, classes, _, _] = logits.dims();
    let mut correct = 0usize;
    for ni in 0..n {
        let row = &logits.data()[ni * classes..(ni + 1) * classes];
        let mut best = 0usize;
        for k in 1..classes {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == labels[ni] as usize {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
