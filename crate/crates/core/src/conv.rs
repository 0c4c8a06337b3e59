//! Bit-exact convolution on quantized tensors: integer multiply-accumulate
//! inside each (kernel window × channel) group, shift-add combination of the
//! partial sums across groups, and one float multiply by the two tensor scales
//! per output element.
//!
//! Operands must be grouped by their two leading axes (weights by (co, ci),
//! activations/errors by (n, c)) so that every inner window sees constant
//! group scales. Each output element's reduction order is fixed
//! (group-major, then kh, kw), so parallel execution is bit-identical.

use rayon::prelude::*;

use crate::error::{MlsError, Result};
use crate::format::{pow2, EmCode, EmFormat};
use crate::quant::{MlsTensor, QuantConfig};
use crate::tensor::{GroupingDim, Tensor4};

/// Which of the three training convolutions to run.
///
/// `Forward` is weight * activation; `WeightGrad` correlates the output error
/// with the activation (summing over the batch); `InputGrad` is the transposed
/// convolution of the error with the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvVariant {
    Forward,
    WeightGrad,
    InputGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub variant: ConvVariant,
    /// Kernel spatial size for `WeightGrad`. The forward output extent floors
    /// its division by the stride, so the kernel cannot be recovered from the
    /// operand shapes when the stride does not tile the input exactly.
    pub kernel: Option<(usize, usize)>,
    /// Original input spatial size for `InputGrad`, for the same reason.
    pub input_hw: Option<(usize, usize)>,
}

impl ConvGeometry {
    pub fn forward(stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry {
            stride,
            padding,
            variant: ConvVariant::Forward,
            kernel: None,
            input_hw: None,
        }
    }

    pub fn weight_grad(stride: usize, padding: usize, kernel: (usize, usize)) -> ConvGeometry {
        ConvGeometry {
            stride,
            padding,
            variant: ConvVariant::WeightGrad,
            kernel: Some(kernel),
            input_hw: None,
        }
    }

    pub fn input_grad(stride: usize, padding: usize, input_hw: (usize, usize)) -> ConvGeometry {
        ConvGeometry {
            stride,
            padding,
            variant: ConvVariant::InputGrad,
            kernel: None,
            input_hw: Some(input_hw),
        }
    }
}

/// Product of two group-scale codes: the exponent fields add, the two mantissa
/// bits are kept as a pair. Multiplier values are `{1, 1.5, 1.5, 2.25} * 2^-exp_sum`
/// for pairs 00, 01, 10, 11 — exactly the product of the decoded scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductScale {
    pub exp_sum: u32,
    pub man_pair: u8,
}

impl ProductScale {
    /// Numerator of the multiplier in quarters: {4, 6, 6, 9}.
    #[inline]
    pub fn quarters(self) -> i64 {
        match self.man_pair {
            0b00 => 4,
            0b01 | 0b10 => 6,
            _ => 9,
        }
    }

    /// The exact decoded multiplier.
    pub fn multiplier(self) -> f64 {
        self.quarters() as f64 * pow2(-(self.exp_sum as i32) - 2)
    }
}

/// Combine two group-scale codes into their product scale. Both codes must be
/// normal, which the quantizer guarantees for group scales.
pub fn combine_group_scales(sg_w: EmCode, sg_a: EmCode, group_fmt: EmFormat) -> ProductScale {
    assert!(
        !group_fmt.is_subnormal(sg_w) && !group_fmt.is_subnormal(sg_a),
        "group scales are never subnormal"
    );
    debug_assert!(group_fmt.m_bits() <= 1);
    ProductScale {
        exp_sum: sg_w.exp_field as u32 + sg_a.exp_field as u32,
        man_pair: (sg_w.man_field << 1) | sg_a.man_field,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    Error,
    Saturate,
}

/// Fixed-width signed accumulator for intra-group partial sums.
#[derive(Debug, Clone)]
pub struct IntraAccumulator {
    width_bits: u32,
    policy: OverflowPolicy,
    value: i64,
}

impl IntraAccumulator {
    pub fn new(width_bits: u32, policy: OverflowPolicy) -> Result<IntraAccumulator> {
        if !matches!(width_bits, 8 | 16 | 32) {
            return Err(MlsError::InvalidInput(format!(
                "accumulator width must be 8, 16 or 32, got {width_bits}"
            )));
        }
        Ok(IntraAccumulator {
            width_bits,
            policy,
            value: 0,
        })
    }

    #[inline]
    fn limit(&self) -> i64 {
        1i64 << (self.width_bits - 1)
    }

    pub fn value(&self) -> i64 {
        self.value
    }

    pub fn reset(&mut self) {
        self.value = 0;
    }

    /// Add one product term, enforcing the width under the configured policy.
    #[inline]
    pub fn accumulate(&mut self, term: i64) -> Result<()> {
        let next = self.value + term;
        if next >= self.limit() || next < -self.limit() {
            match self.policy {
                OverflowPolicy::Error => {
                    return Err(MlsError::AccumulatorOverflow(format!(
                        "{}-bit accumulator overflowed: {} + {term}",
                        self.width_bits, self.value
                    )))
                }
                OverflowPolicy::Saturate => {
                    self.value = if next > 0 {
                        self.limit() - 1
                    } else {
                        -self.limit()
                    };
                    return Ok(());
                }
            }
        }
        self.value = next;
        Ok(())
    }
}

/// Sign-folded integer mantissa of one code at fixed-point scale
/// `2^(min_normal_exp - M)`.
#[inline]
fn elem_int(fmt: EmFormat, code: EmCode, negative: bool) -> i64 {
    let v = if fmt.is_subnormal(code) {
        code.man_field as i64
    } else {
        let shift = fmt.max_normal_exp_field().unwrap() - code.exp_field as u32;
        (((1u32 << fmt.m_bits()) + code.man_field as u32) as i64) << shift
    };
    if negative {
        -v
    } else {
        v
    }
}

/// Integer dot product of two code windows. The result is the partial sum
/// `P` at fixed-point scale `2^(2*min_normal_exp - 2M)`; every term is the
/// product of two (M+1)-bit fractions shifted by the two exponent offsets,
/// so single terms stay below `2^(2M + 2^(E+1) - 2)`.
pub fn intra_group_mac(
    w_codes: &[EmCode],
    w_negs: &[bool],
    a_codes: &[EmCode],
    a_negs: &[bool],
    fmt: EmFormat,
    acc: &mut IntraAccumulator,
) -> Result<i64> {
    if w_codes.len() != a_codes.len() || w_codes.len() != w_negs.len() || a_codes.len() != a_negs.len()
    {
        return Err(MlsError::ShapeMismatch(format!(
            "window lengths differ: {} vs {}",
            w_codes.len(),
            a_codes.len()
        )));
    }
    for k in 0..w_codes.len() {
        let wv = elem_int(fmt, w_codes[k], w_negs[k]);
        let av = elem_int(fmt, a_codes[k], a_negs[k]);
        acc.accumulate(wv * av)?;
    }
    Ok(acc.value())
}

/// Fixed-point scale exponent of intra-group partials: `2M - 2*min_normal_exp`.
/// Negative for E = 0 formats, whose underflow lattice sits at scale `2^(1-M)`.
fn partial_scale_bits(fmt: EmFormat) -> i32 {
    2 * fmt.m_bits() as i32 - 2 * fmt.min_normal_exp()
}

#[inline]
fn shl_checked(v: i128, k: u32) -> Option<i128> {
    if k == 0 || v == 0 {
        return Some(v);
    }
    if k >= 127 {
        return None;
    }
    if v > 0 {
        (v <= (i128::MAX >> k)).then(|| v << k)
    } else {
        (v >= (i128::MIN >> k)).then(|| v << k)
    }
}

/// Wide accumulator combining intra-group partials under their product scales.
///
/// The running sum is an i128 normalized to the largest exponent sum seen so
/// far; its value is `acc * 2^(-(scale_bits + 2 + max_exp_sum))`, which equals
/// the spec'd fixed-point form wherever that is representable. Partials equal
/// to zero carry no scale information and are skipped, so dead groups with
/// clamped deep scales cannot widen the live exponent range.
#[derive(Debug, Clone)]
pub struct WideAccumulator {
    acc: i128,
    max_exp_sum: u32,
    scale_bits: i32,
    started: bool,
}

impl WideAccumulator {
    pub fn new(elem_fmt: EmFormat) -> WideAccumulator {
        WideAccumulator {
            acc: 0,
            max_exp_sum: 0,
            scale_bits: partial_scale_bits(elem_fmt),
            started: false,
        }
    }

    /// Fold in one partial sum. The multiplier is realized with the three
    /// shift-add cases of the mantissa pair: one shift for pair 00, two
    /// shift-adds for 01/10 and for 11.
    #[inline]
    pub fn add(&mut self, p: i64, scale: ProductScale) -> Result<()> {
        if p == 0 {
            return Ok(());
        }
        let overflow =
            || MlsError::WideOverflow("inter-group accumulator exceeded 128 bits".into());
        if !self.started {
            self.started = true;
            self.max_exp_sum = scale.exp_sum;
        } else if scale.exp_sum > self.max_exp_sum {
            let up = scale.exp_sum - self.max_exp_sum;
            self.acc = shl_checked(self.acc, up).ok_or_else(overflow)?;
            self.max_exp_sum = scale.exp_sum;
        }
        let t = self.max_exp_sum - scale.exp_sum;
        let p = p as i128;
        let contribution = match scale.man_pair {
            // 1.0 * 2^-es  ->  p << (t+2)
            0b00 => shl_checked(p, t + 2).ok_or_else(overflow)?,
            // 1.5 * 2^-es  ->  p << (t+2) + p << (t+1)
            0b01 | 0b10 => {
                let hi = shl_checked(p, t + 2).ok_or_else(overflow)?;
                let lo = shl_checked(p, t + 1).ok_or_else(overflow)?;
                hi.checked_add(lo).ok_or_else(overflow)?
            }
            // 2.25 * 2^-es ->  p << (t+3) + p << t
            _ => {
                let hi = shl_checked(p, t + 3).ok_or_else(overflow)?;
                let lo = shl_checked(p, t).ok_or_else(overflow)?;
                hi.checked_add(lo).ok_or_else(overflow)?
            }
        };
        self.acc = self.acc.checked_add(contribution).ok_or_else(overflow)?;
        Ok(())
    }

    /// The exact value as (mantissa, power-of-two exponent).
    pub fn dyadic(&self) -> (i128, i32) {
        (
            self.acc,
            -(self.scale_bits + 2 + self.max_exp_sum as i32),
        )
    }

    /// The value as f64 (exact while the mantissa fits 53 bits, which the
    /// width checks keep true for every supported configuration).
    pub fn value(&self) -> f64 {
        let (m, e) = self.dyadic();
        m as f64 * pow2(e)
    }
}

/// Combine partial sums `(P, product scale)` into the group-level total.
pub fn inter_group_accumulate(
    partials: &[(i64, ProductScale)],
    elem_fmt: EmFormat,
) -> Result<WideAccumulator> {
    if partials.is_empty() {
        return Err(MlsError::InvalidInput(
            "inter-group accumulation over no partials".into(),
        ));
    }
    let mut acc = WideAccumulator::new(elem_fmt);
    for &(p, s) in partials {
        acc.add(p, s)?;
    }
    Ok(acc)
}

struct Operand<'a> {
    q: &'a MlsTensor,
    ints: Vec<i32>,
    scale_exp: Vec<u32>,
    scale_man: Vec<u8>,
}

impl<'a> Operand<'a> {
    fn new(q: &'a MlsTensor) -> Operand<'a> {
        let (scale_exp, scale_man) = q
            .group_scales()
            .iter()
            .map(|c| (c.exp_field as u32, c.man_field))
            .unzip();
        Operand {
            q,
            ints: q.elem_ints(),
            scale_exp,
            scale_man,
        }
    }
}

fn check_operands(qx: &MlsTensor, qy: &MlsTensor) -> Result<()> {
    for (name, q) in [("first", qx), ("second", qy)] {
        if q.grouping() != GroupingDim::Dim0x1 {
            return Err(MlsError::InvalidInput(format!(
                "{name} operand must be grouped by its two leading axes, got {:?}",
                q.grouping()
            )));
        }
    }
    if qx.config().elem_fmt != qy.config().elem_fmt
        || qx.config().group_fmt != qy.config().group_fmt
    {
        return Err(MlsError::InvalidInput(format!(
            "operand formats differ: {}/{} vs {}/{}",
            qx.config().elem_fmt,
            qx.config().group_fmt,
            qy.config().elem_fmt,
            qy.config().group_fmt
        )));
    }
    Ok(())
}

fn check_window(cfg: &QuantConfig, window: u64, what: &str) -> Result<()> {
    if window > cfg.max_window() {
        return Err(MlsError::AccumulatorOverflow(format!(
            "{what} window of {window} products needs {} accumulator bits, have {}",
            QuantConfig::required_acc_bits(cfg.elem_fmt, window),
            cfg.intra_acc_bits
        )));
    }
    Ok(())
}

/// Convolve two quantized tensors. Output is a full-precision tensor equal to
/// `S_t(x) * S_t(y) *` (shift-add combination over groups of the integer
/// window products).
///
/// * `Forward`: x = weights (co,ci,kh,kw), y = activations (n,ci,h,w) -> (n,co,h',w')
/// * `WeightGrad`: x = errors (n,co,h',w'), y = activations (n,ci,h,w) -> (co,ci,kh,kw)
/// * `InputGrad`: x = errors (n,co,h',w'), y = weights (co,ci,kh,kw) -> (n,ci,h,w)
pub fn lowbit_conv(qx: &MlsTensor, qy: &MlsTensor, geom: &ConvGeometry) -> Result<Tensor4> {
    check_operands(qx, qy)?;
    if geom.stride == 0 {
        return Err(MlsError::InvalidInput("stride must be positive".into()));
    }
    let st_product = qx.tensor_scale() * qy.tensor_scale();
    let x = Operand::new(qx);
    let y = Operand::new(qy);
    match geom.variant {
        ConvVariant::Forward => conv_forward(&x, &y, geom, st_product),
        ConvVariant::WeightGrad => conv_weight_grad(&x, &y, geom, st_product),
        ConvVariant::InputGrad => conv_input_grad(&x, &y, geom, st_product),
    }
}

fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < k {
        return Err(MlsError::ShapeMismatch(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// The gradient variants carry shapes the output extents cannot recover;
/// check they reproduce the observed forward output.
fn check_geometry(
    input: (usize, usize),
    kernel: (usize, usize),
    output: (usize, usize),
    geom: &ConvGeometry,
) -> Result<()> {
    let ho = out_extent(input.0, kernel.0, geom.stride, geom.padding)?;
    let wo = out_extent(input.1, kernel.1, geom.stride, geom.padding)?;
    if (ho, wo) != output {
        return Err(MlsError::ShapeMismatch(format!(
            "geometry mismatch: input {input:?} kernel {kernel:?} stride {} padding {} \
             produces {:?}, operands say {output:?}",
            geom.stride,
            geom.padding,
            (ho, wo)
        )));
    }
    Ok(())
}

/// Parallel map over independent output rows; sequential below a size cutoff.
fn fill_rows<F>(out: &mut [f64], row_len: usize, f: F) -> Result<()>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    debug_assert_eq!(out.len() % row_len.max(1), 0);
    if out.len() >= 1 << 14 && row_len > 0 {
        out.par_chunks_mut(row_len)
            .enumerate()
            .try_for_each(|(r, chunk)| f(r, chunk))
    } else if row_len > 0 {
        for (r, chunk) in out.chunks_mut(row_len).enumerate() {
            f(r, chunk)?;
        }
        Ok(())
    } else {
        Ok(())
    }
}

fn conv_forward(w: &Operand, a: &Operand, geom: &ConvGeometry, st: f64) -> Result<Tensor4> {
    let [co, ci, kh, kw] = w.q.dims();
    let [n, ci_a, h, wid] = a.q.dims();
    if ci != ci_a {
        return Err(MlsError::ShapeMismatch(format!(
            "weight expects {ci} input channels, activation has {ci_a}"
        )));
    }
    let ho = out_extent(h, kh, geom.stride, geom.padding)?;
    let wo = out_extent(wid, kw, geom.stride, geom.padding)?;
    check_window(w.q.config(), (kh * kw) as u64, "forward")?;

    let acc_limit = 1i64 << (w.q.config().intra_acc_bits - 1);
    let mut out = Tensor4::zeros([n, co, ho, wo]);
    let row_len = ho * wo;
    let elem_fmt = w.q.config().elem_fmt;
    let data = out.data_mut();

    fill_rows(data, row_len, |row, chunk| {
        let ni = row / co;
        let coi = row % co;
        let mut wide: Vec<WideAccumulator> = vec![WideAccumulator::new(elem_fmt); row_len];
        for cii in 0..ci {
            let wbase = (coi * ci + cii) * kh * kw;
            let wslice = &w.ints[wbase..wbase + kh * kw];
            let abase = (ni * ci + cii) * h * wid;
            let scale = ProductScale {
                exp_sum: w.scale_exp[coi * ci + cii] + a.scale_exp[ni * ci + cii],
                man_pair: (w.scale_man[coi * ci + cii] << 1) | a.scale_man[ni * ci + cii],
            };
            let mut oi = 0usize;
            for ohi in 0..ho {
                let ih0 = (ohi * geom.stride) as isize - geom.padding as isize;
                for owi in 0..wo {
                    let iw0 = (owi * geom.stride) as isize - geom.padding as isize;
                    let mut p = 0i64;
                    for ki in 0..kh {
                        let ih = ih0 + ki as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let arow = abase + ih as usize * wid;
                        let wrow = ki * kw;
                        for kj in 0..kw {
                            let iw = iw0 + kj as isize;
                            if iw < 0 || iw >= wid as isize {
                                continue;
                            }
                            p += wslice[wrow + kj] as i64 * a.ints[arow + iw as usize] as i64;
                        }
                    }
                    debug_assert!(p.abs() < acc_limit);
                    wide[oi].add(p, scale)?;
                    oi += 1;
                }
            }
        }
        for (o, acc) in chunk.iter_mut().zip(&wide) {
            *o = st * acc.value();
        }
        Ok(())
    })?;
    Ok(out)
}

fn conv_weight_grad(e: &Operand, a: &Operand, geom: &ConvGeometry, st: f64) -> Result<Tensor4> {
    let [n, co, ho, wo] = e.q.dims();
    let [n_a, ci, h, wid] = a.q.dims();
    if n != n_a {
        return Err(MlsError::ShapeMismatch(format!(
            "error batch {n} vs activation batch {n_a}"
        )));
    }
    let (kh, kw) = geom.kernel.unwrap_or((
        h + 2 * geom.padding - (ho - 1) * geom.stride,
        wid + 2 * geom.padding - (wo - 1) * geom.stride,
    ));
    check_geometry((h, wid), (kh, kw), (ho, wo), geom)?;
    // The reduction window here is a whole output map, which can exceed the
    // local accumulator. Oversized windows are tiled into accumulator-sized
    // chunks; each chunk flushes into the wide accumulator under the same
    // product scale, so the total is unchanged.
    let flush_every = e.q.config().max_window().min(usize::MAX as u64) as usize;

    let acc_limit = 1i64 << (e.q.config().intra_acc_bits - 1);
    let mut out = Tensor4::zeros([co, ci, kh, kw]);
    let row_len = kh * kw;
    let elem_fmt = e.q.config().elem_fmt;
    let data = out.data_mut();

    fill_rows(data, row_len, |row, chunk| {
        let coi = row / ci;
        let cii = row % ci;
        let mut wide: Vec<WideAccumulator> = vec![WideAccumulator::new(elem_fmt); row_len];
        for ni in 0..n {
            let ebase = (ni * co + coi) * ho * wo;
            let abase = (ni * ci + cii) * h * wid;
            let scale = ProductScale {
                exp_sum: e.scale_exp[ni * co + coi] + a.scale_exp[ni * ci + cii],
                man_pair: (e.scale_man[ni * co + coi] << 1) | a.scale_man[ni * ci + cii],
            };
            let mut oi = 0usize;
            for ki in 0..kh {
                for kj in 0..kw {
                    let mut p = 0i64;
                    let mut in_chunk = 0usize;
                    for ohi in 0..ho {
                        let ih = (ohi * geom.stride + ki) as isize - geom.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let arow = abase + ih as usize * wid;
                        let erow = ebase + ohi * wo;
                        for owi in 0..wo {
                            let iw = (owi * geom.stride + kj) as isize - geom.padding as isize;
                            if iw < 0 || iw >= wid as isize {
                                continue;
                            }
                            p += e.ints[erow + owi] as i64 * a.ints[arow + iw as usize] as i64;
                            in_chunk += 1;
                            if in_chunk == flush_every {
                                debug_assert!(p.abs() < acc_limit);
                                wide[oi].add(p, scale)?;
                                p = 0;
                                in_chunk = 0;
                            }
                        }
                    }
                    debug_assert!(p.abs() < acc_limit);
                    wide[oi].add(p, scale)?;
                    oi += 1;
                }
            }
        }
        for (o, acc) in chunk.iter_mut().zip(&wide) {
            *o = st * acc.value();
        }
        Ok(())
    })?;
    Ok(out)
}

fn conv_input_grad(e: &Operand, w: &Operand, geom: &ConvGeometry, st: f64) -> Result<Tensor4> {
    let [n, co, ho, wo] = e.q.dims();
    let [co_w, ci, kh, kw] = w.q.dims();
    if co != co_w {
        return Err(MlsError::ShapeMismatch(format!(
            "error channels {co} vs weight output channels {co_w}"
        )));
    }
    let (h, wid) = geom.input_hw.unwrap_or((
        (ho - 1) * geom.stride + kh - 2 * geom.padding,
        (wo - 1) * geom.stride + kw - 2 * geom.padding,
    ));
    check_geometry((h, wid), (kh, kw), (ho, wo), geom)?;
    check_window(e.q.config(), (kh * kw) as u64, "input-grad")?;

    let acc_limit = 1i64 << (e.q.config().intra_acc_bits - 1);
    let mut out = Tensor4::zeros([n, ci, h, wid]);
    let row_len = h * wid;
    let elem_fmt = e.q.config().elem_fmt;
    let data = out.data_mut();

    fill_rows(data, row_len, |row, chunk| {
        let ni = row / ci;
        let cii = row % ci;
        let mut wide: Vec<WideAccumulator> = vec![WideAccumulator::new(elem_fmt); row_len];
        for coi in 0..co {
            let ebase = (ni * co + coi) * ho * wo;
            let wbase = (coi * ci + cii) * kh * kw;
            let scale = ProductScale {
                exp_sum: e.scale_exp[ni * co + coi] + w.scale_exp[coi * ci + cii],
                man_pair: (e.scale_man[ni * co + coi] << 1) | w.scale_man[coi * ci + cii],
            };
            let mut oi = 0usize;
            for ih in 0..h {
                for iw in 0..wid {
                    let mut p = 0i64;
                    for ki in 0..kh {
                        let oh_num = ih as isize + geom.padding as isize - ki as isize;
                        if oh_num < 0 || oh_num % geom.stride as isize != 0 {
                            continue;
                        }
                        let ohi = (oh_num / geom.stride as isize) as usize;
                        if ohi >= ho {
                            continue;
                        }
                        let erow = ebase + ohi * wo;
                        let wrow = wbase + ki * kw;
                        for kj in 0..kw {
                            let ow_num = iw as isize + geom.padding as isize - kj as isize;
                            if ow_num < 0 || ow_num % geom.stride as isize != 0 {
                                continue;
                            }
                            let owi = (ow_num / geom.stride as isize) as usize;
                            if owi >= wo {
                                continue;
                            }
                            p += e.ints[erow + owi] as i64 * w.ints[wrow + kj] as i64;
                        }
                    }
                    debug_assert!(p.abs() < acc_limit);
                    wide[oi].add(p, scale)?;
                    oi += 1;
                }
            }
        }
        for (o, acc) in chunk.iter_mut().zip(&wide) {
            *o = st * acc.value();
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::Rounding;
    use crate::quant::{dequantize, quantize};
    use crate::tensor::{mix64, RngStream};

    fn fmt(e: u32, m: u32) -> EmFormat {
        EmFormat::new(e, m).unwrap()
    }

    fn qcfg(ex: u32, mx: u32) -> QuantConfig {
        QuantConfig::new(
            fmt(ex, mx),
            fmt(8, 1),
            GroupingDim::Dim0x1,
            32,
            Rounding::Stochastic,
        )
        .unwrap()
    }

    /// Random tensor of dyadic rationals k/64 with |k| <= 512, so both the
    /// integer path and the f64 oracle are exact end to end.
    fn dyadic_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|i| {
                let k = (mix64(seed.wrapping_mul(0x51ed) ^ mix64(i as u64)) % 1025) as i64 - 512;
                k as f64 / 64.0
            })
            .collect();
        Tensor4::new(dims, data).unwrap()
    }

    /// Independent nested-loop oracle on the dequantized operands. For the
    /// gradient variants the kernel / input spatial sizes are passed in
    /// `shape_hint` since strided geometry cannot recover them.
    fn oracle_conv(
        x: &Tensor4,
        y: &Tensor4,
        stride: usize,
        padding: usize,
        variant: ConvVariant,
        shape_hint: (usize, usize),
    ) -> Tensor4 {
        match variant {
            ConvVariant::Forward => {
                let [co, ci, kh, kw] = x.dims();
                let [n, _, h, wid] = y.dims();
                let ho = (h + 2 * padding - kh) / stride + 1;
                let wo = (wid + 2 * padding - kw) / stride + 1;
                let mut out = Tensor4::zeros([n, co, ho, wo]);
                for ni in 0..n {
                    for coi in 0..co {
                        for ohi in 0..ho {
                            for owi in 0..wo {
                                let mut z = 0.0;
                                for cii in 0..ci {
                                    for ki in 0..kh {
                                        for kj in 0..kw {
                                            let ih =
                                                (ohi * stride + ki) as isize - padding as isize;
                                            let iw =
                                                (owi * stride + kj) as isize - padding as isize;
                                            if ih < 0
                                                || iw < 0
                                                || ih >= h as isize
                                                || iw >= wid as isize
                                            {
                                                continue;
                                            }
                                            z += x.at([coi, cii, ki, kj])
                                                * y.at([ni, cii, ih as usize, iw as usize]);
                                        }
                                    }
                                }
                                out.set([ni, coi, ohi, owi], z);
                            }
                        }
                    }
                }
                out
            }
            ConvVariant::WeightGrad => {
                let [n, co, ho, wo] = x.dims();
                let [_, ci, h, wid] = y.dims();
                let (kh, kw) = shape_hint;
                let mut out = Tensor4::zeros([co, ci, kh, kw]);
                for coi in 0..co {
                    for cii in 0..ci {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut z = 0.0;
                                for ni in 0..n {
                                    for ohi in 0..ho {
                                        for owi in 0..wo {
                                            let ih =
                                                (ohi * stride + ki) as isize - padding as isize;
                                            let iw =
                                                (owi * stride + kj) as isize - padding as isize;
                                            if ih < 0
                                                || iw < 0
                                                || ih >= h as isize
                                                || iw >= wid as isize
                                            {
                                                continue;
                                            }
                                            z += x.at([ni, coi, ohi, owi])
                                                * y.at([ni, cii, ih as usize, iw as usize]);
                                        }
                                    }
                                }
                                out.set([coi, cii, ki, kj], z);
                            }
                        }
                    }
                }
                out
            }
            ConvVariant::InputGrad => {
                let [n, co, ho, wo] = x.dims();
                let [_, ci, kh, kw] = y.dims();
                let (h, wid) = shape_hint;
                let mut out = Tensor4::zeros([n, ci, h, wid]);
                for ni in 0..n {
                    for coi in 0..co {
                        for ohi in 0..ho {
                            for owi in 0..wo {
                                for ki in 0..kh {
                                    for kj in 0..kw {
                                        let ih = (ohi * stride + ki) as isize - padding as isize;
                                        let iw = (owi * stride + kj) as isize - padding as isize;
                                        if ih < 0
                                            || iw < 0
                                            || ih >= h as isize
                                            || iw >= wid as isize
                                        {
                                            continue;
                                        }
                                        for cii in 0..ci {
                                            let cur = out.at([ni, cii, ih as usize, iw as usize]);
                                            out.set(
                                                [ni, cii, ih as usize, iw as usize],
                                                cur + x.at([ni, coi, ohi, owi])
                                                    * y.at([coi, cii, ki, kj]),
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }

    #[test]
    fn product_scale_cases() {
        let g = fmt(8, 1);
        let one = EmCode::new(0, 0);
        let ps = combine_group_scales(one, one, g);
        assert_eq!(ps.exp_sum, 0);
        assert_eq!(ps.man_pair, 0);
        assert_eq!(ps.multiplier(), 1.0);

        // 1.5*2^-1 times 1.5*2^-2 = 2.25*2^-3
        let ps = combine_group_scales(EmCode::new(1, 1), EmCode::new(2, 1), g);
        assert_eq!(ps.exp_sum, 3);
        assert_eq!(ps.man_pair, 0b11);
        assert_eq!(ps.multiplier(), 0.28125);

        // 1.5*2^-1 times 1.0*2^-2 = 1.5*2^-3
        let ps = combine_group_scales(EmCode::new(1, 1), EmCode::new(2, 0), g);
        assert_eq!(ps.man_pair, 0b10);
        assert_eq!(ps.multiplier(), 0.1875);
    }

    #[test]
    fn product_scale_matches_decoded_product_exhaustively() {
        let g = fmt(8, 1);
        let max_exp = g.max_normal_exp_field().unwrap();
        for ew in (0..=max_exp).step_by(17).chain([max_exp]) {
            for mw in 0..=1u8 {
                for ea in (0..=max_exp).step_by(23).chain([0, max_exp]) {
                    for ma in 0..=1u8 {
                        let cw = EmCode::new(ew as u8, mw);
                        let ca = EmCode::new(ea as u8, ma);
                        let ps = combine_group_scales(cw, ca, g);
                        assert_eq!(ps.multiplier(), g.decode(cw) * g.decode(ca));
                    }
                }
            }
        }
    }

    #[test]
    fn intra_mac_unit_pair() {
        let f = fmt(2, 4);
        let mut acc = IntraAccumulator::new(32, OverflowPolicy::Error).unwrap();
        let one = EmCode::new(0, 0);
        let p = intra_group_mac(&[one], &[false], &[one], &[false], f, &mut acc).unwrap();
        assert_eq!(p, 4096); // 16 * 16 * 2^4
        let scale = pow2(2 * f.min_normal_exp() - 2 * f.m_bits() as i32);
        assert_eq!(p as f64 * scale, 1.0);
    }

    #[test]
    fn intra_mac_zero_contributes_nothing() {
        let f = fmt(2, 4);
        let mut acc = IntraAccumulator::new(32, OverflowPolicy::Error).unwrap();
        let p = intra_group_mac(
            &[f.zero(), EmCode::new(1, 3)],
            &[false, true],
            &[EmCode::new(0, 9), f.zero()],
            &[true, false],
            f,
            &mut acc,
        )
        .unwrap();
        assert_eq!(p, 0);
    }

    #[test]
    fn intra_mac_matches_float_oracle_on_random_windows() {
        let f = fmt(2, 4);
        let codes = f.codes_ascending();
        for seed in 0..50u64 {
            let pick = |k: u64| {
                let c = codes[(mix64(seed * 1000 + k) % codes.len() as u64) as usize];
                let neg = mix64(seed * 2000 + k) % 2 == 1;
                (c, neg)
            };
            let w: Vec<(EmCode, bool)> = (0..9).map(|k| pick(k)).collect();
            let a: Vec<(EmCode, bool)> = (0..9).map(|k| pick(k + 100)).collect();
            let mut acc = IntraAccumulator::new(32, OverflowPolicy::Error).unwrap();
            let p = intra_group_mac(
                &w.iter().map(|x| x.0).collect::<Vec<_>>(),
                &w.iter().map(|x| x.1).collect::<Vec<_>>(),
                &a.iter().map(|x| x.0).collect::<Vec<_>>(),
                &a.iter().map(|x| x.1).collect::<Vec<_>>(),
                f,
                &mut acc,
            )
            .unwrap();
            let scale = pow2(2 * f.min_normal_exp() - 2 * f.m_bits() as i32);
            let want: f64 = w
                .iter()
                .zip(&a)
                .map(|((cw, nw), (ca, na))| {
                    let s = if nw ^ na { -1.0 } else { 1.0 };
                    s * f.decode(*cw) * f.decode(*ca)
                })
                .sum();
            assert_eq!(p as f64 * scale, want, "seed {seed}");
        }
    }

    #[test]
    fn partial_products_stay_under_the_format_width_bound() {
        // exhaustive over all code pairs for each element format in scope
        for e in 0..=2u32 {
            for m in 1..=4u32 {
                let f = fmt(e, m);
                let bound = 1i64 << (2 * m + (1 << (e + 1)) - 2);
                let codes = f.codes_ascending();
                let mut max_seen = 0i64;
                for &cw in &codes {
                    for &ca in &codes {
                        let t = elem_int(f, cw, false) * elem_int(f, ca, false);
                        max_seen = max_seen.max(t.abs());
                    }
                }
                assert!(
                    max_seen < bound,
                    "{f}: max product {max_seen} not below 2^{}",
                    2 * m + (1 << (e + 1)) - 2
                );
            }
        }
    }

    #[test]
    fn intra_accumulator_overflow_policies() {
        let mut acc = IntraAccumulator::new(8, OverflowPolicy::Error).unwrap();
        acc.accumulate(100).unwrap();
        assert!(matches!(
            acc.accumulate(100),
            Err(MlsError::AccumulatorOverflow(_))
        ));

        let mut acc = IntraAccumulator::new(8, OverflowPolicy::Saturate).unwrap();
        acc.accumulate(100).unwrap();
        acc.accumulate(100).unwrap();
        assert_eq!(acc.value(), 127);
        acc.accumulate(-300).unwrap();
        assert_eq!(acc.value(), -128);
    }

    #[test]
    fn wide_accumulate_single_and_pairs() {
        let f = fmt(2, 4);
        // single partial worth 1.0 under multiplier 1.0
        let p_one = 1i64 << (2 * f.m_bits() + 2 * (-f.min_normal_exp()) as u32);
        let acc = inter_group_accumulate(
            &[(p_one, ProductScale { exp_sum: 0, man_pair: 0 })],
            f,
        )
        .unwrap();
        assert_eq!(acc.value(), 1.0);

        // two partials under the 2.25 case, against direct rational evaluation
        let partials = [
            (37i64, ProductScale { exp_sum: 5, man_pair: 0b11 }),
            (-19i64, ProductScale { exp_sum: 2, man_pair: 0b11 }),
        ];
        let acc = inter_group_accumulate(&partials, f).unwrap();
        let qp = 2 * f.m_bits() as i32 - 2 * f.min_normal_exp();
        let want = 37.0 * 2.25 * pow2(-5 - qp) + (-19.0) * 2.25 * pow2(-2 - qp);
        assert_eq!(acc.value(), want);
    }

    #[test]
    fn shift_add_realization_equals_rational_multiplier_exhaustively() {
        let f = fmt(2, 4);
        let qp = 2 * f.m_bits() as i32 - 2 * f.min_normal_exp();
        for exp_sum in 0..=510u32 {
            for pair in 0..4u8 {
                let ps = ProductScale { exp_sum, man_pair: pair };
                let acc = inter_group_accumulate(&[(3, ps)], f).unwrap();
                let want = 3.0 * ps.multiplier() * pow2(-qp);
                assert_eq!(acc.value(), want, "exp_sum {exp_sum} pair {pair}");
                // the multiplier itself matches the rational form n/4 * 2^-es
                assert_eq!(
                    ps.multiplier(),
                    ps.quarters() as f64 / 4.0 * pow2(-(exp_sum as i32))
                );
            }
        }
    }

    #[test]
    fn wide_accumulator_overflows_on_extreme_scale_spread() {
        let f = fmt(2, 4);
        let partials = [
            (1000i64, ProductScale { exp_sum: 200, man_pair: 0 }),
            (1000i64, ProductScale { exp_sum: 0, man_pair: 0 }),
        ];
        assert!(matches!(
            inter_group_accumulate(&partials, f),
            Err(MlsError::WideOverflow(_))
        ));
        // zero partials carry no scale and must not widen the range
        let partials = [
            (0i64, ProductScale { exp_sum: 300, man_pair: 0 }),
            (7i64, ProductScale { exp_sum: 0, man_pair: 0 }),
        ];
        assert!(inter_group_accumulate(&partials, f).is_ok());
    }

    #[test]
    fn trivial_scalar_conv() {
        let c = qcfg(2, 4);
        let s = RngStream::new(0, 0, 0);
        let w = quantize(&Tensor4::new([1, 1, 1, 1], vec![2.0]).unwrap(), &c, &s).unwrap();
        let a = quantize(&Tensor4::new([1, 1, 1, 1], vec![3.0]).unwrap(), &c, &s).unwrap();
        let z = lowbit_conv(&w, &a, &ConvGeometry::forward(1, 0)).unwrap();
        assert_eq!(z.data(), &[6.0]);
    }

    #[test]
    fn identity_kernel_reproduces_quantized_input() {
        let c = qcfg(2, 4);
        let s = RngStream::new(3, 0, 1);
        let x = dyadic_tensor([1, 1, 5, 5], 8);
        let qa = quantize(&x, &c, &s).unwrap();
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let qw = quantize(&Tensor4::new([1, 1, 3, 3], kdata).unwrap(), &c, &s).unwrap();
        let z = lowbit_conv(&qw, &qa, &ConvGeometry::forward(1, 1)).unwrap();
        assert_eq!(z.data(), dequantize(&qa).data());
    }

    #[test]
    fn grouping_mismatch_rejected() {
        let c = QuantConfig::new(
            fmt(2, 4),
            fmt(8, 1),
            GroupingDim::Dim0,
            32,
            Rounding::Stochastic,
        )
        .unwrap();
        let s = RngStream::new(0, 0, 0);
        let w = quantize(&Tensor4::zeros([1, 1, 1, 1]), &c, &s).unwrap();
        let a = quantize(&Tensor4::zeros([1, 1, 1, 1]), &c, &s).unwrap();
        assert!(matches!(
            lowbit_conv(&w, &a, &ConvGeometry::forward(1, 0)),
            Err(MlsError::InvalidInput(_))
        ));
    }

    #[test]
    fn weight_grad_tiles_windows_that_exceed_the_accumulator() {
        // <2,1> with a 16-bit accumulator holds at most 2^(15-8) = 128
        // products per local accumulation; a 14x14 output map (196 products)
        // forces chunked flushes. The total must match the 32-bit run and the
        // dequantized oracle exactly.
        let mk = |acc_bits| {
            QuantConfig::new(
                fmt(2, 1),
                fmt(8, 1),
                GroupingDim::Dim0x1,
                acc_bits,
                Rounding::Stochastic,
            )
            .unwrap()
        };
        let s = RngStream::new(17, 0, 6);
        let run = |cfg: &QuantConfig| {
            let e = quantize(&dyadic_tensor([1, 3, 14, 14], 61), cfg, &s).unwrap();
            let a = quantize(&dyadic_tensor([1, 2, 14, 14], 62), cfg, &s).unwrap();
            let g = lowbit_conv(&e, &a, &ConvGeometry::weight_grad(1, 1, (3, 3))).unwrap();
            (e, a, g)
        };
        let (e16, a16, g16) = run(&mk(16));
        let (_, _, g32) = run(&mk(32));
        assert_eq!(g16.data(), g32.data());
        let want = oracle_conv(
            &dequantize(&e16),
            &dequantize(&a16),
            1,
            1,
            ConvVariant::WeightGrad,
            (3, 3),
        );
        assert_eq!(g16.data(), want.data());
    }

    #[test]
    fn window_too_large_for_accumulator() {
        let c = QuantConfig::new(
            fmt(2, 4),
            fmt(8, 1),
            GroupingDim::Dim0x1,
            16,
            Rounding::Stochastic,
        )
        .unwrap();
        let s = RngStream::new(0, 0, 0);
        // 3x3 window needs 14 + 4 = 18 bits, more than 16
        let w = quantize(&dyadic_tensor([2, 2, 3, 3], 1), &c, &s).unwrap();
        let a = quantize(&dyadic_tensor([1, 2, 6, 6], 2), &c, &s).unwrap();
        assert!(matches!(
            lowbit_conv(&w, &a, &ConvGeometry::forward(1, 1)),
            Err(MlsError::AccumulatorOverflow(_))
        ));
    }

    #[test]
    fn forward_matches_dequantized_oracle_exactly() {
        let c = qcfg(2, 4);
        let s = RngStream::new(5, 0, 2);
        let a = quantize(&dyadic_tensor([2, 4, 8, 8], 21), &c, &s).unwrap();
        let w = quantize(&dyadic_tensor([5, 4, 3, 3], 22), &c, &s).unwrap();
        let z = lowbit_conv(&w, &a, &ConvGeometry::forward(1, 1)).unwrap();
        let want = oracle_conv(
            &dequantize(&w),
            &dequantize(&a),
            1,
            1,
            ConvVariant::Forward,
            (0, 0),
        );
        assert_eq!(z.data(), want.data());
    }

    #[test]
    fn gradient_variants_match_oracles_exactly() {
        let c = qcfg(2, 4);
        let s = RngStream::new(9, 1, 3);
        for (stride, padding) in [(1usize, 1usize), (2, 1), (1, 0)] {
            let h = 6;
            let k = 3;
            let ho = (h + 2 * padding - k) / stride + 1;
            let e = quantize(&dyadic_tensor([2, 5, ho, ho], 31), &c, &s).unwrap();
            let a = quantize(&dyadic_tensor([2, 4, h, h], 32), &c, &s).unwrap();
            let w = quantize(&dyadic_tensor([5, 4, k, k], 33), &c, &s).unwrap();
            let g = lowbit_conv(&e, &a, &ConvGeometry::weight_grad(stride, padding, (k, k)))
                .unwrap();
            let g_want = oracle_conv(
                &dequantize(&e),
                &dequantize(&a),
                stride,
                padding,
                ConvVariant::WeightGrad,
                (k, k),
            );
            assert_eq!(g.data(), g_want.data(), "weight grad s={stride} p={padding}");

            let dx = lowbit_conv(&e, &w, &ConvGeometry::input_grad(stride, padding, (h, h)))
                .unwrap();
            let dx_want = oracle_conv(
                &dequantize(&e),
                &dequantize(&w),
                stride,
                padding,
                ConvVariant::InputGrad,
                (h, h),
            );
            assert_eq!(dx.data(), dx_want.data(), "input grad s={stride} p={padding}");
        }
    }

    #[test]
    fn tensor_scale_linearity() {
        let c = qcfg(2, 4);
        let s = RngStream::new(7, 0, 4);
        let a = quantize(&dyadic_tensor([1, 3, 5, 5], 41), &c, &s).unwrap();
        let w1 = quantize(&dyadic_tensor([2, 3, 3, 3], 42), &c, &s).unwrap();
        let mut w3 = w1.clone();
        w3.set_tensor_scale(3.0 * w1.tensor_scale());
        let z1 = lowbit_conv(&w1, &a, &ConvGeometry::forward(1, 1)).unwrap();
        let z3 = lowbit_conv(&w3, &a, &ConvGeometry::forward(1, 1)).unwrap();
        for (a_, b_) in z1.data().iter().zip(z3.data()) {
            assert_eq!(*b_, 3.0 * *a_);
        }
    }

    #[test]
    fn intra_accumulator_peak_fits_18_bits_for_3x3_windows() {
        // <2,4> with K=3: 9 products each below 2^14 keeps every running sum
        // below 2^18, so a 32-bit accumulator has ample headroom.
        let f = fmt(2, 4);
        let codes = f.codes_ascending();
        let mut peak = 0i64;
        for seed in 0..200u64 {
            let mut run = 0i64;
            for k in 0..9u64 {
                let cw = codes[(mix64(seed + 7 * k) % codes.len() as u64) as usize];
                let ca = codes[(mix64(seed + 13 * k + 1) % codes.len() as u64) as usize];
                let neg = mix64(seed + k) % 2 == 0;
                run += elem_int(f, cw, neg) * elem_int(f, ca, false);
                peak = peak.max(run.abs());
            }
        }
        assert!(peak < (1 << 18), "peak {peak}");
    }

    #[test]
    fn parallel_conv_is_bit_identical_across_worker_counts() {
        let c = qcfg(2, 4);
        let s = RngStream::new(11, 0, 5);
        let a = quantize(&dyadic_tensor([2, 8, 16, 16], 51), &c, &s).unwrap();
        let w = quantize(&dyadic_tensor([8, 8, 3, 3], 52), &c, &s).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| lowbit_conv(&w, &a, &ConvGeometry::forward(1, 1)).unwrap())
        };
        assert_eq!(run(1).data(), run(4).data());
    }
}
