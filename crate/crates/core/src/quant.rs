//! Dynamic quantization between float tensors and the multi-level-scaled
//! low-bit format, plus quantization-quality statistics.
//!
//! A quantized tensor reconstructs element-wise as
//! `sign * tensor_scale * decode(group_scale) * decode(elem)`.

use rayon::prelude::*;

use crate::error::{MlsError, Result};
use crate::format::{EmCode, EmFormat, Rounding};
use crate::tensor::{GroupingDim, RngStream, Tensor4};

/// Quantization configuration: element format, group-scale format, grouping
/// axis, intra-group accumulator width, and the element rounding rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub elem_fmt: EmFormat,
    pub group_fmt: EmFormat,
    pub grouping: GroupingDim,
    pub intra_acc_bits: u32,
    pub rounding: Rounding,
}

impl QuantConfig {
    pub fn new(
        elem_fmt: EmFormat,
        group_fmt: EmFormat,
        grouping: GroupingDim,
        intra_acc_bits: u32,
        rounding: Rounding,
    ) -> Result<QuantConfig> {
        if group_fmt.e_bits() == 0 {
            return Err(MlsError::InvalidInput(
                "group-scale format needs at least one exponent bit".into(),
            ));
        }
        if group_fmt.m_bits() > 1 {
            return Err(MlsError::InvalidInput(format!(
                "group-scale format {group_fmt} unsupported: mantissa must be 0 or 1 bit \
                 so scale products stay shift-add realizable"
            )));
        }
        if !matches!(intra_acc_bits, 8 | 16 | 32) {
            return Err(MlsError::InvalidInput(format!(
                "intra-group accumulator width must be 8, 16 or 32, got {intra_acc_bits}"
            )));
        }
        let cfg = QuantConfig {
            elem_fmt,
            group_fmt,
            grouping,
            intra_acc_bits,
            rounding,
        };
        if cfg.product_bits() >= intra_acc_bits {
            return Err(MlsError::InvalidInput(format!(
                "element format {elem_fmt} needs {} product bits, accumulator has {intra_acc_bits}",
                cfg.product_bits()
            )));
        }
        Ok(cfg)
    }

    /// Bit width of a single element-pair product: `2M + 2^(E+1) - 2`.
    pub fn product_bits(&self) -> u32 {
        2 * self.elem_fmt.m_bits() + (1u32 << (self.elem_fmt.e_bits() + 1)) - 2
    }

    /// Largest reduction window the accumulator width admits.
    pub fn max_window(&self) -> u64 {
        let spare = self.intra_acc_bits.saturating_sub(1 + self.product_bits());
        1u64 << spare.min(63)
    }

    /// Accumulator width needed for a reduction window of `window` products.
    pub fn required_acc_bits(elem_fmt: EmFormat, window: u64) -> u32 {
        let product = 2 * elem_fmt.m_bits() + (1u32 << (elem_fmt.e_bits() + 1)) - 2;
        product + (64 - window.max(1).leading_zeros()).max(1)
    }
}

/// A quantized 4-d tensor: per-element signs and low-bit codes, per-group
/// scale codes, and one full-precision tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MlsTensor {
    dims: [usize; 4],
    config: QuantConfig,
    tensor_scale: f64,
    group_scales: Vec<EmCode>,
    /// true = negative
    signs: Vec<bool>,
    elems: Vec<EmCode>,
}

impl MlsTensor {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn grouping(&self) -> GroupingDim {
        self.config.grouping
    }

    pub fn tensor_scale(&self) -> f64 {
        self.tensor_scale
    }

    /// Replace the tensor-wise scale. The integer content is untouched, so the
    /// reconstructed tensor scales linearly; this is the knob tensor-scale
    /// folding turns.
    pub fn set_tensor_scale(&mut self, s: f64) {
        self.tensor_scale = s;
    }

    pub fn group_scales(&self) -> &[EmCode] {
        &self.group_scales
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn elems(&self) -> &[EmCode] {
        &self.elems
    }

    pub fn group_count(&self) -> usize {
        self.group_scales.len()
    }

    #[inline]
    pub fn group_of(&self, flat: usize) -> usize {
        let inner = self.dims[2] * self.dims[3];
        match self.config.grouping {
            GroupingDim::None => 0,
            GroupingDim::Dim0 => flat / (self.dims[1] * inner),
            GroupingDim::Dim1 => (flat / inner) % self.dims[1],
            GroupingDim::Dim0x1 => flat / inner,
        }
    }

    /// Decoded group-scale values.
    pub fn group_scale_values(&self) -> Vec<f64> {
        self.group_scales
            .iter()
            .map(|&c| self.config.group_fmt.decode(c))
            .collect()
    }

    /// Sign-folded integer mantissa view of the elements, at fixed-point scale
    /// `2^(min_normal_exp - M)` of the element format. This is the integer the
    /// intra-group MAC multiplies: `(2^M + man) << (max_normal_exp - exp)` for
    /// normal codes, `man` for subnormal ones.
    pub fn elem_ints(&self) -> Vec<i32> {
        let fmt = self.config.elem_fmt;
        let m = fmt.m_bits();
        let sub = fmt.subnormal_exp_field() as u8;
        let max_normal = fmt.max_normal_exp_field().unwrap_or(0);
        self.elems
            .iter()
            .zip(&self.signs)
            .map(|(&c, &neg)| {
                let v = if c.exp_field == sub {
                    c.man_field as i32
                } else {
                    (((1u32 << m) + c.man_field as u32) << (max_normal - c.exp_field as u32))
                        as i32
                };
                if neg {
                    -v
                } else {
                    v
                }
            })
            .collect()
    }

    /// Largest magnitude in [`Self::elem_ints`] for the format (data independent).
    pub fn max_elem_int(&self) -> i64 {
        let fmt = self.config.elem_fmt;
        let m = fmt.m_bits();
        match fmt.max_normal_exp_field() {
            Some(e) => (((1u32 << m) * 2 - 1) as i64) << e,
            None => (1i64 << m) - 1,
        }
    }
}

fn encode_group_scale(fmt: EmFormat, sgf: f64) -> EmCode {
    debug_assert!((0.0..=1.0).contains(&sgf));
    let min_normal = crate::format::pow2(fmt.min_normal_exp());
    if sgf == 0.0 || sgf < min_normal {
        // all-zero or deeply small group: smallest positive normal code
        EmCode::new(fmt.max_normal_exp_field().unwrap() as u8, 0)
    } else {
        // sgf in [min_normal, 1]: CeilMagnitude encode stays in the normal range
        fmt.encode(sgf, Rounding::CeilMagnitude, None).unwrap()
    }
}

/// Convert a float tensor into the multi-level-scaled format.
///
/// Group scales are ceiling-rounded so that `tensor_scale * decode(group_scale)`
/// covers every group's maximum; elements are then encoded from
/// `|x| / (tensor_scale * decode(group_scale))`, which lies in `[0, 1]`.
/// Exact zeros encode as canonical zero with positive sign. An all-zero tensor
/// gets `tensor_scale = 1`.
pub fn quantize(x: &Tensor4, cfg: &QuantConfig, stream: &RngStream) -> Result<MlsTensor> {
    x.assert_finite()?;
    let maxima = x.group_reduce_max_abs(cfg.grouping)?;
    let mut tensor_scale = maxima.iter().cloned().fold(0.0f64, f64::max);
    if tensor_scale == 0.0 {
        tensor_scale = 1.0;
    }

    let mut group_scales = Vec::with_capacity(maxima.len());
    let mut denoms = Vec::with_capacity(maxima.len());
    for &m in &maxima {
        let mut code = encode_group_scale(cfg.group_fmt, m / tensor_scale);
        // guard against the f64 quotient rounding down onto a lattice point
        while tensor_scale * cfg.group_fmt.decode(code) < m {
            code = cfg.group_fmt.next_up_normal(code);
        }
        group_scales.push(code);
        denoms.push(tensor_scale * cfg.group_fmt.decode(code));
    }

    let n = x.len();
    let mut signs = vec![false; n];
    let mut elems = vec![cfg.elem_fmt.zero(); n];
    let inner = x.dims()[2] * x.dims()[3];
    let d1 = x.dims()[1];
    let grouping = cfg.grouping;
    let elem_fmt = cfg.elem_fmt;
    let rounding = cfg.rounding;
    let data = x.data();

    let encode_chunk = |start: usize, signs: &mut [bool], elems: &mut [EmCode]| {
        for (k, (s, e)) in signs.iter_mut().zip(elems.iter_mut()).enumerate() {
            let i = start + k;
            let v = data[i];
            *s = v < 0.0;
            let g = match grouping {
                GroupingDim::None => 0,
                GroupingDim::Dim0 => i / (d1 * inner),
                GroupingDim::Dim1 => (i / inner) % d1,
                GroupingDim::Dim0x1 => i / inner,
            };
            let xf = v.abs() / denoms[g];
            let u = if rounding == Rounding::Stochastic {
                Some(stream.uniform(i as u64))
            } else {
                None
            };
            // xf <= 1 by the ceiling guarantee; encode is total on [0, inf)
            *e = elem_fmt.encode(xf, rounding, u).unwrap();
        }
    };

    const PAR_CHUNK: usize = 1 << 14;
    if n >= 2 * PAR_CHUNK {
        signs
            .par_chunks_mut(PAR_CHUNK)
            .zip(elems.par_chunks_mut(PAR_CHUNK))
            .enumerate()
            .for_each(|(ci, (s, e))| encode_chunk(ci * PAR_CHUNK, s, e));
    } else {
        encode_chunk(0, &mut signs, &mut elems);
    }

    Ok(MlsTensor {
        dims: x.dims(),
        config: *cfg,
        tensor_scale,
        group_scales,
        signs,
        elems,
    })
}

/// Reconstruct the float tensor `sign * S_t * decode(S_g) * decode(elem)`.
pub fn dequantize(q: &MlsTensor) -> Tensor4 {
    let group_vals: Vec<f64> = q
        .group_scales
        .iter()
        .map(|&c| q.tensor_scale * q.config.group_fmt.decode(c))
        .collect();
    let fmt = q.config.elem_fmt;
    let data: Vec<f64> = q
        .elems
        .iter()
        .zip(&q.signs)
        .enumerate()
        .map(|(i, (&c, &neg))| {
            let v = group_vals[q.group_of(i)] * fmt.decode(c);
            if neg {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor4::new(q.dims, data).expect("dims consistent by construction")
}

/// Average relative quantization error `sum|x - x_hat| / sum|x|` (relative L1).
/// Returns 0 for exact reconstruction and for the all-zero tensor.
pub fn are(x: &Tensor4, q: &MlsTensor) -> Result<f64> {
    if x.dims() != q.dims() {
        return Err(MlsError::ShapeMismatch(format!(
            "are: tensor dims {:?} vs quantized dims {:?}",
            x.dims(),
            q.dims()
        )));
    }
    let xhat = dequantize(q);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.data().iter().zip(xhat.data()) {
        num += (a - b).abs();
        den += a.abs();
    }
    if den == 0.0 {
        Ok(0.0)
    } else {
        Ok(num / den)
    }
}

/// Per-group maxima plus the overall maximum and how many groups stay below
/// half of it.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMaxProfile {
    pub maxima: Vec<f64>,
    pub overall: f64,
    pub below_half: usize,
}

pub fn group_max_profile(x: &Tensor4, g: GroupingDim) -> Result<GroupMaxProfile> {
    let maxima = x.group_reduce_max_abs(g)?;
    let overall = maxima.iter().cloned().fold(0.0f64, f64::max);
    let below_half = maxima.iter().filter(|&&m| m < overall / 2.0).count();
    Ok(GroupMaxProfile {
        maxima,
        overall,
        below_half,
    })
}

pub const MLS_BLOB_MAGIC: &[u8; 4] = b"MLSQ";
pub const MLS_BLOB_VERSION: u8 = 1;

/// Serialize a quantized tensor: magic "MLSQ", version, config bytes
/// (E_x, M_x, E_g, M_g, grouping, acc bits, rounding), dims as four u32 LE,
/// tensor scale as f64 LE, group scales as (exp_field, man_field) byte pairs,
/// then one byte per element: bit 7 = sign, low `E_x+M_x` bits = exp‖man.
pub fn write_mls_blob(q: &MlsTensor, w: &mut impl std::io::Write) -> Result<()> {
    let fmt = q.config.elem_fmt;
    if fmt.e_bits() + fmt.m_bits() > 7 {
        return Err(MlsError::InvalidInput(format!(
            "element format {fmt} does not fit the one-byte element layout"
        )));
    }
    w.write_all(MLS_BLOB_MAGIC)?;
    w.write_all(&[
        MLS_BLOB_VERSION,
        fmt.e_bits() as u8,
        fmt.m_bits() as u8,
        q.config.group_fmt.e_bits() as u8,
        q.config.group_fmt.m_bits() as u8,
        q.config.grouping.code(),
        q.config.intra_acc_bits as u8,
        q.config.rounding.code(),
    ])?;
    for d in q.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&q.tensor_scale.to_le_bytes())?;
    for c in &q.group_scales {
        w.write_all(&[c.exp_field, c.man_field])?;
    }
    let m = fmt.m_bits();
    for (c, &neg) in q.elems.iter().zip(&q.signs) {
        let b = ((neg as u8) << 7) | (c.exp_field << m) | c.man_field;
        w.write_all(&[b])?;
    }
    Ok(())
}

pub fn read_mls_blob(r: &mut impl std::io::Read) -> Result<MlsTensor> {
    let bad = |offset: u64, msg: String| MlsError::Format {
        path: String::new(),
        offset,
        msg,
    };
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| bad(0, "truncated header".into()))?;
    if &head[..4] != MLS_BLOB_MAGIC {
        return Err(bad(0, "bad magic, expected \"MLSQ\"".into()));
    }
    if head[4] != MLS_BLOB_VERSION {
        return Err(bad(4, format!("unsupported version {}", head[4])));
    }
    let elem_fmt = EmFormat::new(head[5] as u32, head[6] as u32)?;
    let group_fmt = EmFormat::new(head[7] as u32, head[8] as u32)?;
    let grouping = GroupingDim::from_code(head[9])
        .ok_or_else(|| bad(9, format!("bad grouping code {}", head[9])))?;
    let rounding = Rounding::from_code(head[11])
        .ok_or_else(|| bad(11, format!("bad rounding code {}", head[11])))?;
    let config = QuantConfig::new(elem_fmt, group_fmt, grouping, head[10] as u32, rounding)?;

    let mut dims = [0usize; 4];
    let mut b4 = [0u8; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        r.read_exact(&mut b4)
            .map_err(|_| bad(12 + 4 * k as u64, "truncated extents".into()))?;
        *d = u32::from_le_bytes(b4) as usize;
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|_| bad(28, "truncated tensor scale".into()))?;
    let tensor_scale = f64::from_le_bytes(b8);
    if !tensor_scale.is_finite() || tensor_scale < 0.0 {
        return Err(bad(28, format!("bad tensor scale {tensor_scale}")));
    }

    let probe = Tensor4::zeros(dims);
    let group_count = probe.group_count(grouping);
    let mut group_scales = Vec::with_capacity(group_count);
    let mut b2 = [0u8; 2];
    for k in 0..group_count {
        r.read_exact(&mut b2)
            .map_err(|_| bad(36 + 2 * k as u64, "truncated group scales".into()))?;
        let c = EmCode::new(b2[0], b2[1]);
        if !group_fmt.code_in_range(c) || group_fmt.is_subnormal(c) {
            return Err(bad(
                36 + 2 * k as u64,
                format!("group scale code {c:?} invalid for {group_fmt}"),
            ));
        }
        group_scales.push(c);
    }

    let n: usize = dims.iter().product();
    let elem_base = 36 + 2 * group_count as u64;
    let m = elem_fmt.m_bits();
    let man_mask = ((1u32 << m) - 1) as u8;
    let mut signs = Vec::with_capacity(n);
    let mut elems = Vec::with_capacity(n);
    let mut b1 = [0u8; 1];
    for i in 0..n {
        r.read_exact(&mut b1)
            .map_err(|_| bad(elem_base + i as u64, "truncated elements".into()))?;
        let b = b1[0];
        let c = EmCode::new((b & 0x7f) >> m, b & man_mask);
        if !elem_fmt.code_in_range(c) {
            return Err(bad(
                elem_base + i as u64,
                format!("element code {c:?} invalid for {elem_fmt}"),
            ));
        }
        signs.push(b & 0x80 != 0);
        elems.push(c);
    }

    Ok(MlsTensor {
        dims,
        config,
        tensor_scale,
        group_scales,
        signs,
        elems,
    })
}

pub fn read_mls_blob_file(path: &std::path::Path) -> Result<MlsTensor> {
    let f = std::fs::File::open(path).map_err(MlsError::Io)?;
    let mut r = std::io::BufReader::new(f);
    read_mls_blob(&mut r).map_err(|e| crate::tensor::with_path(e, path))
}

pub fn write_mls_blob_file(q: &MlsTensor, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(MlsError::Io)?;
    let mut w = std::io::BufWriter::new(f);
    write_mls_blob(q, &mut w)
}
