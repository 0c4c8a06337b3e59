//! Unsigned `<E,M>` minifloat codec with gradual underflow, plus the rounding
//! primitives used by the quantizer.
//!
//! A code `(exp_field, man_field)` in format `<E,M>` decodes to
//!
//! * `(1 + man/2^M) * 2^(-exp_field)` when `exp_field < 2^E - 1` (normal), and
//! * `(man/2^M) * 2^(-(2^E - 2))` when `exp_field == 2^E - 1` (gradual underflow,
//!   gapless, scaled by the minimum normal exponent as in IEEE 754).
//!
//! There is no sign bit; signs live in the tensor container. All decoded values
//! are dyadic rationals exact in f64 for every supported width (E <= 8, M <= 8),
//! so encode/decode are exact operations.

use crate::error::{MlsError, Result};

/// Exact `2^e` for the exponent range this crate uses.
pub(crate) fn pow2(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if (-1074..-1022).contains(&e) {
        // subnormal doubles, still exact
        f64::from_bits(1u64 << (e + 1074))
    } else if e > 1023 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `floor(log2(x))` for finite positive `x`, computed from the bit pattern.
pub(crate) fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_finite() && x > 0.0);
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased != 0 {
        biased - 1023
    } else {
        // subnormal double
        let mant = bits & ((1u64 << 52) - 1);
        -1023 - (mant.leading_zeros() as i32 - 11)
    }
}

/// Rounding rule applied when a real value is pushed onto a format lattice.
///
/// `Stochastic` needs a uniform variate in `[-1/2, 1/2]`; `CeilMagnitude` is
/// reserved for group scales, where rounding up preserves the `X_f <= 1`
/// guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    Stochastic,
    NearestEven,
    TowardZero,
    CeilMagnitude,
}

impl Rounding {
    pub fn code(self) -> u8 {
        match self {
            Rounding::Stochastic => 0,
            Rounding::NearestEven => 1,
            Rounding::TowardZero => 2,
            Rounding::CeilMagnitude => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Rounding> {
        match c {
            0 => Some(Rounding::Stochastic),
            1 => Some(Rounding::NearestEven),
            2 => Some(Rounding::TowardZero),
            3 => Some(Rounding::CeilMagnitude),
            _ => None,
        }
    }
}

/// Round `x + u` to the nearest integer (ties away from zero).
///
/// With `u` uniform in `[-1/2, 1/2]` this returns `ceil(x)` with probability
/// `x - floor(x)` and `floor(x)` otherwise, so the expectation equals `x`.
pub fn stochastic_round(x: f64, u: f64) -> i64 {
    debug_assert!((-0.5..=0.5).contains(&u), "offset must be in [-1/2, 1/2]");
    (x + u).round() as i64
}

/// An encoded `<E,M>` value: unsigned exponent and mantissa fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EmCode {
    pub exp_field: u8,
    pub man_field: u8,
}

impl EmCode {
    pub fn new(exp_field: u8, man_field: u8) -> Self {
        EmCode {
            exp_field,
            man_field,
        }
    }
}

/// Bit widths of an `<E,M>` format. `E` may be 0 (pure fixed-point lattice,
/// every code is in the underflow range).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EmFormat {
    e_bits: u32,
    m_bits: u32,
}

impl EmFormat {
    pub fn new(e_bits: u32, m_bits: u32) -> Result<EmFormat> {
        if e_bits > 8 || m_bits > 8 {
            return Err(MlsError::InvalidInput(format!(
                "unsupported format <{e_bits},{m_bits}>: need E <= 8 and M <= 8"
            )));
        }
        Ok(EmFormat { e_bits, m_bits })
    }

    pub fn e_bits(&self) -> u32 {
        self.e_bits
    }

    pub fn m_bits(&self) -> u32 {
        self.m_bits
    }

    /// Exponent field value that marks the underflow (subnormal) range.
    pub fn subnormal_exp_field(&self) -> u32 {
        (1u32 << self.e_bits) - 1
    }

    /// Largest exponent field of a normal code, `2^E - 2`. None when E = 0
    /// (the format has no normal codes).
    pub fn max_normal_exp_field(&self) -> Option<u32> {
        (self.e_bits > 0).then(|| (1u32 << self.e_bits) - 2)
    }

    /// Minimum normal exponent `-(2^E - 2)`; subnormals are scaled by
    /// `2^min_normal_exp` so the lattice is gapless.
    pub fn min_normal_exp(&self) -> i32 {
        -((1i32 << self.e_bits) - 2)
    }

    /// Spacing of the subnormal lattice (also the spacing at the bottom of the
    /// normal range).
    pub fn subnormal_step(&self) -> f64 {
        pow2(self.min_normal_exp() - self.m_bits as i32)
    }

    pub fn zero(&self) -> EmCode {
        EmCode::new(self.subnormal_exp_field() as u8, 0)
    }

    /// Largest-magnitude code; everything above its value saturates here.
    pub fn max_code(&self) -> EmCode {
        EmCode::new(0, ((1u32 << self.m_bits) - 1) as u8)
    }

    pub fn max_value(&self) -> f64 {
        self.decode(self.max_code())
    }

    pub fn is_subnormal(&self, c: EmCode) -> bool {
        c.exp_field as u32 == self.subnormal_exp_field()
    }

    pub fn code_in_range(&self, c: EmCode) -> bool {
        (c.exp_field as u32) < (1u32 << self.e_bits).max(1)
            && (c.man_field as u32) < (1u32 << self.m_bits)
    }

    /// All codes of the format, ordered by increasing decoded value
    /// (subnormals first, then normals bottom-up).
    pub fn codes_ascending(&self) -> Vec<EmCode> {
        let mut out = Vec::new();
        let man_count = 1u32 << self.m_bits;
        let sub = self.subnormal_exp_field();
        for man in 0..man_count {
            out.push(EmCode::new(sub as u8, man as u8));
        }
        if let Some(max_normal) = self.max_normal_exp_field() {
            for exp in (0..=max_normal).rev() {
                for man in 0..man_count {
                    out.push(EmCode::new(exp as u8, man as u8));
                }
            }
        }
        out
    }

    /// Decode a code to its exact nonnegative value. Total over in-range codes.
    pub fn decode(&self, c: EmCode) -> f64 {
        debug_assert!(self.code_in_range(c), "code {c:?} out of range for {self:?}");
        let m = self.m_bits as i32;
        if self.is_subnormal(c) {
            c.man_field as f64 * pow2(self.min_normal_exp() - m)
        } else {
            let frac_int = (1u32 << self.m_bits) + c.man_field as u32;
            frac_int as f64 * pow2(-(c.exp_field as i32) - m)
        }
    }

    /// Lattice spacing at the code's exponent level.
    pub fn ulp_at(&self, c: EmCode) -> f64 {
        if self.is_subnormal(c) {
            self.subnormal_step()
        } else {
            pow2(-(c.exp_field as i32) - self.m_bits as i32)
        }
    }

    /// Encode a nonnegative real onto the lattice.
    ///
    /// Values above the maximum representable saturate to the maximum code;
    /// values in the underflow range round within the subnormal lattice
    /// (possibly to zero). `u` is consumed only by `Rounding::Stochastic`.
    pub fn encode(&self, x: f64, mode: Rounding, u: Option<f64>) -> Result<EmCode> {
        if !x.is_finite() || x < 0.0 {
            return Err(MlsError::InvalidInput(format!(
                "encode requires a finite nonnegative value, got {x}"
            )));
        }
        if mode == Rounding::Stochastic && u.is_none() {
            return Err(MlsError::InvalidInput(
                "stochastic rounding requires a uniform variate".into(),
            ));
        }
        if x == 0.0 {
            return Ok(self.zero());
        }

        let round_int = |t: f64| -> i64 {
            match mode {
                Rounding::Stochastic => stochastic_round(t, u.unwrap()),
                Rounding::NearestEven => t.round_ties_even() as i64,
                Rounding::TowardZero => t.trunc() as i64,
                Rounding::CeilMagnitude => t.ceil() as i64,
            }
        };

        let m = self.m_bits as i32;
        let man_count = 1i64 << self.m_bits;
        let min_normal_exp = self.min_normal_exp();
        let e_nat = floor_log2(x);

        if x >= 2.0 {
            return Ok(self.max_code());
        }

        if self.e_bits == 0 || e_nat < min_normal_exp {
            // Underflow range: quantize in units of the subnormal step.
            let k = round_int(x * pow2(m - min_normal_exp));
            let k = k.max(0);
            return Ok(if k >= man_count {
                match self.max_normal_exp_field() {
                    // carries exactly onto the smallest normal
                    Some(e) => EmCode::new(e as u8, 0),
                    None => self.max_code(),
                }
            } else {
                EmCode::new(self.subnormal_exp_field() as u8, k as u8)
            });
        }

        // Normal range: e_nat in [min_normal_exp, 0].
        let exp_field = -e_nat;
        let frac = x * pow2(-e_nat); // in [1, 2), exact
        let man = round_int((frac - 1.0) * pow2(m)).max(0);
        Ok(if man >= man_count {
            if exp_field == 0 {
                self.max_code()
            } else {
                EmCode::new((exp_field - 1) as u8, 0)
            }
        } else {
            EmCode::new(exp_field as u8, man as u8)
        })
    }

    /// Next code up the lattice within the normal range only (used by the
    /// group-scale ceiling guarantee). Saturates at exponent field 0, mantissa 0
    /// (value 1.0 for scale usage).
    pub(crate) fn next_up_normal(&self, c: EmCode) -> EmCode {
        debug_assert!(!self.is_subnormal(c));
        let man_max = ((1u32 << self.m_bits) - 1) as u8;
        if c.man_field < man_max {
            EmCode::new(c.exp_field, c.man_field + 1)
        } else if c.exp_field > 0 {
            EmCode::new(c.exp_field - 1, 0)
        } else {
            c
        }
    }
}

impl std::fmt::Display for EmFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "<{},{}>", self.e_bits, self.m_bits)
    }
}
