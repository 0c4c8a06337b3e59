//! Dense 4-d tensor container, grouping machinery, the counter-based RNG used
//! by stochastic rounding, and the MLST tensor blob format.

use std::io::{Read, Write};

use crate::error::{MlsError, Result};

/// Axis grouping for group-wise scaling: no grouping, first axis, second axis,
/// or both leading axes jointly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupingDim {
    None,
    Dim0,
    Dim1,
    Dim0x1,
}

impl GroupingDim {
    pub fn code(self) -> u8 {
        match self {
            GroupingDim::None => 0,
            GroupingDim::Dim0 => 1,
            GroupingDim::Dim1 => 2,
            GroupingDim::Dim0x1 => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<GroupingDim> {
        match c {
            0 => Some(GroupingDim::None),
            1 => Some(GroupingDim::Dim0),
            2 => Some(GroupingDim::Dim1),
            3 => Some(GroupingDim::Dim0x1),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<GroupingDim> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Some(GroupingDim::None),
            "dim0" => Some(GroupingDim::Dim0),
            "dim1" => Some(GroupingDim::Dim1),
            "dim0x1" => Some(GroupingDim::Dim0x1),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupingDim::None => "none",
            GroupingDim::Dim0 => "dim0",
            GroupingDim::Dim1 => "dim1",
            GroupingDim::Dim0x1 => "dim0x1",
        }
    }
}

/// Dense 4-d tensor of f64 values in row-major order.
///
/// Axis roles by convention: weights are (co, ci, kh, kw); activations and
/// errors are (n, c, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Tensor4> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(MlsError::ShapeMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Tensor4 {
        let n = dims.iter().product();
        Tensor4 {
            dims,
            data: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, i: [usize; 4]) -> usize {
        debug_assert!(i[0] < self.dims[0] && i[1] < self.dims[1]);
        debug_assert!(i[2] < self.dims[2] && i[3] < self.dims[3]);
        ((i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2]) * self.dims[3] + i[3]
    }

    #[inline]
    pub fn at(&self, i: [usize; 4]) -> f64 {
        self.data[self.offset(i)]
    }

    #[inline]
    pub fn set(&mut self, i: [usize; 4], v: f64) {
        let o = self.offset(i);
        self.data[o] = v;
    }

    pub fn assert_finite(&self) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(MlsError::InvalidInput(format!(
                    "non-finite value {v} at flat index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Number of groups under `g`.
    pub fn group_count(&self, g: GroupingDim) -> usize {
        match g {
            GroupingDim::None => 1,
            GroupingDim::Dim0 => self.dims[0],
            GroupingDim::Dim1 => self.dims[1],
            GroupingDim::Dim0x1 => self.dims[0] * self.dims[1],
        }
    }

    /// Group index of a flat element index.
    #[inline]
    pub fn group_of(&self, flat: usize, g: GroupingDim) -> usize {
        let inner = self.dims[2] * self.dims[3];
        match g {
            GroupingDim::None => 0,
            GroupingDim::Dim0 => flat / (self.dims[1] * inner),
            GroupingDim::Dim1 => (flat / inner) % self.dims[1],
            GroupingDim::Dim0x1 => flat / inner,
        }
    }

    /// Per-group maximum of absolute values.
    pub fn group_reduce_max_abs(&self, g: GroupingDim) -> Result<Vec<f64>> {
        if self.dims.contains(&0) {
            return Err(MlsError::EmptyTensor(format!(
                "group reduction over empty tensor {:?}",
                self.dims
            )));
        }
        let mut out = vec![0.0f64; self.group_count(g)];
        for (i, v) in self.data.iter().enumerate() {
            let k = self.group_of(i, g);
            let a = v.abs();
            if a > out[k] {
                out[k] = a;
            }
        }
        Ok(out)
    }
}

/// splitmix64 finalizer; fixed forever, outputs are part of the format contract.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic counter-based random stream.
///
/// The variate for flat index `i` is a pure function of
/// `(seed, step, tensor_tag, i)`, so results are independent of evaluation
/// order and worker count. The mixing function (three chained splitmix64
/// finalizers over the tuple) is stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub step: u64,
    pub tensor_tag: u64,
}

impl RngStream {
    pub fn new(seed: u64, step: u64, tensor_tag: u64) -> RngStream {
        RngStream {
            seed,
            step,
            tensor_tag,
        }
    }

    #[inline]
    fn word(&self, i: u64) -> u64 {
        let h = mix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let h = mix64(h ^ self.step.wrapping_mul(0xd1b5_4a32_d192_ed03));
        let h = mix64(h ^ self.tensor_tag.wrapping_mul(0xa55a_a5a5_5aa5_5a5b));
        mix64(h ^ i.wrapping_mul(0x2545_f491_4f6c_dd1d))
    }

    /// Uniform variate in `[-1/2, 1/2)` for flat element index `i`.
    #[inline]
    pub fn uniform(&self, i: u64) -> f64 {
        (self.word(i) >> 11) as f64 * (1.0 / 9007199254740992.0) - 0.5
    }

    /// Uniform variate in `[0, 1)`; used by initialization and shuffling.
    #[inline]
    pub fn unit(&self, i: u64) -> f64 {
        (self.word(i) >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal via Box-Muller on two counter draws.
    pub fn normal(&self, i: u64) -> f64 {
        let u1 = self.unit(2 * i).max(1e-300);
        let u2 = self.unit(2 * i + 1);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Deterministic Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (self.word(i as u64) % (i as u64 + 1)) as usize;
            p.swap(i, j);
        }
        p
    }
}

pub const TENSOR_BLOB_MAGIC: &[u8; 4] = b"MLST";
pub const TENSOR_BLOB_VERSION: u8 = 1;

/// Write a tensor blob: magic "MLST", version byte, four little-endian u32
/// extents, then row-major little-endian f32 data.
pub fn write_tensor_blob(t: &Tensor4, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(TENSOR_BLOB_MAGIC)?;
    w.write_all(&[TENSOR_BLOB_VERSION])?;
    for d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| MlsError::Format {
        path: String::new(),
        offset,
        msg: format!("truncated while reading {what}"),
    })
}

/// Read a tensor blob written by [`write_tensor_blob`]. The error's `path`
/// field is empty; callers reading from files fill it in.
pub fn read_tensor_blob(r: &mut impl Read) -> Result<Tensor4> {
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, 0, "magic")?;
    if &magic != TENSOR_BLOB_MAGIC {
        return Err(MlsError::Format {
            path: String::new(),
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"MLST\""),
        });
    }
    let mut version = [0u8; 1];
    read_exact_at(r, &mut version, 4, "version")?;
    if version[0] != TENSOR_BLOB_VERSION {
        return Err(MlsError::Format {
            path: String::new(),
            offset: 4,
            msg: format!("unsupported version {}", version[0]),
        });
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        read_exact_at(r, &mut b, 5 + 4 * k as u64, "extents")?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 4];
    for i in 0..n {
        read_exact_at(r, &mut b, 21 + 4 * i as u64, "tensor data")?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Tensor4::new(dims, data)
}

/// Attach a file path to format errors produced by blob / dataset readers.
pub(crate) fn with_path(err: MlsError, path: &std::path::Path) -> MlsError {
    match err {
        MlsError::Format { offset, msg, .. } => MlsError::Format {
            path: path.display().to_string(),
            offset,
            msg,
        },
        other => other,
    }
}

pub fn read_tensor_blob_file(path: &std::path::Path) -> Result<Tensor4> {
    let f = std::fs::File::open(path).map_err(MlsError::Io)?;
    let mut r = std::io::BufReader::new(f);
    read_tensor_blob(&mut r).map_err(|e| with_path(e, path))
}

pub fn write_tensor_blob_file(t: &Tensor4, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(MlsError::Io)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor_blob(t, &mut w).map_err(MlsError::Io)
}
