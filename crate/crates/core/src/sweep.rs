//! Quantization-error sweep harness: a cartesian grid over element format,
//! group-scale mantissa width, and grouping axis, run over synthetic Gaussian
//! tensors or captured tensor blobs, emitting one CSV row per cell.

use std::path::{Path, PathBuf};

use crate::error::{MlsError, Result};
use crate::format::{EmFormat, Rounding};
use crate::quant::{are, group_max_profile, quantize, QuantConfig};
use crate::tensor::{GroupingDim, RngStream, Tensor4};

const MAX_CELLS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum SweepSource {
    Gaussian { dims: [usize; 4] },
    Files { paths: Vec<PathBuf> },
}

/// Parsed sweep specification.
///
/// Key syntax (one `key = value` per line, `#` comments):
/// `ex = 0,1,2` / `mx = 1,2,3,4` / `eg = 8` / `mg = 0,1` /
/// `grouping = none,dim0,dim1,dim0x1` / `seeds = 20` /
/// `source = gaussian:64,64,3,3` or `source = files:/path/to/dir` /
/// `rounding = stochastic|nearest`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub ex: Vec<u32>,
    pub mx: Vec<u32>,
    pub eg: Vec<u32>,
    pub mg: Vec<u32>,
    pub groupings: Vec<GroupingDim>,
    pub seeds: u64,
    pub source: SweepSource,
    pub rounding: Rounding,
}

impl Default for SweepSpec {
    fn default() -> SweepSpec {
        SweepSpec {
            ex: vec![0],
            mx: vec![3],
            eg: vec![8],
            mg: vec![1],
            groupings: vec![GroupingDim::Dim0x1],
            seeds: 1,
            source: SweepSource::Gaussian {
                dims: [64, 64, 3, 3],
            },
            rounding: Rounding::Stochastic,
        }
    }
}

impl SweepSpec {
    pub fn cells(&self) -> usize {
        self.ex.len() * self.mx.len() * self.eg.len() * self.mg.len() * self.groupings.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells() == 0 {
            return Err(MlsError::InvalidInput("sweep grid is empty".into()));
        }
        if self.cells() > MAX_CELLS {
            return Err(MlsError::InvalidInput(format!(
                "sweep grid has {} cells, limit is {MAX_CELLS}",
                self.cells()
            )));
        }
        if self.seeds == 0 {
            return Err(MlsError::InvalidInput("seeds must be positive".into()));
        }
        Ok(())
    }
}

fn bad(line: usize, msg: impl Into<String>) -> MlsError {
    MlsError::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_u32_list(line: usize, key: &str, v: &str) -> Result<Vec<u32>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| bad(line, format!("`{key}`: bad entry `{s}`")))
        })
        .collect()
}

pub fn parse_sweep_spec(text: &str) -> Result<SweepSpec> {
    let mut spec = SweepSpec::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let Some((k, v)) = l.split_once('=') else {
            return Err(bad(line, format!("expected `key = value`, got `{raw}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "ex" => spec.ex = parse_u32_list(line, k, v)?,
            "mx" => spec.mx = parse_u32_list(line, k, v)?,
            "eg" => spec.eg = parse_u32_list(line, k, v)?,
            "mg" => spec.mg = parse_u32_list(line, k, v)?,
            "grouping" => {
                spec.groupings = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        GroupingDim::parse(s)
                            .ok_or_else(|| bad(line, format!("unknown grouping `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "seeds" => {
                spec.seeds = v
                    .parse::<u64>()
                    .map_err(|_| bad(line, format!("`seeds`: bad value `{v}`")))?;
            }
            "rounding" => {
                spec.rounding = match v.to_ascii_lowercase().as_str() {
                    "stochastic" => Rounding::Stochastic,
                    "nearest" | "nearest_even" => Rounding::NearestEven,
                    _ => return Err(bad(line, format!("unknown rounding `{v}`"))),
                };
            }
            "source" => {
                spec.source = if let Some(dims) = v.strip_prefix("gaussian:") {
                    let parts: Vec<usize> = dims
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse::<usize>()
                                .map_err(|_| bad(line, format!("bad extent `{s}`")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if parts.len() != 4 {
                        return Err(bad(line, "gaussian source needs 4 extents"));
                    }
                    SweepSource::Gaussian {
                        dims: [parts[0], parts[1], parts[2], parts[3]],
                    }
                } else if let Some(dir) = v.strip_prefix("files:") {
                    let dir = Path::new(dir.trim());
                    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                        .map_err(MlsError::Io)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "mlst"))
                        .collect();
                    paths.sort();
                    if paths.is_empty() {
                        return Err(bad(line, format!("no .mlst blobs under {}", dir.display())));
                    }
                    SweepSource::Files { paths }
                } else {
                    return Err(bad(line, format!("unknown source `{v}`")));
                };
            }
            _ => return Err(bad(line, format!("unknown key `{k}`"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn gaussian_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
    let s = RngStream::new(seed, 0, 0x5eed);
    let n: usize = dims.iter().product();
    Tensor4::new(dims, (0..n).map(|i| s.normal(i as u64)).collect()).unwrap()
}

/// One sweep result row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub ex: u32,
    pub mx: u32,
    pub eg: u32,
    pub mg: u32,
    pub grouping: GroupingDim,
    pub seed: u64,
    pub tensor: String,
    pub are: f64,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// (tensor name, grouping, group index, group max, overall max, below-half count)
    pub profiles: Vec<(String, GroupingDim, usize, f64, f64, usize)>,
}

impl SweepOutput {
    pub fn are_csv(&self) -> String {
        let mut s = String::from("ex,mx,eg,mg,grouping,seed,tensor,are\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{:.8}\n",
                r.ex,
                r.mx,
                r.eg,
                r.mg,
                r.grouping.name(),
                r.seed,
                r.tensor,
                r.are
            ));
        }
        s
    }

    pub fn profile_csv(&self) -> String {
        let mut s = String::from("tensor,grouping,group,group_max,overall_max,below_half_count\n");
        for (tensor, g, idx, gmax, overall, below) in &self.profiles {
            s.push_str(&format!(
                "{tensor},{},{idx},{gmax:.8},{overall:.8},{below}\n",
                g.name()
            ));
        }
        s
    }
}

/// Run the sweep: every grid cell over every seed and tensor, plus a group-max
/// profile per (tensor, grouping). Deterministic given the seeds.
pub fn run_sweep(spec: &SweepSpec, base_seed: u64) -> Result<SweepOutput> {
    spec.validate()?;
    let tensors: Vec<(String, Tensor4)> = match &spec.source {
        SweepSource::Gaussian { dims } => (0..spec.seeds)
            .map(|s| {
                (
                    format!("gaussian{s}"),
                    gaussian_tensor(*dims, base_seed.wrapping_add(s)),
                )
            })
            .collect(),
        SweepSource::Files { paths } => paths
            .iter()
            .map(|p| {
                let name = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("tensor")
                    .to_string();
                crate::tensor::read_tensor_blob_file(p).map(|t| (name, t))
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let mut rows = Vec::new();
    let mut profiles = Vec::new();
    for (name, tensor) in &tensors {
        for &g in &spec.groupings {
            let p = group_max_profile(tensor, g)?;
            for (idx, gmax) in p.maxima.iter().enumerate() {
                profiles.push((name.clone(), g, idx, *gmax, p.overall, p.below_half));
            }
        }
    }
    for &ex in &spec.ex {
        for &mx in &spec.mx {
            for &eg in &spec.eg {
                for &mg in &spec.mg {
                    for &grouping in &spec.groupings {
                        let cfg = QuantConfig::new(
                            EmFormat::new(ex, mx)?,
                            EmFormat::new(eg, mg)?,
                            grouping,
                            32,
                            spec.rounding,
                        )?;
                        for (ti, (name, tensor)) in tensors.iter().enumerate() {
                            let seed = base_seed.wrapping_add(ti as u64);
                            let stream = RngStream::new(seed, 0, 0xa5e);
                            let q = quantize(tensor, &cfg, &stream)?;
                            rows.push(SweepRow {
                                ex,
                                mx,
                                eg,
                                mg,
                                grouping,
                                seed,
                                tensor: name.clone(),
                                are: are(tensor, &q)?,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(SweepOutput { rows, profiles })
}

/// Mean ARE per grouping for a set of rows (analysis helper).
pub fn mean_are_by<K: Eq + std::hash::Hash>(
    rows: &[SweepRow],
    key: impl Fn(&SweepRow) -> K,
) -> std::collections::HashMap<K, f64> {
    let mut sums: std::collections::HashMap<K, (f64, usize)> = std::collections::HashMap::new();
    for r in rows {
        let e = sums.entry(key(r)).or_insert((0.0, 0));
        e.0 += r.are;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_cell_count() {
        let spec = parse_sweep_spec(
            "ex = 0,1,2\nmx = 3\ngrouping = none,dim0x1\nseeds = 2\nsource = gaussian:8,8,3,3\n",
        )
        .unwrap();
        assert_eq!(spec.cells(), 6);
        assert_eq!(spec.seeds, 2);
    }

    #[test]
    fn rejects_oversized_grid_and_bad_lines() {
        let big = "ex = 0,1,2,3,4,5,6,7\nmx = 1,2,3,4,5,6,7,8\nmg = 0,1\n\
                   grouping = none,dim0,dim1,dim0x1\neg = 1,2,3,4,5,6,7,8\n";
        assert!(parse_sweep_spec(big).is_err());
        match parse_sweep_spec("ex: 1\n") {
            Err(MlsError::Config { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn single_cell_produces_one_row_per_seed() {
        let spec = parse_sweep_spec("seeds = 3\nsource = gaussian:4,4,3,3\n").unwrap();
        let out = run_sweep(&spec, 0).unwrap();
        assert_eq!(out.rows.len(), 3);
        let csv = out.are_csv();
        assert!(csv.starts_with("ex,mx,eg,mg,grouping,seed,tensor,are\n"));
        assert_eq!(csv.lines().count(), 4);
        // profile rows: one per group per (tensor, grouping)
        assert_eq!(out.profiles.len(), 3 * 16);
    }

    #[test]
    fn grouping_ordering_over_seeds() {
        let spec = parse_sweep_spec(
            "ex = 0\nmx = 3\ngrouping = none,dim0,dim1,dim0x1\nseeds = 10\nsource = gaussian:16,16,3,3\n",
        )
        .unwrap();
        let out = run_sweep(&spec, 42).unwrap();
        let means = mean_are_by(&out.rows, |r| r.grouping);
        let none = means[&GroupingDim::None];
        let d0 = means[&GroupingDim::Dim0];
        let d1 = means[&GroupingDim::Dim1];
        let both = means[&GroupingDim::Dim0x1];
        assert!(both < d0 && both < d1 && d0 < none && d1 < none,
            "none {none} d0 {d0} d1 {d1} both {both}");
    }

    #[test]
    fn exponent_sweep_non_increasing() {
        let spec = parse_sweep_spec(
            "ex = 0,1,2\nmx = 3\ngrouping = none\nseeds = 10\nsource = gaussian:16,16,3,3\n",
        )
        .unwrap();
        let out = run_sweep(&spec, 7).unwrap();
        let means = mean_are_by(&out.rows, |r| r.ex);
        assert!(means[&0] >= means[&1] && means[&1] >= means[&2],
            "{} {} {}", means[&0], means[&1], means[&2]);
    }

    #[test]
    fn determinism() {
        let spec = parse_sweep_spec("seeds = 2\nsource = gaussian:6,6,3,3\n").unwrap();
        let a = run_sweep(&spec, 9).unwrap().are_csv();
        let b = run_sweep(&spec, 9).unwrap().are_csv();
        assert_eq!(a, b);
    }
}
