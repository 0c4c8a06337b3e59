//! Line-based `key = value` run configuration for the training CLI, shared by
//! the energy-table override file. Unknown keys are rejected with the line
//! number; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::energy::EnergyTable;
use crate::error::{MlsError, Result};
use crate::format::{EmFormat, Rounding};
use crate::quant::QuantConfig;
use crate::tensor::GroupingDim;

/// Parsed training run configuration with defaults for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub dataset: String,
    pub dataset_path: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ex: u32,
    pub mx: u32,
    pub eg: u32,
    pub mg: u32,
    pub grouping: GroupingDim,
    pub acc_bits: u32,
    pub rounding: Rounding,
    pub seed: u64,
    pub quantize_first_last: bool,
    pub lossless: bool,
    pub train_subset: usize,
    pub test_subset: usize,
    pub augment: bool,
    pub log_wall_time: bool,
    pub metrics_out: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub dump_tensors: Option<PathBuf>,
    pub dump_step: u64,
    pub power: EnergyTable,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            model: "tinycnn".into(),
            dataset: "mnist".into(),
            dataset_path: None,
            epochs: 3,
            batch_size: 64,
            lr: 0.05,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            ex: 2,
            mx: 4,
            eg: 8,
            mg: 1,
            grouping: GroupingDim::Dim0x1,
            acc_bits: 32,
            rounding: Rounding::Stochastic,
            seed: 0,
            quantize_first_last: false,
            lossless: false,
            train_subset: 0,
            test_subset: 0,
            augment: false,
            log_wall_time: true,
            metrics_out: None,
            checkpoint_out: None,
            dump_tensors: None,
            dump_step: 0,
            power: EnergyTable::default(),
        }
    }
}

impl RunConfig {
    pub fn quant_config(&self) -> Result<QuantConfig> {
        QuantConfig::new(
            EmFormat::new(self.ex, self.mx)?,
            EmFormat::new(self.eg, self.mg)?,
            self.grouping,
            self.acc_bits,
            self.rounding,
        )
    }

    /// Canonical `key = value` rendering, embedded in checkpoints.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("model", self.model.clone());
        kv("dataset", self.dataset.clone());
        if let Some(p) = &self.dataset_path {
            kv("dataset_path", p.display().to_string());
        }
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{}", self.lr));
        if !self.lr_decay_epochs.is_empty() {
            kv(
                "lr_decay_epochs",
                self.lr_decay_epochs
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            kv("lr_decay_factor", format!("{}", self.lr_decay_factor));
        }
        kv("momentum", format!("{}", self.momentum));
        kv("weight_decay", format!("{}", self.weight_decay));
        kv("ex", self.ex.to_string());
        kv("mx", self.mx.to_string());
        kv("eg", self.eg.to_string());
        kv("mg", self.mg.to_string());
        kv("grouping", self.grouping.name().to_string());
        kv("acc_bits", self.acc_bits.to_string());
        kv(
            "rounding",
            match self.rounding {
                Rounding::Stochastic => "stochastic",
                Rounding::NearestEven => "nearest",
                Rounding::TowardZero => "toward_zero",
                Rounding::CeilMagnitude => "ceil",
            }
            .to_string(),
        );
        kv("seed", self.seed.to_string());
        kv("quantize_first_last", self.quantize_first_last.to_string());
        kv("lossless", self.lossless.to_string());
        kv("train_subset", self.train_subset.to_string());
        kv("test_subset", self.test_subset.to_string());
        kv("augment", self.augment.to_string());
        kv("log_wall_time", self.log_wall_time.to_string());
        s
    }
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(MlsError::Config {
                line: line_no,
                msg: format!("expected `key = value`, got `{raw}`"),
            });
        };
        out.push((line_no, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn bad(line: usize, msg: impl Into<String>) -> MlsError {
    MlsError::Config {
        line,
        msg: msg.into(),
    }
}

/// Parse a training run configuration.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeMap::new();
    for (line, key, value) in parse_lines(text)? {
        if let Some(prev) = seen.insert(key.clone(), line) {
            return Err(bad(line, format!("duplicate key `{key}` (first at line {prev})")));
        }
        apply_key(&mut cfg, line, &key, &value)?;
    }
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, line: usize, key: &str, value: &str) -> Result<()> {
    let parse_u = |v: &str| -> Result<u64> {
        v.parse::<u64>()
            .map_err(|_| bad(line, format!("`{key}` expects an integer, got `{v}`")))
    };
    let parse_f = |v: &str| -> Result<f64> {
        v.parse::<f64>()
            .map_err(|_| bad(line, format!("`{key}` expects a number, got `{v}`")))
    };
    let parse_b = |v: &str| -> Result<bool> {
        match v.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad(line, format!("`{key}` expects true/false, got `{v}`"))),
        }
    };
    match key {
        "model" => cfg.model = value.to_string(),
        "dataset" => cfg.dataset = value.to_string(),
        "dataset_path" => cfg.dataset_path = Some(PathBuf::from(value)),
        "epochs" => cfg.epochs = parse_u(value)? as usize,
        "batch_size" => {
            cfg.batch_size = parse_u(value)? as usize;
            if cfg.batch_size == 0 {
                return Err(bad(line, "`batch_size` must be positive"));
            }
        }
        "lr" => cfg.lr = parse_f(value)?,
        "lr_decay_epochs" => {
            cfg.lr_decay_epochs = value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| bad(line, format!("bad epoch list entry `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
        }
        "lr_decay_factor" => cfg.lr_decay_factor = parse_f(value)?,
        "momentum" => cfg.momentum = parse_f(value)?,
        "weight_decay" => cfg.weight_decay = parse_f(value)?,
        "ex" => cfg.ex = parse_u(value)? as u32,
        "mx" => cfg.mx = parse_u(value)? as u32,
        "eg" => cfg.eg = parse_u(value)? as u32,
        "mg" => cfg.mg = parse_u(value)? as u32,
        "grouping" => {
            cfg.grouping = GroupingDim::parse(value)
                .ok_or_else(|| bad(line, format!("unknown grouping `{value}`")))?;
        }
        "acc_bits" => cfg.acc_bits = parse_u(value)? as u32,
        "rounding" => {
            cfg.rounding = match value.to_ascii_lowercase().as_str() {
                "stochastic" => Rounding::Stochastic,
                "nearest" | "nearest_even" => Rounding::NearestEven,
                "toward_zero" => Rounding::TowardZero,
                "ceil" => Rounding::CeilMagnitude,
                _ => return Err(bad(line, format!("unknown rounding `{value}`"))),
            };
        }
        "seed" => cfg.seed = parse_u(value)?,
        "quantize_first_last" => cfg.quantize_first_last = parse_b(value)?,
        "lossless" => cfg.lossless = parse_b(value)?,
        "train_subset" => cfg.train_subset = parse_u(value)? as usize,
        "test_subset" => cfg.test_subset = parse_u(value)? as usize,
        "augment" => cfg.augment = parse_b(value)?,
        "log_wall_time" => cfg.log_wall_time = parse_b(value)?,
        "metrics_out" => cfg.metrics_out = Some(PathBuf::from(value)),
        "checkpoint_out" => cfg.checkpoint_out = Some(PathBuf::from(value)),
        "dump_tensors" => cfg.dump_tensors = Some(PathBuf::from(value)),
        "dump_step" => cfg.dump_step = parse_u(value)?,
        _ if key.starts_with("power.") => {
            let entry = &key["power.".len()..];
            cfg.power
                .set(entry, parse_f(value)?)
                .map_err(|e| bad(line, e.to_string()))?;
        }
        _ => return Err(bad(line, format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Parse only `power.*` overrides from a config file, applied on defaults.
pub fn parse_power_overrides(text: &str) -> Result<EnergyTable> {
    let mut table = EnergyTable::default();
    for (line, key, value) in parse_lines(text)? {
        if let Some(entry) = key.strip_prefix("power.") {
            let v = value
                .parse::<f64>()
                .map_err(|_| bad(line, format!("`{key}` expects a number, got `{value}`")))?;
            table.set(entry, v).map_err(|e| bad(line, e.to_string()))?;
        }
    }
    table.validate()?;
    Ok(table)
}
