//! Command-line surface for the multi-level-scaled low-bit toolkit.
//!
//! Subcommands: `quantize` (float tensor blob -> quantized blob + stats),
//! `train` (config-driven CNN training), `are` (quantization-error sweep),
//! `energy` (per-operation energy breakdown), `selftest` (quick built-in
//! battery). Exit codes: 0 ok, 1 runtime error, 2 usage/IO, 3 numeric
//! overflow.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mls_core::config::{parse_power_overrides, parse_run_config};
use mls_core::energy::{
    builtin_sketch, conv_efficiency_ratio, count_ops, energy_estimate, CountMode, EnergyTable,
    Framework, NetSketch, SketchLayer,
};
use mls_core::error::MlsError;
use mls_core::format::{EmFormat, Rounding};
use mls_core::quant::{are, quantize, write_mls_blob_file, QuantConfig};
use mls_core::sweep::{parse_sweep_spec, run_sweep};
use mls_core::tensor::{read_tensor_blob_file, GroupingDim, RngStream};
use mls_core::train::checkpoint::write_file_atomic;

#[derive(Parser)]
#[command(name = "mls", about = "Multi-level-scaled low-bit tensor toolkit", version)]
struct Cli {
    /// Base RNG seed (overrides config seeds)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count (0 = default)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Extra config file (power table overrides etc.)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a float tensor blob into the low-bit format
    Quantize(QuantizeArgs),
    /// Train a model from a run-config file
    Train(TrainArgs),
    /// Quantization-error sweep over format/grouping axes
    Are(AreArgs),
    /// Per-operation energy breakdown for a network sketch
    Energy(EnergyArgs),
    /// Run the built-in smoke battery
    Selftest,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Input tensor blob (magic MLST)
    #[arg(long)]
    input: PathBuf,
    /// Output quantized blob (magic MLSQ)
    #[arg(long)]
    output: PathBuf,
    /// Element exponent bits
    #[arg(long, default_value_t = 2)]
    ex: u32,
    /// Element mantissa bits
    #[arg(long, default_value_t = 4)]
    mx: u32,
    /// Group-scale exponent bits
    #[arg(long, default_value_t = 8)]
    eg: u32,
    /// Group-scale mantissa bits
    #[arg(long, default_value_t = 1)]
    mg: u32,
    /// Grouping axis: none, dim0, dim1, dim0x1
    #[arg(long, default_value = "dim0x1")]
    grouping: String,
    /// Intra-group accumulator width
    #[arg(long, default_value_t = 32)]
    acc_bits: u32,
    /// Rounding: stochastic, nearest, toward_zero, ceil
    #[arg(long, default_value = "stochastic")]
    rounding: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config file (key = value lines)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct AreArgs {
    /// Sweep spec file
    #[arg(long)]
    spec: PathBuf,
    /// ARE rows CSV output (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Group-max profile CSV output
    #[arg(long)]
    profile_out: Option<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    /// Built-in model name: resnet18, resnet34, googlenet-sketch, tinycnn
    #[arg(long, conflicts_with = "sketch")]
    model: Option<String>,
    /// Sketch file (conv/bn/fc/ewadd records)
    #[arg(long)]
    sketch: Option<PathBuf>,
    /// Framework to price: full, ours, fp8, int8
    #[arg(long, default_value = "ours")]
    framework: String,
    /// Batch size for per-sample accounting
    #[arg(long, default_value_t = 256)]
    batch: u64,
    /// Count one forward pass instead of a training step
    #[arg(long)]
    forward_only: bool,
    /// Breakdown CSV output (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_rounding(s: &str) -> Result<Rounding, MlsError> {
    match s.to_ascii_lowercase().as_str() {
        "stochastic" => Ok(Rounding::Stochastic),
        "nearest" | "nearest_even" => Ok(Rounding::NearestEven),
        "toward_zero" => Ok(Rounding::TowardZero),
        "ceil" => Ok(Rounding::CeilMagnitude),
        other => Err(MlsError::InvalidInput(format!("unknown rounding `{other}`"))),
    }
}

fn cmd_quantize(args: &QuantizeArgs, seed: u64) -> Result<(), MlsError> {
    let grouping = GroupingDim::parse(&args.grouping)
        .ok_or_else(|| MlsError::InvalidInput(format!("unknown grouping `{}`", args.grouping)))?;
    let cfg = QuantConfig::new(
        EmFormat::new(args.ex, args.mx)?,
        EmFormat::new(args.eg, args.mg)?,
        grouping,
        args.acc_bits,
        parse_rounding(&args.rounding)?,
    )?;
    let tensor = read_tensor_blob_file(&args.input)?;
    let q = quantize(&tensor, &cfg, &RngStream::new(seed, 0, 0))?;
    write_mls_blob_file(&q, &args.output)?;
    println!(
        "tensor_scale={} groups={} are={:.8}",
        q.tensor_scale(),
        q.group_count(),
        are(&tensor, &q)?
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<(), MlsError> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = parse_run_config(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.checkpoint_out.is_none() {
        // a checkpoint is always written; default next to the config file
        cfg.checkpoint_out = Some(args.config.with_extension("ckpt"));
    }
    let outcome = mls_core::train::train(&cfg)?;
    if cfg.metrics_out.is_none() {
        print!("{}", outcome.metrics_csv);
    }
    if let Some(last) = outcome.metrics.last() {
        eprintln!(
            "done: epoch {} train_loss {:.4} test_acc {:.4}",
            last.epoch, last.train_loss, last.test_acc
        );
    }
    Ok(())
}

fn cmd_are(args: &AreArgs, seed: u64) -> Result<(), MlsError> {
    let text = std::fs::read_to_string(&args.spec)?;
    let spec = parse_sweep_spec(&text)?;
    let out = run_sweep(&spec, seed)?;
    match &args.out {
        Some(p) => write_file_atomic(p, out.are_csv().as_bytes())?,
        None => print!("{}", out.are_csv()),
    }
    if let Some(p) = &args.profile_out {
        write_file_atomic(p, out.profile_csv().as_bytes())?;
    }
    Ok(())
}

fn parse_sketch_file(path: &Path, batch: u64) -> Result<NetSketch, MlsError> {
    let text = std::fs::read_to_string(path)?;
    let mut layers = Vec::new();
    let mut batch = batch;
    let mut name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sketch")
        .to_string();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        if let Some((k, v)) = l.split_once('=') {
            match k.trim() {
                "batch" => {
                    batch = v.trim().parse().map_err(|_| MlsError::Config {
                        line: line_no,
                        msg: format!("bad batch `{}`", v.trim()),
                    })?
                }
                "name" => name = v.trim().to_string(),
                other => {
                    return Err(MlsError::Config {
                        line: line_no,
                        msg: format!("unknown key `{other}`"),
                    })
                }
            }
            continue;
        }
        let fields: Vec<&str> = l.split_whitespace().collect();
        let nums = |want: usize| -> Result<Vec<u64>, MlsError> {
            if fields.len() != want + 1 {
                return Err(MlsError::Config {
                    line: line_no,
                    msg: format!("`{}` expects {want} fields", fields[0]),
                });
            }
            fields[1..]
                .iter()
                .map(|s| {
                    s.parse::<u64>().map_err(|_| MlsError::Config {
                        line: line_no,
                        msg: format!("bad number `{s}`"),
                    })
                })
                .collect()
        };
        match fields[0] {
            // conv ci co k stride pad h_in w_in
            "conv" => {
                let v = nums(7)?;
                layers.push(SketchLayer::Conv {
                    ci: v[0],
                    co: v[1],
                    k: v[2],
                    stride: v[3],
                    padding: v[4],
                    h_in: v[5],
                    w_in: v[6],
                });
            }
            // bn c h w
            "bn" => {
                let v = nums(3)?;
                layers.push(SketchLayer::BatchNorm {
                    c: v[0],
                    h: v[1],
                    w: v[2],
                });
            }
            // fc d_in d_out
            "fc" => {
                let v = nums(2)?;
                layers.push(SketchLayer::FullyConnected {
                    d_in: v[0],
                    d_out: v[1],
                });
            }
            // ewadd c h w
            "ewadd" => {
                let v = nums(3)?;
                layers.push(SketchLayer::EwAdd {
                    c: v[0],
                    h: v[1],
                    w: v[2],
                });
            }
            other => {
                return Err(MlsError::Config {
                    line: line_no,
                    msg: format!("unknown layer kind `{other}`"),
                })
            }
        }
    }
    NetSketch::new(name, batch, layers)
}

fn cmd_energy(args: &EnergyArgs, table: &EnergyTable) -> Result<(), MlsError> {
    let framework = Framework::parse(&args.framework)
        .ok_or_else(|| MlsError::InvalidInput(format!("unknown framework `{}`", args.framework)))?;
    let sketch = match (&args.model, &args.sketch) {
        (Some(m), None) => builtin_sketch(m, args.batch)
            .ok_or_else(|| MlsError::InvalidInput(format!("unknown model `{m}`")))?,
        (None, Some(p)) => parse_sketch_file(p, args.batch)?,
        _ => {
            return Err(MlsError::InvalidInput(
                "pass exactly one of --model or --sketch".into(),
            ))
        }
    };
    let mode = if args.forward_only {
        CountMode::ForwardOnly
    } else {
        CountMode::Training
    };
    let breakdown = energy_estimate(&count_ops(&sketch, framework, mode), table, framework);
    let mut csv = String::from("category,op_type,count,power_mw,energy_uj,framework\n");
    for r in &breakdown.rows {
        csv.push_str(&format!(
            "{},{},{:.6e},{},{:.6},{}\n",
            r.category,
            r.op_type,
            r.count,
            r.power_mw,
            r.energy_uj,
            framework.name()
        ));
    }
    match &args.out {
        Some(p) => write_file_atomic(p, csv.as_bytes())?,
        None => print!("{csv}"),
    }

    let full = energy_estimate(
        &count_ops(&sketch, Framework::FullPrecision, mode),
        table,
        Framework::FullPrecision,
    );
    if breakdown.total_uj > 0.0 {
        println!(
            "total_uj={:.3} full_precision_uj={:.3} ratio_vs_full_precision={:.3}",
            breakdown.total_uj,
            full.total_uj,
            full.total_uj / breakdown.total_uj
        );
    } else {
        println!("total_uj=0.000 ratio_vs_full_precision=n/a");
    }
    if matches!(framework, Framework::Ours) {
        println!(
            "conv_unit_ratio_k3_full_vs_ours={:.3}",
            conv_efficiency_ratio(table, 3, Framework::FullPrecision, Framework::Ours)
        );
    }
    Ok(())
}

fn selftest() -> Result<(), MlsError> {
    use mls_core::conv::{lowbit_conv, ConvGeometry};
    use mls_core::quant::dequantize;
    use mls_core::tensor::Tensor4;
    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // codec round trip over a full lattice
    let fmt = EmFormat::new(2, 4)?;
    let roundtrip = fmt.codes_ascending().into_iter().all(|c| {
        fmt.encode(fmt.decode(c), Rounding::NearestEven, None)
            .map(|back| back == c)
            .unwrap_or(false)
    });
    check("codec round-trip <2,4>", roundtrip);

    // quantize a dyadic tensor exactly
    let x = Tensor4::new([1, 4, 1, 1], vec![3.0, -1.5, 0.75, 0.0])?;
    let cfg = QuantConfig::new(
        fmt,
        EmFormat::new(8, 1)?,
        GroupingDim::None,
        32,
        Rounding::Stochastic,
    )?;
    let q = quantize(&x, &cfg, &RngStream::new(0, 0, 0))?;
    check("dyadic quantization exact", dequantize(&q).data() == x.data());

    // scalar conv
    let cfg2 = QuantConfig::new(
        fmt,
        EmFormat::new(8, 1)?,
        GroupingDim::Dim0x1,
        32,
        Rounding::Stochastic,
    )?;
    let w = quantize(&Tensor4::new([1, 1, 1, 1], vec![2.0])?, &cfg2, &RngStream::new(0, 0, 0))?;
    let a = quantize(&Tensor4::new([1, 1, 1, 1], vec![3.0])?, &cfg2, &RngStream::new(0, 0, 1))?;
    let z = lowbit_conv(&w, &a, &ConvGeometry::forward(1, 0))?;
    check("scalar low-bit conv", z.data() == [6.0]);

    // energy constants
    let table = EnergyTable::default();
    let uj = mls_core::energy::op_energy_uj(1.12e10, table.float_mul);
    check("energy row", (uj - 25883.2).abs() < 0.1);
    let r = conv_efficiency_ratio(&table, 3, Framework::FullPrecision, Framework::Ours);
    check("conv unit ratio", (11.2..=11.8).contains(&r));

    if failures > 0 {
        Err(MlsError::InvalidInput(format!("{failures} selftest failures")))
    } else {
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<(), MlsError> {
    if cli.threads > 0 {
        mls_core::set_worker_threads(cli.threads)?;
    }
    let table = match &cli.config {
        Some(p) => parse_power_overrides(&std::fs::read_to_string(p)?)?,
        None => EnergyTable::default(),
    };
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Are(a) => cmd_are(a, cli.seed.unwrap_or(0)),
        Command::Energy(a) => cmd_energy(a, &table),
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
