//! Training loop: quantize-then-convolve conv layers, float batch norm and
//! head, SGD with momentum and weight decay, deterministic data order and
//! augmentation, per-epoch metrics, and checkpointing.

pub mod checkpoint;
pub mod layers;
pub mod net;
pub mod optim;

pub use layers::{
    accuracy, bn_backward, bn_forward, ew_add, fc_backward, fc_forward, quantconv_backward,
    quantconv_forward, relu, relu_backward, softmax_ce, BnCache, BnState, Param,
};
pub use net::{Network, PassCtx};
pub use optim::{sgd_step, OptimState};

use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::error::{MlsError, Result};
use crate::tensor::{RngStream, Tensor4};

const TAG_SHUFFLE: u64 = 0xffff_0001;
const TAG_AUGMENT: u64 = 0xffff_0002;

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub metrics_csv: String,
    pub checkpoint: Vec<u8>,
    pub final_test_acc: f64,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,step,train_loss,train_acc,test_acc,wall_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.4},{:.4},{:.3}\n",
            r.epoch, r.step, r.train_loss, r.train_acc, r.test_acc, r.wall_seconds
        ));
    }
    s
}

fn build_network(cfg: &RunConfig, dataset: &Dataset) -> Result<Network> {
    let quant = cfg.quant_config()?;
    let [_, c, h, w] = dataset.train_images.dims();
    match cfg.model.as_str() {
        "tinycnn" => {
            if (h, w) != (28, 28) {
                return Err(MlsError::InvalidInput(format!(
                    "tinycnn expects 28x28 inputs, dataset is {h}x{w}"
                )));
            }
            net::tinycnn(c, dataset.classes, &quant, cfg.quantize_first_last, cfg.seed)
        }
        "resnet20-cifar" | "resnet20" => {
            if (c, h, w) != (3, 32, 32) {
                return Err(MlsError::InvalidInput(format!(
                    "resnet20-cifar expects 3x32x32 inputs, dataset is {c}x{h}x{w}"
                )));
            }
            net::resnet20(dataset.classes, &quant, cfg.quantize_first_last, cfg.seed)
        }
        other => Err(MlsError::InvalidInput(format!("unknown model `{other}`"))),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mut ds = match cfg.dataset.as_str() {
        "mnist" => match &cfg.dataset_path {
            Some(p) => data::load_mnist(p)?,
            None => data::load_mnist(std::path::Path::new("data/mnist"))?,
        },
        "cifar10" => match &cfg.dataset_path {
            Some(p) => data::load_cifar10(p)?,
            None => data::load_cifar10(std::path::Path::new("data/cifar10"))?,
        },
        "synthetic-digits" => {
            let dir = cfg
                .dataset_path
                .clone()
                .unwrap_or_else(|| std::env::temp_dir().join("mls-synthetic-digits"));
            let train = if cfg.train_subset > 0 { cfg.train_subset } else { 10_000 };
            let test = if cfg.test_subset > 0 { cfg.test_subset } else { 2_000 };
            data::write_synthetic_digits(&dir, train, test, 1234)?;
            let mut ds = data::load_mnist(&dir)?;
            ds.name = "synthetic-digits".into();
            ds
        }
        "synthetic" | "synthetic-gaussian" => data::synthetic_gaussian(
            cfg.train_subset.max(256),
            cfg.test_subset.max(64),
            [1, 28, 28],
            10,
            cfg.seed,
        ),
        other => {
            return Err(MlsError::InvalidInput(format!("unknown dataset `{other}`")));
        }
    };
    ds.truncate(cfg.train_subset, cfg.test_subset);
    Ok(ds)
}

/// Random crop with 4-pixel zero padding plus horizontal flip, decided by the
/// counter RNG per (step, sample).
fn augment_batch(batch: &mut Tensor4, stream: &RngStream, batch_base: u64) {
    let [n, c, h, w] = batch.dims();
    let pad = 4usize;
    for ni in 0..n {
        let key = batch_base + ni as u64;
        let dx = (stream.unit(key * 3) * (2 * pad + 1) as f64) as usize;
        let dy = (stream.unit(key * 3 + 1) * (2 * pad + 1) as f64) as usize;
        let flip = stream.unit(key * 3 + 2) < 0.5;
        let mut sample = vec![0.0; c * h * w];
        for cc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy as isize - pad as isize;
                    let sx = x as isize + dx as isize - pad as isize;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                        batch.at([ni, cc, sy as usize, sx])
                    };
                    sample[(cc * h + y) * w + x] = v;
                }
            }
        }
        let base = ni * c * h * w;
        batch.data_mut()[base..base + sample.len()].copy_from_slice(&sample);
    }
}

/// Forward the whole split in minibatches and report top-1 accuracy.
/// Evaluation passes use inference-mode batch norm and nearest-even element
/// rounding, so the result is deterministic.
pub fn evaluate(
    network: &mut Network,
    images: &Tensor4,
    labels: &[u8],
    dataset: &Dataset,
    batch_size: usize,
    ctx: &PassCtx,
) -> Result<f64> {
    let n = images.dims()[0];
    let mut correct = 0.0;
    let mut seen = 0usize;
    let eval_ctx = PassCtx {
        training: false,
        dump_dir: None,
        ..ctx.clone()
    };
    let mut i = 0;
    while i < n {
        let hi = (i + batch_size).min(n);
        let idxs: Vec<usize> = (i..hi).collect();
        let (x, y) = dataset.batch(images, labels, &idxs);
        let (logits, _) = network.forward(&x, &eval_ctx)?;
        correct += accuracy(&logits, &y) * idxs.len() as f64;
        seen += idxs.len();
        i = hi;
    }
    Ok(correct / seen.max(1) as f64)
}

/// Run the configured training job on an already-loaded dataset.
pub fn train_with_dataset(cfg: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut network = build_network(cfg, dataset)?;
    let quant = cfg.quant_config()?;
    let opt_base = OptimState {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    if let Some(dir) = &cfg.dump_tensors {
        std::fs::create_dir_all(dir)?;
    }

    let n_train = dataset.train_images.dims()[0];
    if n_train == 0 {
        return Err(MlsError::EmptyTensor("training split is empty".into()));
    }
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let decays = cfg
            .lr_decay_epochs
            .iter()
            .filter(|&&d| d <= epoch)
            .count() as i32;
        let opt = OptimState {
            lr: cfg.lr / cfg.lr_decay_factor.powi(decays),
            ..opt_base
        };
        let perm = RngStream::new(cfg.seed, epoch as u64, TAG_SHUFFLE).permutation(n_train);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut seen = 0usize;

        for chunk in perm.chunks(cfg.batch_size) {
            step += 1;
            let (mut x, y) = dataset.batch(&dataset.train_images, &dataset.train_labels, chunk);
            if cfg.augment {
                let aug = RngStream::new(cfg.seed, step, TAG_AUGMENT);
                augment_batch(&mut x, &aug, 0);
            }
            let ctx = PassCtx {
                seed: cfg.seed,
                step,
                training: true,
                quant,
                lossless: cfg.lossless,
                dump_dir: cfg
                    .dump_tensors
                    .clone()
                    .filter(|_| step == cfg.dump_step + 1),
            };
            let (logits, caches) = network.forward(&x, &ctx)?;
            let (loss, dlogits) = softmax_ce(&logits, &y)?;
            if !loss.is_finite() {
                return Err(MlsError::InvalidInput(format!(
                    "training diverged: loss {loss} at step {step}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            acc_sum += accuracy(&logits, &y) * chunk.len() as f64;
            seen += chunk.len();
            network.backward(&dlogits, caches, &ctx)?;
            network.visit_params_mut(|p| sgd_step(p, &opt));
        }

        let eval_ctx = PassCtx {
            seed: cfg.seed,
            step,
            training: false,
            quant,
            lossless: cfg.lossless,
            dump_dir: None,
        };
        let test_acc = evaluate(
            &mut network,
            &dataset.test_images,
            &dataset.test_labels,
            dataset,
            cfg.batch_size,
            &eval_ctx,
        )?;
        metrics.push(EpochMetrics {
            epoch,
            step,
            train_loss: loss_sum / seen as f64,
            train_acc: acc_sum / seen as f64,
            test_acc,
            wall_seconds: if cfg.log_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    let csv = metrics_csv(&metrics);
    let ckpt = checkpoint::serialize_checkpoint(&mut network, &cfg.echo());
    if let Some(path) = &cfg.metrics_out {
        checkpoint::write_file_atomic(path, csv.as_bytes())?;
    }
    if let Some(path) = &cfg.checkpoint_out {
        checkpoint::write_file_atomic(path, &ckpt)?;
    }
    let final_test_acc = metrics.last().map(|m| m.test_acc).unwrap_or(0.0);
    Ok(TrainOutcome {
        metrics,
        metrics_csv: csv,
        checkpoint: ckpt,
        final_test_acc,
    })
}

/// Resolve the dataset named by the config and train.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let dataset = load_dataset(cfg)?;
    train_with_dataset(cfg, &dataset)
}

#[cfg(test)]
mod tests;
