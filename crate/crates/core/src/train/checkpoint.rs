//! Checkpoint container: magic "MLSQCKPT", version byte, the run-config echo,
//! then named tensor blobs (parameters, optimizer velocities, batch-norm
//! running statistics) in the MLST format.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{Layer, Network};
use crate::error::{MlsError, Result};
use crate::tensor::{read_tensor_blob, write_tensor_blob, Tensor4};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLSQCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

fn collect_blobs(net: &mut Network) -> Vec<(String, Tensor4)> {
    let mut blobs = Vec::new();
    net.visit_params_mut(|p| {
        blobs.push((p.name.clone(), p.value.clone()));
        blobs.push((format!("{}.vel", p.name), p.velocity.clone()));
    });
    fn bn_stats(layers: &[Layer], blobs: &mut Vec<(String, Tensor4)>) {
        for l in layers {
            match l {
                Layer::BatchNorm(b) => {
                    let c = b.channels();
                    blobs.push((
                        format!("{}.running_mean", b.gamma.name.trim_end_matches(".gamma")),
                        Tensor4::new([c, 1, 1, 1], b.running_mean.clone()).unwrap(),
                    ));
                    blobs.push((
                        format!("{}.running_var", b.gamma.name.trim_end_matches(".gamma")),
                        Tensor4::new([c, 1, 1, 1], b.running_var.clone()).unwrap(),
                    ));
                }
                Layer::Residual(r) => {
                    bn_stats(&r.main, blobs);
                    bn_stats(&r.shortcut, blobs);
                }
                _ => {}
            }
        }
    }
    bn_stats(&net.layers, &mut blobs);
    blobs
}

/// Serialize the network state with the config echo.
pub fn serialize_checkpoint(net: &mut Network, config_echo: &str) -> Vec<u8> {
    let blobs = collect_blobs(net);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(config_echo.len() as u32).to_le_bytes());
    out.extend_from_slice(config_echo.as_bytes());
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, tensor) in blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor_blob(&tensor, &mut out).expect("vec writes cannot fail");
    }
    out
}

/// Parsed checkpoint: the config echo and the named tensors.
pub struct Checkpoint {
    pub config_echo: String,
    pub tensors: Vec<(String, Tensor4)>,
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let bad = |offset: u64, msg: String| MlsError::Format {
        path: String::new(),
        offset,
        msg,
    };
    let mut head = [0u8; 9];
    r.read_exact(&mut head)
        .map_err(|_| bad(0, "truncated header".into()))?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(bad(0, "bad magic, expected \"MLSQCKPT\"".into()));
    }
    if head[8] != CHECKPOINT_VERSION {
        return Err(bad(8, format!("unsupported version {}", head[8])));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| bad(9, "truncated config length".into()))?;
    let cfg_len = u32::from_le_bytes(b4) as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)
        .map_err(|_| bad(13, "truncated config echo".into()))?;
    let config_echo = String::from_utf8(cfg)
        .map_err(|_| bad(13, "config echo is not UTF-8".into()))?;
    r.read_exact(&mut b4)
        .map_err(|_| bad(13 + cfg_len as u64, "truncated blob count".into()))?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4)
            .map_err(|_| bad(0, "truncated blob name length".into()))?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| bad(0, "truncated blob name".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| bad(0, "blob name is not UTF-8".into()))?;
        let tensor = read_tensor_blob(r)?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint {
        config_echo,
        tensors,
    })
}

/// Atomic write: temp file in the target directory, then rename.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
