//! Checkpoint serialization.
//!
//! Binary layout: magic `RCKP`, little-endian u32 version, u32 tensor
//! count, then per tensor a length-prefixed UTF-8 name, a u32 rank with
//! u32 dimensions, and the little-endian f64 payload. The file ends with a
//! UTF-8 config snapshot as key=value lines: the full configuration plus
//! `derived.*` dataset dimensions, the epoch counter and the optimizer
//! step. Reload plus continue reproduces an uninterrupted run bitwise.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::config::ConfigFile;
use crate::error::{Error, Result};
use crate::model::{DataDims, ReidModel};
use crate::optim::AdamW;

pub const RCKP_MAGIC: &[u8; 4] = b"RCKP";
pub const RCKP_VERSION: u32 = 1;

pub struct Checkpoint {
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub config: ConfigFile,
    pub derived: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn tensor_map(&self) -> HashMap<String, (Vec<usize>, Vec<f64>)> {
        self.tensors
            .iter()
            .map(|(n, s, d)| (n.clone(), (s.clone(), d.clone())))
            .collect()
    }

    pub fn derived_usize(&self, key: &str) -> Result<usize> {
        self.derived
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Data(format!("checkpoint snapshot is missing {key}")))
    }

    pub fn data_dims(&self) -> Result<DataDims> {
        Ok(DataDims {
            img_h: self.derived_usize("derived.img_h")?,
            img_w: self.derived_usize("derived.img_w")?,
            num_cameras: self.derived_usize("derived.num_cameras")?,
            num_classes: self.derived_usize("derived.num_classes")?,
        })
    }
}

/// Gather model parameters, optimizer state and counters into a checkpoint.
pub fn snapshot(
    model: &ReidModel,
    optimizer: Option<&AdamW>,
    epochs_done: usize,
) -> Checkpoint {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = model
        .store
        .all()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.to_vec()))
        .collect();
    if let Some(opt) = optimizer {
        for (name, m, v) in opt.state() {
            tensors.push((format!("adam.m.{name}"), vec![m.len()], m.clone()));
            tensors.push((format!("adam.v.{name}"), vec![v.len()], v.clone()));
        }
    }

    let mut derived = BTreeMap::new();
    derived.insert("derived.img_h".into(), model.dims.img_h.to_string());
    derived.insert("derived.img_w".into(), model.dims.img_w.to_string());
    derived.insert(
        "derived.num_cameras".into(),
        model.dims.num_cameras.to_string(),
    );
    derived.insert(
        "derived.num_classes".into(),
        model.dims.num_classes.to_string(),
    );
    derived.insert("derived.epochs_done".into(), epochs_done.to_string());
    derived.insert(
        "derived.optimizer_steps".into(),
        optimizer.map(|o| o.step_count).unwrap_or(0).to_string(),
    );

    let mut config = ConfigFile::default();
    for line in model_config_lines(model) {
        let (k, v) = line;
        config.set(&k, &v).expect("model settings use registry keys");
    }
    Checkpoint {
        tensors,
        config,
        derived,
    }
}

fn model_config_lines(model: &ReidModel) -> Vec<(String, String)> {
    use crate::config::{CssMode, PstgMode, SgiVariant};
    let s = &model.settings;
    let css = match s.css_mode {
        CssMode::Off => "off",
        CssMode::Late => "late",
        CssMode::Input => "input",
    };
    let sgi = match s.sgi_variant {
        SgiVariant::Full => "full",
        SgiVariant::QueryOnly => "query_only",
        SgiVariant::None => "none",
    };
    let pstg = match s.pstg_mode {
        PstgMode::Generated => "generated",
        PstgMode::LearnableToken => "learnable_token",
    };
    vec![
        ("model.dim".into(), s.dim.to_string()),
        ("model.heads".into(), s.heads.to_string()),
        ("model.vision_blocks".into(), s.vision_blocks.to_string()),
        ("model.decoder_blocks".into(), s.decoder_blocks.to_string()),
        ("model.vocab".into(), s.vocab.to_string()),
        ("model.patch_size".into(), s.patch_size.to_string()),
        ("pstg.instruction".into(), s.instruction.clone()),
        ("pstg.mode".into(), pstg.into()),
        ("sgi.variant".into(), sgi.into()),
        ("css.mode".into(), css.into()),
        ("loss.alpha1".into(), format!("{}", s.alpha1)),
        ("loss.alpha2".into(), format!("{}", s.alpha2)),
        ("loss.margin".into(), format!("{}", s.margin)),
        ("loss.epsilon".into(), format!("{}", s.epsilon)),
        ("train.p_ids".into(), s.p_ids.to_string()),
        ("train.k_imgs".into(), s.k_imgs.to_string()),
        ("train.epochs".into(), s.epochs.to_string()),
        ("train.base_lr".into(), format!("{}", s.base_lr)),
        ("train.warmup_epochs".into(), s.warmup_epochs.to_string()),
        ("train.decay_epoch".into(), s.decay_epoch.to_string()),
        ("train.decay_factor".into(), format!("{}", s.decay_factor)),
        ("train.weight_decay".into(), format!("{}", s.weight_decay)),
        ("train.stop_gradient".into(), s.stop_gradient.to_string()),
        ("train.seed".into(), s.seed.to_string()),
        ("train.eval_every".into(), s.eval_every.to_string()),
        ("eval.max_rank".into(), s.max_rank.to_string()),
    ]
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(RCKP_MAGIC);
    out.extend_from_slice(&RCKP_VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(ckpt.config.serialize().as_bytes());
    for (k, v) in &ckpt.derived {
        out.extend_from_slice(format!("{k}={v}\n").as_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: format!("cannot open: {e}"),
        })?
        .read_to_end(&mut bytes)?;
    let err = |offset: usize, msg: String| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != RCKP_MAGIC {
        return Err(err(0, "bad magic, expected RCKP".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RCKP_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<std::ops::Range<usize>> {
        if *pos + n > bytes.len() {
            return Err(err(*pos, format!("truncated while reading {what}")));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let r = take(&mut pos, 4, "name length")?;
        let name_len = u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
        if name_len > 4096 {
            return Err(err(pos - 4, format!("implausible name length {name_len}")));
        }
        let r = take(&mut pos, name_len, "name")?;
        let name = String::from_utf8(bytes[r].to_vec())
            .map_err(|_| err(pos - name_len, "tensor name is not UTF-8".into()))?;
        let r = take(&mut pos, 4, "rank")?;
        let rank = u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(err(pos - 4, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let r = take(&mut pos, 4, "dimension")?;
            shape.push(u32::from_le_bytes(bytes[r].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let r = take(&mut pos, numel * 8, "tensor payload")?;
        let data: Vec<f64> = bytes[r]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }

    let snapshot = std::str::from_utf8(&bytes[pos..])
        .map_err(|_| err(pos, "config snapshot is not UTF-8".into()))?;
    let mut config_lines = String::new();
    let mut derived = BTreeMap::new();
    for line in snapshot.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.starts_with("derived.") {
                derived.insert(k.to_string(), v.to_string());
                continue;
            }
        }
        config_lines.push_str(line);
        config_lines.push('\n');
    }
    let config = ConfigFile::parse(&config_lines)
        .map_err(|e| err(pos, format!("bad config snapshot: {e}")))?;
    Ok(Checkpoint {
        tensors,
        config,
        derived,
    })
}

/// Rebuild a model from a checkpoint: same configuration, same derived
/// dimensions, parameter values loaded in place.
pub fn restore_model(ckpt: &Checkpoint) -> Result<ReidModel> {
    let settings = ckpt.config.resolve()?;
    let model = ReidModel::new(&settings, ckpt.data_dims()?)?;
    let map = ckpt.tensor_map();
    model.store.load_values(&map)?;
    Ok(model)
}

/// Restore optimizer moments saved next to the parameters.
pub fn restore_optimizer(ckpt: &Checkpoint, model: &ReidModel) -> Result<AdamW> {
    let settings = ckpt.config.resolve()?;
    let mut opt = AdamW::new(&model.store, settings.weight_decay);
    let map = ckpt.tensor_map();
    let mut slots = Vec::new();
    for name in opt
        .state_names()
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
    {
        let m = map
            .get(&format!("adam.m.{name}"))
            .ok_or_else(|| Error::Data(format!("checkpoint missing adam.m.{name}")))?;
        let v = map
            .get(&format!("adam.v.{name}"))
            .ok_or_else(|| Error::Data(format!("checkpoint missing adam.v.{name}")))?;
        slots.push((name, m.1.clone(), v.1.clone()));
    }
    let steps = ckpt.derived_usize("derived.optimizer_steps")? as u64;
    opt.restore(steps, slots)?;
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigFile;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("semtok-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn toy_model() -> ReidModel {
        let mut cfg = ConfigFile::default();
        cfg.set("model.dim", "16").unwrap();
        cfg.set("model.heads", "2").unwrap();
        cfg.set("model.vision_blocks", "1").unwrap();
        cfg.set("model.decoder_blocks", "1").unwrap();
        cfg.set("model.vocab", "64").unwrap();
        cfg.set("model.patch_size", "8").unwrap();
        ReidModel::new(
            &cfg.resolve().unwrap(),
            DataDims {
                img_h: 16,
                img_w: 16,
                num_cameras: 2,
                num_classes: 3,
            },
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_values_bitwise() {
        let model = toy_model();
        let opt = AdamW::new(&model.store, 1e-4);
        let ckpt = snapshot(&model, Some(&opt), 3);
        let path = tmp("roundtrip.rckp");
        write_checkpoint(&path, &ckpt).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for ((n1, s1, d1), (n2, s2, d2)) in ckpt.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            let b1: Vec<u64> = d1.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = d2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2, "tensor {n1} not bitwise identical");
        }
        assert_eq!(loaded.derived_usize("derived.epochs_done").unwrap(), 3);

        let restored = restore_model(&loaded).unwrap();
        assert_eq!(
            restored.store.checksum_prefix(""),
            model.store.checksum_prefix("")
        );
        restore_optimizer(&loaded, &restored).unwrap();
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let path = tmp("corrupt.rckp");
        std::fs::write(&path, b"JUNKDATA").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_tensor_is_format_error() {
        let model = toy_model();
        let ckpt = snapshot(&model, None, 0);
        let path = tmp("trunc.rckp");
        write_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..200]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
