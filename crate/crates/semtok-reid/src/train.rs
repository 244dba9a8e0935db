//! End-to-end training: PK batch sampling, warmup/decay schedule, the
//! optimization loop with every ablation toggle, periodic retrieval
//! evaluation and checkpointing.
//!
//! All randomness is drawn from streams derived from (seed, epoch, step,
//! slot), so a run is a pure function of its configuration and dataset,
//! and resuming from a checkpoint reproduces the uninterrupted run
//! bitwise.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{restore_model, restore_optimizer, snapshot, write_checkpoint, Checkpoint};
use crate::config::{ConfigFile, Settings, ABLATION_GRID};
use crate::data::{augment, AugmentConfig, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{cmc_map, cosine_similarity, extract_features, EvalReport};
use crate::losses::{batch_hard_triplet, id_loss, smoothed_targets, total_loss};
use crate::model::{BatchItem, DataDims, ForwardOptions, ReidModel};
use crate::optim::AdamW;
use crate::rng::{stream, StreamTag};

pub const CHECKPOINT_FILE: &str = "checkpoint.rckp";
const EVAL_BATCH: usize = 64;

/// Learning rate at an integer epoch: linear ramp from base/10 to base over
/// the warmup epochs, flat until the decay epoch, then times the decay
/// factor.
pub fn lr_at(epoch: usize, s: &Settings) -> f64 {
    if epoch >= s.decay_epoch {
        return s.base_lr * s.decay_factor;
    }
    if epoch >= s.warmup_epochs {
        return s.base_lr;
    }
    let floor = s.base_lr / 10.0;
    floor + (s.base_lr - floor) * (epoch as f64 / s.warmup_epochs as f64)
}

/// Training-split records grouped per classifier class.
pub struct IdentityGroups {
    /// groups[class] = dataset record indices of that identity.
    pub groups: Vec<Vec<usize>>,
    /// identity label per class index (ascending).
    pub identities: Vec<u32>,
}

impl IdentityGroups {
    pub fn build(dataset: &Dataset) -> IdentityGroups {
        let identities = dataset.train_classes();
        let class_of: HashMap<u32, usize> = identities
            .iter()
            .enumerate()
            .map(|(c, &id)| (id, c))
            .collect();
        let mut groups = vec![Vec::new(); identities.len()];
        for (i, r) in dataset.records.iter().enumerate() {
            if r.split == Split::Train {
                groups[class_of[&r.identity]].push(i);
            }
        }
        IdentityGroups { groups, identities }
    }
}

/// Sample P identities × K images. Identities are drawn without
/// replacement; an identity with fewer than K images samples its images
/// with replacement. Returns (record index, class index) pairs.
pub fn pk_sample(
    groups: &IdentityGroups,
    p_ids: usize,
    k_imgs: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<(usize, usize)>> {
    if groups.groups.len() < p_ids {
        return Err(Error::Data(format!(
            "PK sampling needs {p_ids} identities, dataset has {}",
            groups.groups.len()
        )));
    }
    let mut classes: Vec<usize> = (0..groups.groups.len()).collect();
    classes.shuffle(rng);
    classes.truncate(p_ids);

    let mut batch = Vec::with_capacity(p_ids * k_imgs);
    for &class in &classes {
        let records = &groups.groups[class];
        if records.len() >= k_imgs {
            let mut pool = records.clone();
            pool.shuffle(rng);
            for &rec in pool.iter().take(k_imgs) {
                batch.push((rec, class));
            }
        } else {
            for _ in 0..k_imgs {
                let rec = records[rng.gen_range(0..records.len())];
                batch.push((rec, class));
            }
        }
    }
    Ok(batch)
}

pub fn steps_per_epoch(train_images: usize, batch_size: usize) -> usize {
    train_images.div_ceil(batch_size).max(1)
}

pub struct TrainResult {
    pub model: ReidModel,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub final_report: EvalReport,
}

/// Retrieval evaluation of the query split against the gallery split.
pub fn evaluate(model: &ReidModel, dataset: &Dataset, max_rank: usize) -> Result<EvalReport> {
    let q_idx = dataset.indices_of(Split::Query);
    let g_idx = dataset.indices_of(Split::Gallery);
    if q_idx.is_empty() || g_idx.is_empty() {
        return Err(Error::Data("dataset has an empty query or gallery split".into()));
    }
    let q = extract_features(model, dataset, &q_idx, EVAL_BATCH)?;
    let g = extract_features(model, dataset, &g_idx, EVAL_BATCH)?;
    let sim = cosine_similarity(&q, &g)?;
    cmc_map(
        &sim,
        &q.identities,
        &q.cameras,
        &g.identities,
        &g.cameras,
        max_rank,
    )
}

/// Run the training loop. `resume` continues from a checkpoint (its config
/// must describe the same model; the epoch target comes from `settings`).
/// `log` receives one machine-parsable line per epoch and evaluation.
pub fn train(
    settings: &Settings,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainResult> {
    dataset.validate_protocol()?;
    let groups = IdentityGroups::build(dataset);
    if groups.identities.is_empty() {
        return Err(Error::Data("dataset has no training identities".into()));
    }
    let dims = DataDims {
        img_h: dataset.height,
        img_w: dataset.width,
        num_cameras: dataset.num_cameras(),
        num_classes: groups.identities.len(),
    };

    let (model, mut optimizer, start_epoch) = match resume {
        Some(ckpt) => {
            let model = restore_model(ckpt)?;
            if model.dims.img_h != dims.img_h
                || model.dims.img_w != dims.img_w
                || model.dims.num_classes != dims.num_classes
                || model.dims.num_cameras != dims.num_cameras
            {
                return Err(Error::Data(
                    "checkpoint dimensions do not match the dataset".into(),
                ));
            }
            let opt = restore_optimizer(ckpt, &model)?;
            let done = ckpt.derived_usize("derived.epochs_done")?;
            (model, opt, done)
        }
        None => {
            let model = ReidModel::new(settings, dims)?;
            let opt = AdamW::new(&model.store, settings.weight_decay);
            (model, opt, 0)
        }
    };

    let timing = std::env::var_os("SEMTOK_REID_TIMING").is_some();
    let aug_cfg = AugmentConfig::default();
    let fill = dataset.train_pixel_mean();
    let train_count = dataset.indices_of(Split::Train).len();
    let batch_size = settings.batch_size();
    let steps = steps_per_epoch(train_count, batch_size);
    let opts = ForwardOptions {
        classify: true,
        capture_sgi: false,
    };

    for epoch in start_epoch..settings.epochs {
        let lr = lr_at(epoch, settings);
        let mut sum_id = 0.0;
        let mut sum_tri = 0.0;
        for step in 0..steps {
            let mut pk_rng = stream(settings.seed, StreamTag::PkSample, epoch as u64, step as u64, 0);
            let batch = pk_sample(&groups, settings.p_ids, settings.k_imgs, &mut pk_rng)?;

            let mut items = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for (slot, &(rec, class)) in batch.iter().enumerate() {
                let sample = dataset.sample(rec);
                let mut aug_rng = stream(
                    settings.seed,
                    StreamTag::Augment,
                    epoch as u64,
                    step as u64,
                    slot as u64,
                );
                let pixels = augment(
                    &sample.pixels,
                    sample.height,
                    sample.width,
                    &aug_cfg,
                    &fill,
                    &mut aug_rng,
                );
                items.push(BatchItem {
                    patches: model.patches_of(&pixels)?,
                    camera: sample.camera as usize,
                    class: Some(class),
                });
                labels.push(class);
            }

            let t0 = std::time::Instant::now();
            let patches = model.pack_batch(&items)?;
            let cams: Vec<usize> = items.iter().map(|it| it.camera).collect();
            model.store.zero_grads();
            let out = model.forward(&patches, &cams, &opts)?;
            let t1 = std::time::Instant::now();
            let logits = out.logits.as_ref().expect("classify requested");

            let targets = labels
                .iter()
                .map(|&l| smoothed_targets(l, dims.num_classes, settings.epsilon))
                .collect::<Result<Vec<_>>>()?;
            let l_id = id_loss(logits, &targets)?;
            let triplet = batch_hard_triplet(&out.features, &labels, settings.margin)?;
            let loss = total_loss(&l_id, &triplet.loss, settings.alpha1, settings.alpha2)?;

            let (id_val, tri_val, total_val) = (l_id.item(), triplet.loss.item(), loss.item());
            if !total_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}: l_id={id_val} l_tri={tri_val}"
                )));
            }
            let t2 = std::time::Instant::now();
            loss.backward()?;
            let t3 = std::time::Instant::now();
            optimizer.step(&model.store, lr)?;
            if timing {
                eprintln!(
                    "timing fwd={:?} loss={:?} bwd={:?} opt={:?}",
                    t1 - t0,
                    t2 - t1,
                    t3 - t2,
                    t3.elapsed()
                );
            }
            sum_id += id_val;
            sum_tri += tri_val;
        }
        log(&format!(
            "epoch={epoch} l_id={:.6} l_tri={:.6} lr={:.6e}",
            sum_id / steps as f64,
            sum_tri / steps as f64,
            lr
        ));

        let is_last = epoch + 1 == settings.epochs;
        if settings.eval_every > 0 && (epoch + 1) % settings.eval_every == 0 && !is_last {
            let report = evaluate(&model, dataset, settings.max_rank)?;
            log(&format!(
                "epoch={epoch} eval_mAP={:.6} eval_rank1={:.6}",
                report.map,
                report.rank(1)
            ));
        }
    }

    let final_report = evaluate(&model, dataset, settings.max_rank)?;
    log(&format!(
        "final_mAP={:.6} final_rank1={:.6}",
        final_report.map,
        final_report.rank(1)
    ));

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let ckpt = snapshot(&model, Some(&optimizer), settings.epochs);
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    }

    Ok(TrainResult {
        model,
        optimizer,
        epochs_done: settings.epochs,
        final_report,
    })
}

/// One row of the ablation table.
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<(f64, f64), String>,
}

/// Train and evaluate the seven-variant grid over the given seeds. A
/// failing variant is recorded as an error row; the rest proceed.
pub fn run_ablation_suite(
    base: &ConfigFile,
    dataset: &Dataset,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for &variant in ABLATION_GRID {
        for &seed in seeds {
            let outcome = (|| -> Result<(f64, f64)> {
                let mut cfg = base.clone();
                cfg.apply_variant(variant)?;
                cfg.set("train.seed", &seed.to_string())?;
                let settings = cfg.resolve()?;
                let mut sink = |line: &str| log(&format!("[{variant} seed={seed}] {line}"));
                let result = train(&settings, dataset, None, None, &mut sink)?;
                Ok((result.final_report.map, result.final_report.rank(1)))
            })()
            .map_err(|e| e.to_string());
            log(&match &outcome {
                Ok((map, r1)) => format!("variant={variant} seed={seed} mAP={map:.6} rank1={r1:.6}"),
                Err(e) => format!("variant={variant} seed={seed} error={e}"),
            });
            rows.push(AblationRow {
                variant: variant.to_string(),
                seed,
                outcome,
            });
        }
    }
    rows
}

/// Render ablation rows as a CSV document.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,seed,mAP,Rank-1\n");
    for row in rows {
        match &row.outcome {
            Ok((map, r1)) => {
                out.push_str(&format!("{},{},{:.6},{:.6}\n", row.variant, row.seed, map, r1))
            }
            Err(_) => out.push_str(&format!("{},{},error,error\n", row.variant, row.seed)),
        }
    }
    out
}

/// Render ablation rows as an aligned text table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<12} {:>6} {:>10} {:>10}\n", "variant", "seed", "mAP", "Rank-1"));
    for row in rows {
        match &row.outcome {
            Ok((map, r1)) => out.push_str(&format!(
                "{:<12} {:>6} {:>10.4} {:>10.4}\n",
                row.variant, row.seed, map, r1
            )),
            Err(_) => out.push_str(&format!(
                "{:<12} {:>6} {:>10} {:>10}\n",
                row.variant, row.seed, "error", "error"
            )),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_settings() -> Settings {
        ConfigFile::default().resolve().unwrap()
    }

    #[test]
    fn schedule_matches_stated_points() {
        // paper-schedule configuration: warmup 10, decay at 30
        let mut cfg = ConfigFile::default();
        cfg.set("train.epochs", "60").unwrap();
        cfg.set("train.decay_epoch", "30").unwrap();
        let s = cfg.resolve().unwrap();
        assert!((lr_at(0, &s) - 3e-5).abs() < 1e-12);
        assert!((lr_at(10, &s) - 3e-4).abs() < 1e-12);
        assert!((lr_at(20, &s) - 3e-4).abs() < 1e-12);
        assert!((lr_at(30, &s) - 3e-5).abs() < 1e-12);
        assert!((lr_at(59, &s) - 3e-5).abs() < 1e-12);
    }

    #[test]
    fn schedule_closed_form_everywhere() {
        let s = desk_settings();
        for epoch in 0..s.epochs {
            let expected = if epoch >= s.decay_epoch {
                s.base_lr * s.decay_factor
            } else if epoch >= s.warmup_epochs {
                s.base_lr
            } else {
                s.base_lr / 10.0
                    + (s.base_lr - s.base_lr / 10.0) * epoch as f64 / s.warmup_epochs as f64
            };
            assert!((lr_at(epoch, &s) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn pk_sampling_contract() {
        let groups = IdentityGroups {
            groups: (0..20).map(|c| (0..6).map(|i| c * 6 + i).collect()).collect(),
            identities: (0..20).map(|c| c as u32).collect(),
        };
        let mut rng = stream(1, StreamTag::PkSample, 0, 0, 0);
        let batch = pk_sample(&groups, 16, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 64);
        let mut counts = HashMap::new();
        for &(_, class) in &batch {
            *counts.entry(class).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 4), "every identity contributes K images");
    }

    #[test]
    fn pk_sampling_with_replacement_when_short() {
        let groups = IdentityGroups {
            groups: vec![vec![0, 1], vec![2, 3], vec![4, 5]],
            identities: vec![0, 1, 2],
        };
        let mut rng = stream(2, StreamTag::PkSample, 0, 0, 0);
        let batch = pk_sample(&groups, 2, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
    }

    #[test]
    fn pk_sampling_errors_when_too_few_identities() {
        let groups = IdentityGroups {
            groups: vec![vec![0, 1]],
            identities: vec![0],
        };
        let mut rng = stream(3, StreamTag::PkSample, 0, 0, 0);
        assert!(matches!(
            pk_sample(&groups, 2, 2, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn steps_per_epoch_covers_dataset() {
        assert_eq!(steps_per_epoch(1024, 64), 16);
        assert_eq!(steps_per_epoch(100, 64), 2);
        assert_eq!(steps_per_epoch(10, 64), 1);
    }
}
