//! Command-line surface: dataset generation, training, evaluation, the
//! ablation suite, gradient checking and attention dumping.
//!
//! Exit codes: 0 success, 2 usage/configuration, 3 data/format, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semtok_reid::checkpoint::{read_checkpoint, restore_model, write_checkpoint, Checkpoint};
use semtok_reid::checks::all_chains;
use semtok_reid::config::ConfigFile;
use semtok_reid::data::{generate_dataset, read_rimg, Dataset, GenParams, INDEX_FILE};
use semtok_reid::error::{Error, Result};
use semtok_reid::eval::{extract_features, FeatureMatrix};
use semtok_reid::model::{BatchItem, ForwardOptions};
use semtok_reid::tensor::{check_primitive_case, primitive_catalogue};
use semtok_reid::train::{ablation_csv, ablation_table, evaluate, run_ablation_suite, train};

#[derive(Parser)]
#[command(
    name = "semtok-reid",
    version,
    about = "Semantic-token person re-identification at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pedestrian dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// training identities
        #[arg(long, default_value_t = 64)]
        ids: usize,
        /// test identities (disjoint from training)
        #[arg(long, default_value_t = 32)]
        test_ids: usize,
        #[arg(long, default_value_t = 4)]
        cams: usize,
        /// images per identity per camera
        #[arg(long, default_value_t = 4)]
        imgs_per: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
    /// Train a model on a generated dataset
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ablation variant: full|no_pstg|no_sgi|stop_grad|css_off|css_late|css_input|query_only
        #[arg(long)]
        variant: Option<String>,
        /// continue from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint under the cross-camera retrieval protocol
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// report destination (key=value lines plus a CMC CSV row)
        #[arg(long, default_value = "eval_report.txt")]
        out: PathBuf,
        /// also export query/gallery features in the checkpoint tensor format
        #[arg(long)]
        dump_features: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid over several seeds
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// comma-separated seeds
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and module chain
    GradCheck {
        #[arg(long, default_value = "small", value_parser = ["small", "full"])]
        scale: String,
    },
    /// Dump raw interaction-module attention weights for one image
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::from_file(p),
        None => Ok(ConfigFile::default()),
    }
}

/// A dataset path that does not exist is a usage error, not a data error.
fn require_data_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            seed,
            ids,
            test_ids,
            cams,
            imgs_per,
            height,
            width,
        } => {
            let params = GenParams {
                seed,
                num_train_ids: ids,
                num_test_ids: test_ids,
                cameras: cams,
                imgs_per_id_per_cam: imgs_per,
                height,
                width,
            };
            let records = generate_dataset(&params, &out)?;
            let train_n = records
                .iter()
                .filter(|r| r.split == semtok_reid::data::Split::Train)
                .count();
            println!(
                "wrote {} images ({} train, {} test) and {} to {}",
                records.len(),
                train_n,
                records.len() - train_n,
                INDEX_FILE,
                out.display()
            );
            Ok(())
        }

        Command::Train {
            config,
            data,
            out,
            variant,
            resume,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = &variant {
                cfg.apply_variant(v)?;
            }
            let settings = cfg.resolve()?;
            require_data_dir(&data)?;
            let dataset = Dataset::load(&data)?;
            let resume_ckpt = match &resume {
                Some(p) => Some(read_checkpoint(p)?),
                None => None,
            };
            std::fs::create_dir_all(&out)?;
            let log_path = out.join("train_log.txt");
            let mut log_file = std::fs::File::create(&log_path)?;
            let mut log = |line: &str| {
                use std::io::Write;
                println!("{line}");
                let _ = writeln!(log_file, "{line}");
            };
            let result = train(&settings, &dataset, Some(&out), resume_ckpt.as_ref(), &mut log)?;
            println!(
                "checkpoint={}",
                out.join(semtok_reid::train::CHECKPOINT_FILE).display()
            );
            println!("mAP={:.6}", result.final_report.map);
            println!("Rank-1={:.6}", result.final_report.rank(1));
            Ok(())
        }

        Command::Eval {
            ckpt,
            data,
            out,
            dump_features,
        } => {
            let checkpoint = read_checkpoint(&ckpt)?;
            let model = restore_model(&checkpoint)?;
            require_data_dir(&data)?;
            let dataset = Dataset::load(&data)?;
            let settings = checkpoint.config.resolve()?;
            let report = evaluate(&model, &dataset, settings.max_rank)?;
            print!("{}", report.serialize());
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::write(&out, report.serialize())?;
            println!("report={}", out.display());

            if let Some(feat_path) = dump_features {
                let q_idx = dataset.indices_of(semtok_reid::data::Split::Query);
                let g_idx = dataset.indices_of(semtok_reid::data::Split::Gallery);
                let q = extract_features(&model, &dataset, &q_idx, 64)?;
                let g = extract_features(&model, &dataset, &g_idx, 64)?;
                write_feature_dump(&feat_path, &q, &g)?;
                println!("features={}", feat_path.display());
            }
            Ok(())
        }

        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => {
            let cfg = load_config(&config)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed `{s}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if seeds.is_empty() {
                return Err(Error::Config("need at least one seed".into()));
            }
            require_data_dir(&data)?;
            let dataset = Dataset::load(&data)?;
            std::fs::create_dir_all(&out)?;
            let mut log = |line: &str| println!("{line}");
            let rows = run_ablation_suite(&cfg, &dataset, &seeds, &mut log);
            let csv = ablation_csv(&rows);
            let csv_path = out.join("ablation_results.csv");
            std::fs::write(&csv_path, &csv)?;
            print!("{}", ablation_table(&rows));
            println!("results={}", csv_path.display());
            Ok(())
        }

        Command::GradCheck { scale } => {
            let full = scale == "full";
            let (instances, chain_coords) = if full { (3, Some(512)) } else { (2, Some(48)) };
            let sabotage = std::env::var("SEMTOK_REID_GRADCHECK_SABOTAGE").ok();
            let mut failures = Vec::new();

            for case in primitive_catalogue() {
                let corrupt = sabotage.as_deref() == Some(case.name);
                let outcome = check_primitive_case(&case, instances, 0xD15C0, corrupt)?;
                println!(
                    "primitive={} max_rel_err={:.3e} coords={} status={}",
                    outcome.name,
                    outcome.max_rel_err,
                    outcome.coords_checked,
                    if outcome.passed { "pass" } else { "fail" }
                );
                if !outcome.passed {
                    failures.push(outcome.name.clone());
                }
            }

            for outcome in all_chains(0xD15C0, chain_coords)? {
                println!(
                    "chain={} max_rel_err={:.3e} coords={} status={}",
                    outcome.name,
                    outcome.max_rel_err,
                    outcome.coords_checked,
                    if outcome.passed { "pass" } else { "fail" }
                );
                if !outcome.passed {
                    failures.push(outcome.name.clone());
                }
            }

            if failures.is_empty() {
                println!("gradcheck=pass");
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed for: {}",
                    failures.join(", ")
                )))
            }
        }

        Command::DumpAttention { ckpt, image, out } => {
            let checkpoint = read_checkpoint(&ckpt)?;
            let model = restore_model(&checkpoint)?;
            if model.settings.sgi_variant == semtok_reid::config::SgiVariant::None {
                return Err(Error::Config(
                    "checkpoint was trained without an interaction module; nothing to dump".into(),
                ));
            }
            let (h, w, rgb) = read_rimg(&image)?;
            if h != model.dims.img_h || w != model.dims.img_w {
                return Err(Error::Data(format!(
                    "image is {h}x{w}, model expects {}x{}",
                    model.dims.img_h, model.dims.img_w
                )));
            }
            let camera = camera_of_image(&image)?.unwrap_or(0);
            let pixels: Vec<f64> = rgb.iter().map(|&b| b as f64 / 255.0).collect();
            let item = BatchItem {
                patches: model.patches_of(&pixels)?,
                camera,
                class: None,
            };
            let patches = model.pack_batch(std::slice::from_ref(&item))?;
            let fwd = model.forward(
                &patches,
                &[camera],
                &ForwardOptions {
                    classify: false,
                    capture_sgi: true,
                },
            )?;
            let layers = fwd.sgi_attention.expect("capture requested");

            let mut text = String::new();
            text.push_str("# interaction-module attention weights\n");
            text.push_str(&format!(
                "layers={} heads={} seq={}\n",
                layers.len(),
                layers.first().map(|l| l.entries.len()).unwrap_or(0),
                layers
                    .first()
                    .and_then(|l| l.entries.first())
                    .map(|h| h.cols)
                    .unwrap_or(0)
            ));
            for (li, layer) in layers.iter().enumerate() {
                for head in &layer.entries {
                    for (ri, row) in head.weights.chunks(head.cols).enumerate() {
                        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12}")).collect();
                        text.push_str(&format!("{li},{},{ri},{}\n", head.head, cells.join(",")));
                    }
                }
            }
            std::fs::write(&out, text)?;
            println!("attention={}", out.display());
            Ok(())
        }
    }
}

/// Look up the image's camera id in the index.csv sitting next to it.
fn camera_of_image(image: &Path) -> Result<Option<usize>> {
    let Some(dir) = image.parent() else {
        return Ok(None);
    };
    let index = dir.join(INDEX_FILE);
    if !index.exists() {
        return Ok(None);
    }
    let name = image
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let text = std::fs::read_to_string(&index)?;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() == 4 && fields[0] == name {
            return Ok(fields[2].parse().ok());
        }
    }
    Ok(None)
}

/// Query/gallery features in the checkpoint tensor container.
fn write_feature_dump(path: &Path, q: &FeatureMatrix, g: &FeatureMatrix) -> Result<()> {
    let as_f64 = |v: &[u32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
    let tensors = vec![
        ("query.features".to_string(), vec![q.rows, q.dim], q.data.clone()),
        ("query.identities".to_string(), vec![q.rows], as_f64(&q.identities)),
        ("query.cameras".to_string(), vec![q.rows], as_f64(&q.cameras)),
        ("gallery.features".to_string(), vec![g.rows, g.dim], g.data.clone()),
        ("gallery.identities".to_string(), vec![g.rows], as_f64(&g.identities)),
        ("gallery.cameras".to_string(), vec![g.rows], as_f64(&g.cameras)),
    ];
    let ckpt = Checkpoint {
        tensors,
        config: ConfigFile::default(),
        derived: Default::default(),
    };
    write_checkpoint(path, &ckpt)
}
