//! The subcommands. Each one resolves its inputs, delegates to the library
//! crates and writes its artifacts into an output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bsfa_core::data::{
    derive_seed, field_file_name, ingest, sample_with_field, split, synthetic_shapes, write_dataset, IngestOptions,
    IngestReport, Manifest, Modality, RegisteredPair, Role, TrainingSample,
};
use bsfa_core::deformation::{synthesize_deformation, warp};
use bsfa_core::io::{load_png, save_png};
use bsfa_core::metrics::{endpoint_error, MetricReport, MetricRow, MetricScores};
use bsfa_core::{DeformationField, Image, MetricParams};
use bsfa_net::checkpoint;
use bsfa_net::convert::{images_to_tensor, tensor_to_field, tensor_to_image};
use bsfa_net::training::{Batch, Trainer};
use candle_core::Device;

use crate::config::{hex_digest, RunConfig};
use crate::error::{io_err, CliError, Result};

/// Seed offset for the cached test-set deformations.
const TEST_FIELD_STREAM: u64 = 0x7E57_F1E1_D5EE_D000;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const INGEST_REPORT_FILE: &str = "ingest_report.txt";
pub const FIELDS_DIR: &str = "fields";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn ingest_options(cfg: &RunConfig) -> IngestOptions {
    IngestOptions {
        expected_dims: (cfg.data.image_size > 0).then_some((cfg.data.image_size, cfg.data.image_size)),
    }
}

/// Ingests `cfg.data.root`, keeping the configured modalities.
fn load_pairs(cfg: &RunConfig) -> Result<(Vec<RegisteredPair>, IngestReport)> {
    let root = &cfg.data.root;
    if !root.is_dir() {
        return Err(usage(format!("dataset root {} is not a directory", root.display())));
    }
    let modalities = cfg.modalities()?;
    let (pairs, report) = ingest(root, &ingest_options(cfg))?;
    Ok((pairs.into_iter().filter(|p| modalities.contains(&p.modality)).collect(), report))
}

fn pairs_by_id(pairs: Vec<RegisteredPair>) -> BTreeMap<String, RegisteredPair> {
    pairs.into_iter().map(|p| (p.id.clone(), p)).collect()
}

/// Writes a synthetic dataset in the ingest layout.
pub fn cmd_synth(root: &Path, modalities: &[Modality], count: usize, size: usize, seed: u64) -> Result<usize> {
    if count == 0 || size < 16 {
        return Err(usage("synthetic datasets need count >= 1 and size >= 16"));
    }
    let mut total = 0;
    for &m in modalities {
        let pairs = synthetic_shapes(m, count, size, seed)?;
        write_dataset(root, &pairs)?;
        total += pairs.len();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub train: usize,
    pub test: usize,
    pub failures: usize,
    pub manifest: PathBuf,
}

/// Ingests the dataset, splits it and caches one deformation per test pair.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let out = &cfg.run.out_dir;
    create_dir(out)?;
    let hash = cfg.hash();
    let report_path = out.join(INGEST_REPORT_FILE);
    let (pairs, report) = match load_pairs(cfg) {
        Ok(r) => r,
        Err(e) => {
            write_file(&report_path, format!("# config_hash: {hash}\nfailed: {e}\n"))?;
            return Err(e);
        }
    };
    write_file(&report_path, format!("# config_hash: {hash}\n{}", report.to_text()))?;
    if pairs.is_empty() {
        return Err(usage(format!(
            "no usable pairs under {} ({} failures, see {})",
            cfg.data.root.display(),
            report.failures.len(),
            report_path.display()
        )));
    }

    let present: Vec<Modality> = cfg.modalities()?.into_iter().filter(|m| pairs.iter().any(|p| p.modality == *m)).collect();
    let counts: BTreeMap<Modality, usize> = present.iter().map(|&m| (m, cfg.test_count(m))).collect();
    let s = split(&pairs, &counts, cfg.data.split_seed).map_err(|e| usage(e.to_string()))?;
    let comments = vec![
        format!("config_hash: {hash}"),
        format!("root: {}", cfg.data.root.display()),
        format!("split_seed: {}", cfg.data.split_seed),
        format!("train: {}", s.train.len()),
        format!("test: {}", s.test.len()),
    ];
    let manifest = Manifest::from_split(&s, comments);

    let fields = out.join(FIELDS_DIR);
    create_dir(&fields)?;
    let by_id = pairs_by_id(pairs);
    for (i, id) in s.test.iter().enumerate() {
        let (h, w) = by_id[id].mri.dims();
        let spec = cfg.deformation.spec(derive_seed(cfg.data.split_seed ^ TEST_FIELD_STREAM, 0, i as u64));
        synthesize_deformation(&spec, h, w)?.save(&fields.join(field_file_name(id)))?;
    }
    let manifest_path = out.join(MANIFEST_FILE);
    write_file(&manifest_path, manifest.to_text())?;
    cfg.write_echo(out, "prepare")?;
    Ok(PrepareSummary {
        train: s.train.len(),
        test: s.test.len(),
        failures: report.failures.len(),
        manifest: manifest_path,
    })
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("manifest {}: {e}", path.display())))?;
    Manifest::parse(&text).map_err(|e| usage(format!("manifest {}: {e}", path.display())))
}

/// Test samples built from the manifest's cached fields.
fn test_samples(manifest: &Manifest, manifest_path: &Path, by_id: &BTreeMap<String, RegisteredPair>) -> Result<Vec<TrainingSample>> {
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).join(FIELDS_DIR);
    manifest
        .ids(Role::Test)
        .iter()
        .map(|id| {
            let pair = by_id
                .get(id)
                .ok_or_else(|| usage(format!("test pair {id} is not in the dataset")))?;
            let path = dir.join(field_file_name(id));
            if !path.is_file() {
                return Err(usage(format!("cached field {} is missing; rerun prepare", path.display())));
            }
            Ok(sample_with_field(pair, &DeformationField::load(&path)?)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub epoch: usize,
    pub last_total: Option<f64>,
    pub best_validation: Option<f64>,
}

fn write_train_log(path: &Path, trainer: &Trainer, hash: &str) -> Result<()> {
    let mut text = format!("# config_hash: {hash}\n{}\n", bsfa_net::training::EpochLog::csv_header());
    for e in &trainer.epochs {
        text.push_str(&e.csv_row());
        text.push('\n');
    }
    write_file(path, text)
}

fn mean_consistency(trainer: &Trainer, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += trainer.evaluate(b)?.consis;
    }
    Ok(total / batches.len() as f64)
}

/// Trains from scratch or resumes from `resume`, stopping after
/// `stop_after` epochs of this invocation when given.
pub fn cmd_train(cfg: &RunConfig, manifest_path: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> Result<TrainSummary> {
    let out = &cfg.run.out_dir;
    create_dir(out)?;
    let hash = cfg.hash();
    let dev = cfg.device()?;
    let dtype = cfg.dtype()?;

    let (pairs, report) = load_pairs(cfg)?;
    if !report.failures.is_empty() {
        log::warn!("{} pairs failed to load", report.failures.len());
    }
    let by_id = pairs_by_id(pairs);
    let (train, validation): (Vec<RegisteredPair>, Vec<TrainingSample>) = match manifest_path {
        Some(path) => {
            let manifest = read_manifest(path)?;
            let train = manifest
                .ids(Role::Train)
                .iter()
                .map(|id| by_id.get(id).cloned().ok_or_else(|| usage(format!("train pair {id} is not in the dataset"))))
                .collect::<Result<Vec<_>>>()?;
            (train, test_samples(&manifest, path, &by_id)?)
        }
        None => (by_id.into_values().collect(), Vec::new()),
    };
    if train.is_empty() {
        return Err(usage("no training pairs"));
    }
    for p in &train {
        cfg.model.check_input(p.mri.height(), p.mri.width()).map_err(|e| usage(format!("{}: {e}", p.id)))?;
    }

    let mut trainer = match resume {
        Some(path) => {
            if !path.is_file() {
                return Err(usage(format!("checkpoint {} does not exist", path.display())));
            }
            let ck = checkpoint::read(path, &dev)?;
            if ck.meta.model != cfg.model || ck.meta.train != cfg.train || ck.meta.deformation != cfg.deformation {
                return Err(usage(format!(
                    "checkpoint {} was trained with a different model/train/deformation configuration",
                    path.display()
                )));
            }
            ck.into_trainer(dev.clone())?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.deformation, train.len(), dtype, dev.clone())?,
    };

    let val_batches: Vec<Batch> = validation
        .chunks(cfg.train.batch_size)
        .map(|c| {
            let refs: Vec<&TrainingSample> = c.iter().collect();
            Batch::from_samples(&refs, trainer.dtype(), &dev)
        })
        .collect::<bsfa_net::Result<_>>()?;
    let mut best = trainer
        .epochs
        .iter()
        .filter_map(|e| e.validation)
        .fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.min(v))));

    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let log_path = out.join(TRAIN_LOG_FILE);
    cfg.write_echo(out, "train")?;
    let mut run = 0;
    while trainer.epoch < cfg.train.epochs && stop_after.is_none_or(|n| run < n) {
        let log = trainer.run_epoch(&train).inspect_err(|e| {
            log::error!("epoch {} failed: {e}; {} holds the last good state", trainer.epoch, last_path.display());
        })?;
        run += 1;
        if !val_batches.is_empty() {
            let v = mean_consistency(&trainer, &val_batches)?;
            trainer.epochs.last_mut().expect("epoch just logged").validation = Some(v);
            if best.is_none_or(|b| v < b) {
                best = Some(v);
                checkpoint::save(&trainer, &best_path, Some(&hash))?;
            }
        }
        log::info!("epoch {} total {:.6} consis {:.6}", log.epoch, log.total, log.losses.consis);
        write_train_log(&log_path, &trainer, &hash)?;
        if trainer.epoch % cfg.run.checkpoint_every == 0 {
            checkpoint::save(&trainer, &last_path, Some(&hash))?;
        }
    }
    checkpoint::save(&trainer, &last_path, Some(&hash))?;
    write_train_log(&log_path, &trainer, &hash)?;
    Ok(TrainSummary {
        epochs_run: run,
        epoch: trainer.epoch,
        last_total: trainer.epochs.last().map(|e| e.total),
        best_validation: best,
    })
}

fn load_trainer(cfg: &RunConfig, path: &Path) -> Result<(Trainer, RunConfig, Device)> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let dev = cfg.device()?;
    let ck = checkpoint::read(path, &dev)?;
    let effective = cfg.with_checkpoint(&ck.meta);
    Ok((ck.into_trainer(dev.clone())?, effective, dev))
}

/// Network outputs for one pair, cropped back to the input size.
pub struct Fused {
    pub fused: Image,
    pub registered: Image,
    pub field: DeformationField,
}

fn run_pair(trainer: &Trainer, moving: &Image, reference: &Image, dev: &Device) -> Result<Fused> {
    let (h, w) = reference.dims();
    let m = trainer.model_cfg.input_multiple();
    let mv = moving.luminance().pad_to_multiple(m);
    let rf = reference.luminance().pad_to_multiple(m);
    trainer.model_cfg.check_input(mv.height(), mv.width()).map_err(|e| usage(e.to_string()))?;
    let dtype = trainer.dtype();
    let fwd = trainer.inference_model()?.forward(&images_to_tensor(&[&mv], dtype, dev)?, &images_to_tensor(&[&rf], dtype, dev)?)?;
    Ok(Fused {
        fused: tensor_to_image(&fwd.fused, 0)?.crop(h, w)?,
        registered: tensor_to_image(&fwd.warped_a, 0)?.crop(h, w)?,
        field: tensor_to_field(&fwd.phi_ab, 0, 0)?.crop(h, w)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseSummary {
    pub fused: PathBuf,
    pub registered: PathBuf,
    pub field: PathBuf,
    pub dims: (usize, usize),
}

/// Registers `moving` onto `reference` and fuses them. Colour inputs are
/// fused on luminance and recoloured with the registered chroma.
pub fn cmd_fuse(cfg: &RunConfig, checkpoint_path: &Path, moving: &Path, reference: &Path) -> Result<FuseSummary> {
    let (trainer, effective, dev) = load_trainer(cfg, checkpoint_path)?;
    let hash = effective.hash();
    let mov = load_png(moving).map_err(|e| usage(e.to_string()))?;
    let rf = load_png(reference).map_err(|e| usage(e.to_string()))?;
    if mov.dims() != rf.dims() {
        return Err(usage(format!("moving {:?} and reference {:?} differ in size", mov.dims(), rf.dims())));
    }
    let out = run_pair(&trainer, &mov, &rf, &dev)?;
    let (fused, registered) = if mov.is_color() {
        let (_, cb, cr) = mov.to_ycbcr();
        let (cb, cr) = (warp(&cb, &out.field)?, warp(&cr, &out.field)?);
        (Image::from_ycbcr(&out.fused, &cb, &cr)?, warp(&mov, &out.field)?)
    } else {
        (out.fused, out.registered)
    };

    let dir = &cfg.run.out_dir;
    create_dir(dir)?;
    let text = [("config_hash", hash.as_str())];
    let summary = FuseSummary {
        fused: dir.join("fused.png"),
        registered: dir.join("registered.png"),
        field: dir.join("phi.dfld"),
        dims: fused.dims(),
    };
    save_png(&summary.fused, &fused, &text)?;
    save_png(&summary.registered, &registered, &text)?;
    out.field.save(&summary.field)?;
    effective.write_echo(dir, "fuse")?;
    Ok(summary)
}

/// Scores the checkpoint on the manifest's test pairs.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, manifest_path: &Path, csv_path: &Path) -> Result<MetricReport> {
    let manifest = read_manifest(manifest_path)?;
    let (trainer, effective, dev) = load_trainer(cfg, checkpoint_path)?;
    let hash = effective.hash();
    let (pairs, _) = load_pairs(cfg)?;
    let samples = test_samples(&manifest, manifest_path, &pairs_by_id(pairs))?;
    if samples.is_empty() {
        return Err(usage(format!("{} lists no test pairs", manifest_path.display())));
    }
    let params = MetricParams::default();
    let mut rows = Vec::new();
    for s in &samples {
        let out = run_pair(&trainer, &s.moving, &s.reference, &dev)?;
        let reference = s.reference.luminance();
        let label = s.label.luminance();
        rows.push(MetricRow {
            id: s.id.clone(),
            registered: MetricScores::compute(&out.registered, &reference, &out.fused, &params)?,
            label: MetricScores::compute(&label, &reference, &out.fused, &params)?,
            endpoint_error: Some(endpoint_error(&out.field, &s.gt_field)?),
        });
        log::info!("scored {}", s.id);
    }
    let report = MetricReport { params, rows };
    let comments = vec![
        format!("config_hash: {hash}"),
        format!("checkpoint: {}", checkpoint_path.display()),
        format!("manifest: {}", manifest_path.display()),
    ];
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
        effective.write_echo(dir, "eval")?;
    }
    write_file(csv_path, report.to_csv(&comments))?;
    Ok(report)
}

/// Hash identifying a report run: the configuration plus every input file.
pub fn report_hash(cfg: &RunConfig, inputs: &[(String, String)]) -> String {
    let mut text = cfg.to_toml();
    for (name, contents) in inputs {
        text.push_str(&format!("\n[input {name}] {}", hex_digest(contents.as_bytes())));
    }
    hex_digest(text.as_bytes())
}
