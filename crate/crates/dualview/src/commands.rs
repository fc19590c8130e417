//! The five workflow steps behind the command line.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use dualview_core::frequency::{build_filter, difference_map, high_frequency_view, FilterGeometry, HighPassFilter};
use dualview_core::metrics::{evaluate_case, summarize, CaseReport, StructureFlag, StructureMetrics};
use dualview_core::pipeline::{fit_from, predict, prepare_sample, split_indices, EpochLog, Sample, Trainer};
use dualview_core::synth::{generate, PhantomSpec};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, SynthConfig};
use crate::dataset::{files_with_suffix, image_files, load_pairs, IMAGE_SUFFIX, LABEL_SUFFIX, PRED_SUFFIX};
use crate::error::{CliError, Result};
use crate::nifti_io::{load_labels, load_volume, save_labels, save_volume, LabelMap};

pub const MANIFEST: &str = "manifest.json";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.json";
pub const TRAIN_LOG: &str = "training_log.csv";
pub const SPLIT: &str = "split.json";
pub const PER_CASE: &str = "per_case.csv";
pub const SUMMARY: &str = "summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub label: String,
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub base_seed: u64,
    pub cases: Vec<ManifestEntry>,
}

/// Writes `count` phantom image/label pairs and a manifest into `out`.
pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    create_dir(out)?;
    let mut cases = Vec::with_capacity(cfg.count);
    for (id, spec) in cfg.phantom.dataset(cfg.count, cfg.seed) {
        let (image, label) = generate(&id, &spec)?;
        let image_name = format!("{id}{IMAGE_SUFFIX}.nii.gz");
        let label_name = format!("{id}{LABEL_SUFFIX}.nii.gz");
        save_volume(&image, &out.join(&image_name))?;
        save_labels(&label, &out.join(&label_name), &LabelMap::default())?;
        cases.push(ManifestEntry { id, seed: spec.seed, image: image_name, label: label_name, spec });
    }
    let manifest = Manifest { count: cfg.count, base_seed: cfg.seed, cases };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOptions {
    pub cutoff: f64,
    pub geometry: FilterGeometry,
    pub diff: bool,
    /// Use the all-pass filter; only meaningful with cutoff 0.
    pub keep_dc: bool,
}

/// Writes the high-frequency view (`_hf`) of every image in `input`, and with
/// `diff` the absolute difference map (`_diff`). Returns the written paths.
pub fn augment(input: &Path, out: &Path, opts: &AugmentOptions) -> Result<Vec<PathBuf>> {
    if opts.keep_dc && opts.cutoff != 0.0 {
        return Err(CliError::Config("--keep-dc requires --cutoff 0".into()));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for (id, path) in image_files(input)? {
        let image = load_volume(&path)?;
        let filter = if opts.keep_dc {
            HighPassFilter::identity(image.shape())
        } else {
            build_filter(image.shape(), opts.cutoff, opts.geometry)?
        };
        let hf = high_frequency_view(&image, &filter)?;
        let hf_path = out.join(format!("{id}_hf.nii.gz"));
        save_volume(&hf, &hf_path)?;
        written.push(hf_path);
        if opts.diff {
            let diff_path = out.join(format!("{id}_diff.nii.gz"));
            save_volume(&difference_map(&image, &hf)?, &diff_path)?;
            written.push(diff_path);
        }
    }
    Ok(written)
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    train: Vec<String>,
    validation: Vec<String>,
}

const LOG_HEADER: [&str; 20] = [
    "epoch", "seg_lr", "critic_lr",
    "v1_total", "v1_ce", "v1_dice", "v1_adv", "v1_masked",
    "v2_total", "v2_ce", "v2_dice", "v2_adv", "v2_masked",
    "critic", "val_dsc_v1", "val_dsc_v2", "val_dsc_ensemble", "best_val_dsc", "improved", "elapsed_s",
];

fn log_record(row: &EpochLog, elapsed: f64) -> Vec<String> {
    let mut r = vec![row.epoch.to_string(), row.seg_lr.to_string(), row.critic_lr.to_string()];
    for v in &row.views {
        r.extend([v.total, v.seg_ce, v.seg_dice, v.adv, v.masked].map(|x| x.to_string()));
    }
    r.push(row.critic.to_string());
    r.extend(row.val_dsc.map(|x| x.to_string()));
    r.push(row.best_val_dsc.to_string());
    r.push(row.improved.to_string());
    r.push(format!("{elapsed:.1}"));
    r
}

/// Loss values of a training log without the timing column, for comparisons.
pub fn read_loss_log(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::format(path, e))?;
        rows.push(rec.iter().take(LOG_HEADER.len() - 1).map(str::to_string).collect());
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub log: Vec<EpochLog>,
    pub best_val_dsc: f64,
}

/// Trains both views and the critic on `cfg.data.dir`, writing checkpoints,
/// the training log, the split and the effective config into `cfg.data.out`.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = cfg.data.dir.as_deref().ok_or_else(|| CliError::Config("data.dir is not set".into()))?;
    let out = cfg.data.out.as_deref().ok_or_else(|| CliError::Config("data.out is not set".into()))?;
    let tc = &cfg.train;
    let resume_ck = resume.map(|p| checkpoint::load(p, Some(tc))).transpose()?;

    let pairs = load_pairs(data, &cfg.labels)?;
    if pairs.is_empty() {
        return Err(CliError::Config(format!("no image/label pairs in {}", data.display())));
    }
    let (train_idx, val_idx) = split_indices(pairs.len(), tc.split_fraction, tc.seed)?;
    let filter = tc.filter()?;
    let prepare = |idx: &[usize]| -> Result<Vec<Sample>> {
        idx.iter().map(|&i| Ok(prepare_sample(&pairs[i].0, &pairs[i].1, tc, &filter)?)).collect()
    };
    let train_set = prepare(&train_idx)?;
    let val_set = prepare(&val_idx)?;
    let ids = |s: &[Sample]| s.iter().map(|x| x.case.id.clone()).collect::<Vec<_>>();

    create_dir(out)?;
    cfg.echo(out)?;
    write_json(&out.join(SPLIT), &SplitRecord { train: ids(&train_set), validation: ids(&val_set) })?;

    let log_path = out.join(TRAIN_LOG);
    let log_file = if resume_ck.is_some() && log_path.exists() {
        File::options().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| CliError::io(&log_path, e))?;
    let fresh_log = log_file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut writer = csv::Writer::from_writer(log_file);
    if fresh_log {
        writer.write_record(LOG_HEADER).map_err(|e| CliError::format(&log_path, e))?;
    }
    let started = std::time::Instant::now();
    let mut log_error = None;
    let outcome = fit_from(Trainer::new(tc.clone())?, resume_ck.as_ref(), &train_set, &val_set, &mut |row| {
        let res = writer.write_record(log_record(row, started.elapsed().as_secs_f64())).and_then(|_| Ok(writer.flush()?));
        if let Err(e) = res {
            log_error.get_or_insert(e);
        }
    });
    if let Some(e) = log_error {
        return Err(CliError::format(&log_path, e));
    }
    let outcome = outcome?;
    if let Some(best) = &outcome.best {
        checkpoint::save(best, &out.join(BEST_CHECKPOINT))?;
    }
    checkpoint::save(&outcome.last, &out.join(LAST_CHECKPOINT))?;
    Ok(TrainSummary {
        out: out.to_path_buf(),
        train_cases: ids(&train_set),
        val_cases: ids(&val_set),
        best_val_dsc: outcome.last.best_val_dsc,
        log: outcome.log,
    })
}

/// Writes `<case>_pred.nii.gz` for every image in `input`. With `expected`,
/// the checkpoint must have been trained with that configuration.
pub fn infer(
    checkpoint_path: &Path,
    input: &Path,
    out: &Path,
    labels: &LabelMap,
    expected: Option<&dualview_core::pipeline::TrainConfig>,
) -> Result<Vec<PathBuf>> {
    let ck = checkpoint::load(checkpoint_path, expected)?;
    let nets = ck.model()?.nets;
    create_dir(out)?;
    let echo = RunConfig { train: ck.config.clone(), labels: *labels, ..RunConfig::default() };
    echo.echo(out)?;
    let mut written = Vec::new();
    for (id, path) in image_files(input)? {
        let mut image = load_volume(&path)?;
        image.id = id.clone();
        let (mask, _) = predict(&image, &nets, &ck.config)?;
        let pred_path = out.join(format!("{id}{PRED_SUFFIX}.nii.gz"));
        save_labels(&mask, &pred_path, labels)?;
        written.push(pred_path);
    }
    Ok(written)
}

fn flag_name(flag: Option<StructureFlag>) -> &'static str {
    match flag {
        None => "",
        Some(StructureFlag::MissingInPrediction) => "missing_in_prediction",
        Some(StructureFlag::MissingInGroundTruth) => "missing_in_ground_truth",
        Some(StructureFlag::AbsentInBoth) => "absent_in_both",
    }
}

/// Scores predictions against ground truth matched by case id. Predictions
/// are `<case>_pred` files, or `<case>_label` files when a directory has no
/// predictions (so a label directory scored against itself is perfect).
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, out: &Path, labels: &LabelMap) -> Result<Vec<CaseReport>> {
    let mut preds = files_with_suffix(pred_dir, PRED_SUFFIX)?;
    if preds.is_empty() {
        preds = files_with_suffix(pred_dir, LABEL_SUFFIX)?;
    }
    let gts = files_with_suffix(gt_dir, LABEL_SUFFIX)?;
    let mut reports = Vec::new();
    for (case, gt_path) in &gts {
        let Some((_, pred_path)) = preds.iter().find(|(c, _)| c == case) else {
            log::warn!("no prediction for case {case}");
            continue;
        };
        let mut gt = load_labels(gt_path, labels)?;
        let pred = load_labels(pred_path, labels)?;
        gt.id = case.clone();
        reports.push(evaluate_case(&pred, &gt)?);
    }
    if reports.is_empty() {
        return Err(CliError::Config(format!(
            "no cases matched between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    create_dir(out)?;
    write_reports(&reports, out)?;
    Ok(reports)
}

fn write_reports(reports: &[CaseReport], out: &Path) -> Result<()> {
    let path = out.join(PER_CASE);
    let csv_err = |e: csv::Error| CliError::format(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    let mut header = vec!["case", "structure"];
    header.extend(StructureMetrics::NAMES);
    header.push("flag");
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        for (name, m, flag) in [
            ("left", &r.left, r.left_flag),
            ("right", &r.right, r.right_flag),
            ("average", &r.average, None),
        ] {
            let mut rec = vec![r.id.clone(), name.to_string()];
            rec.extend(m.values().map(|v| v.to_string()));
            rec.push(flag_name(flag).to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = out.join(SUMMARY);
    let stats = summarize(reports);
    let mut f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut text = format!("cases,{}\n{}", StructureMetrics::NAMES.join(","), reports.len());
    for s in stats {
        text.push_str(&format!(",{:.4}±{:.4}", s.mean, s.std));
    }
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(&path, e))
}
