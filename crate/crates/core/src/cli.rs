//! Library side of the `vistanet` subcommands: synth, train, predict, softnms, eval.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::KeyValues;
use crate::data::{
    self, generate_synthetic_frame, list_images, load_dataset, read_image, split_dataset, stem, write_dataset,
    write_image_png, write_mask_png, ClassLabel, DatasetLayout,
};
use crate::detection::{format_detections, read_detections, soft_nms, SuppressionConfig, SuppressionMethod};
use crate::encoder::{predict, Architecture, BackboneSpec, Model};
use crate::error::{Error, Result};
use crate::evaluation::{
    classification_metrics, detection_metrics, Interpolation, LabeledImage, MetricsReport,
};
use crate::ops::Activation;
use crate::rng::{Seeder, DEFAULT_SEED};
use crate::segmentation::{explain, overlay};
use crate::training::{train, LossWeights, TrainConfig, TrainLog};

/// Environment variable capping worker threads.
pub const WORKERS_ENV: &str = "VISTANET_NUM_WORKERS";

/// Thread pool sized by [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_pool() -> rayon::ThreadPool {
    let n = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
}

fn not_found(path: &Path, what: &str) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dir_is_nonempty(path: &Path) -> Result<bool> {
    Ok(path.is_dir() && std::fs::read_dir(path).map_err(|e| Error::io(path, e))?.next().is_some())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Writes `count` synthetic frames (first half rounded up bleeding) under `out_dir`.
pub fn cmd_synth(count: usize, out_dir: &Path, seed: u64, size: usize, force: bool) -> Result<()> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("count must be at least 2, got {count}")));
    }
    if dir_is_nonempty(out_dir)? {
        if !force {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not empty; pass --force to overwrite",
                out_dir.display()
            )));
        }
        std::fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    ensure_dir(out_dir)?;
    let seeder = Seeder::new(seed);
    let n_bleeding = count.div_ceil(2);
    let frames = (0..count)
        .map(|i| {
            let f = generate_synthetic_frame(seeder.derive(&format!("synth/{i}")), i < n_bleeding, size)?;
            let image = f.image.with_id(format!("frame_{i:04}"));
            data::AnnotatedFrame::new(image, f.label, f.mask, f.gt_boxes)
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = DatasetLayout::default();
    write_dataset(&frames, out_dir, &layout)?;
    write(&out_dir.join("layout.cfg"), layout.to_text())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Everything `train` needs, parsed from a flat key=value file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub layout: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub val_fraction: f64,
    pub train: TrainConfig,
    pub suppression: SuppressionConfig,
}

impl RunConfig {
    pub const KEYS: [&'static str; 19] = [
        "seed",
        "data_root",
        "layout",
        "out_dir",
        "backbones",
        "activation",
        "epochs",
        "batch_size",
        "learning_rate",
        "val_fraction",
        "lambda_attn",
        "lambda_seg",
        "deterministic",
        "suppression_method",
        "sigma",
        "overlap_threshold",
        "score_floor",
        "stage_count",
        "width_mult",
    ];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let required = |k: &str| {
            kv.get(k).map(PathBuf::from).ok_or_else(|| Error::Config(format!("missing required key {k}")))
        };
        let activation = match kv.get("activation").unwrap_or("relu") {
            "relu" => Activation::Relu,
            "softplus" => Activation::Softplus,
            other => return Err(Error::Config(format!("unknown activation {other:?}"))),
        };
        let default_stages: Option<usize> = kv.get("stage_count").map(|_| kv.parse_or("stage_count", 4)).transpose()?;
        let default_width: f64 = kv.parse_or("width_mult", 0.125)?;
        let backbones = kv
            .get("backbones")
            .unwrap_or("residual18_style,plainconv16_style")
            .split(',')
            .map(|entry| parse_backbone(entry.trim(), default_stages, default_width, activation))
            .collect::<Result<Vec<_>>>()?;
        let d = TrainConfig::default();
        let train = TrainConfig {
            epochs: kv.parse_or("epochs", d.epochs)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            learning_rate: kv.parse_or("learning_rate", d.learning_rate)?,
            seed: kv.parse_or("seed", DEFAULT_SEED)?,
            loss_weights: LossWeights::new(kv.parse_or("lambda_attn", 1.0)?, kv.parse_or("lambda_seg", 1.0)?)?,
            backbones,
            deterministic: kv.parse_or("deterministic", true)?,
        };
        train.validate()?;
        let s = SuppressionConfig::default();
        let suppression = SuppressionConfig {
            method: kv.get("suppression_method").map(str::parse).transpose()?.unwrap_or(s.method),
            sigma: kv.parse_or("sigma", s.sigma)?,
            overlap_threshold: kv.parse_or("overlap_threshold", s.overlap_threshold)?,
            score_floor: kv.parse_or("score_floor", s.score_floor)?,
        };
        suppression.validate()?;
        let val_fraction = kv.parse_or("val_fraction", 0.2)?;
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {val_fraction} not in (0, 1)")));
        }
        Ok(Self {
            data_root: required("data_root")?,
            layout: kv.get("layout").map(PathBuf::from),
            out_dir: required("out_dir")?,
            val_fraction,
            train,
            suppression,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::from_file(path)?)
    }

    /// Every setting spelled out, sufficient to rerun identically.
    pub fn resolved(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let t = &self.train;
        kv.set("seed", t.seed);
        kv.set("data_root", self.data_root.display());
        if let Some(l) = &self.layout {
            kv.set("layout", l.display());
        }
        kv.set("out_dir", self.out_dir.display());
        let backbones: Vec<String> =
            t.backbones.iter().map(|b| format!("{}:{}:{}", b.arch, b.stage_count, b.width_mult)).collect();
        kv.set("backbones", backbones.join(","));
        let act = t.backbones.first().map_or(Activation::Relu, |b| b.activation);
        kv.set("activation", if act == Activation::Softplus { "softplus" } else { "relu" });
        kv.set("epochs", t.epochs);
        kv.set("batch_size", t.batch_size);
        kv.set("learning_rate", t.learning_rate);
        kv.set("val_fraction", self.val_fraction);
        kv.set("lambda_attn", t.loss_weights.lambda_attn);
        kv.set("lambda_seg", t.loss_weights.lambda_seg);
        kv.set("deterministic", t.deterministic);
        kv.set("suppression_method", self.suppression.method);
        kv.set("sigma", self.suppression.sigma);
        kv.set("overlap_threshold", self.suppression.overlap_threshold);
        kv.set("score_floor", self.suppression.score_floor);
        kv
    }

    /// Checks every referenced input path before any work starts.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.data_root.is_dir() {
            return Err(not_found(&self.data_root, "dataset root"));
        }
        if let Some(l) = &self.layout {
            if !l.is_file() {
                return Err(not_found(l, "layout file"));
            }
        }
        Ok(())
    }
}

/// `arch[:stage_count[:width_mult]]`
fn parse_backbone(entry: &str, stages: Option<usize>, width: f64, activation: Activation) -> Result<BackboneSpec> {
    let mut parts = entry.split(':');
    let arch: Architecture = parts.next().unwrap_or_default().parse()?;
    let bad = || Error::Config(format!("bad backbone entry {entry:?}"));
    let stage_count = match parts.next() {
        Some(s) => s.parse().map_err(|_| bad())?,
        None if arch == Architecture::TinyTest => 3,
        None => stages.unwrap_or(4),
    };
    let width_mult = match parts.next() {
        Some(w) => w.parse().map_err(|_| bad())?,
        None if arch == Architecture::TinyTest => 1.0,
        None => width,
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    let spec = BackboneSpec { arch, width_mult, stage_count, activation };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
    pub digests: Vec<String>,
}

/// Trains the ensemble on a fresh split. Checkpoints and the CSV/text
/// artifacts land in `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate_paths()?;
    let layout = match &cfg.layout {
        Some(p) => DatasetLayout::from_file(p)?,
        None => DatasetLayout::default(),
    };
    let frames = load_dataset(&cfg.data_root, &layout)?;
    let divisor = cfg.train.backbones.iter().map(BackboneSpec::divisor).max().unwrap_or(1);
    let frames: Vec<_> = frames.iter().map(|f| f.padded_to(divisor)).collect();
    let split = split_dataset(&frames, cfg.val_fraction, cfg.train.seed)?;

    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("resolved_config.txt"), cfg.resolved().to_text())?;
    let mut split_csv = String::from("id,label,subset\n");
    let mut val_csv = String::from("id,label\n");
    for (subset, list) in [("train", &split.train), ("val", &split.val)] {
        for f in list {
            split_csv.push_str(&format!("{},{},{subset}\n", f.id(), f.label.index()));
        }
    }
    for f in &split.val {
        val_csv.push_str(&format!("{},{}\n", f.id(), f.label.index()));
    }
    write(&cfg.out_dir.join("split.csv"), split_csv)?;
    write(&cfg.out_dir.join("val_labels.csv"), val_csv)?;

    let (models, log) = train(&split, &cfg.train)?;
    write(&cfg.out_dir.join("train_log.csv"), log.to_csv())?;
    let mut checkpoints = Vec::new();
    let mut digests = Vec::new();
    for (k, m) in models.iter().enumerate() {
        let p = cfg.out_dir.join(format!("member_{k}.ckpt"));
        save_checkpoint(m, &p)?;
        checkpoints.push(p);
        digests.push(m.params().digest());
    }
    Ok(TrainOutcome { log, checkpoints, digests })
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub label: ClassLabel,
    pub p_bleeding: f64,
}

pub const PREDICTIONS_HEADER: &str = "id,label,p_bleeding";

/// Ensemble predictions for every image in `image_dirs`; writes
/// `predictions.csv`, `masks/<id>.png` and `overlays/<id>.png` into `out_dir`.
pub fn cmd_predict(checkpoints: &[PathBuf], image_dirs: &[PathBuf], out_dir: &Path, alpha: f64) -> Result<Vec<PredictionRow>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("at least one checkpoint is required".into()));
    }
    let models = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<Model>>>()?;
    let mut paths = Vec::new();
    for dir in image_dirs {
        if !dir.is_dir() {
            return Err(not_found(dir, "image directory"));
        }
        paths.extend(list_images(dir)?);
    }
    let mut ids = BTreeSet::new();
    if let Some(p) = paths.iter().find(|p| !ids.insert(stem(p))) {
        return Err(Error::Dataset(format!("duplicate image id {}", stem(p))));
    }
    let divisor = models.iter().map(|m| m.spec().divisor()).max().unwrap_or(1);
    let explains = models.iter().any(|m| m.decoder().is_some());
    let mask_dir = out_dir.join("masks");
    let overlay_dir = out_dir.join("overlays");
    ensure_dir(out_dir)?;
    if explains {
        ensure_dir(&mask_dir)?;
        ensure_dir(&overlay_dir)?;
    }

    let mut rows = worker_pool().install(|| {
        paths
            .par_iter()
            .map(|path| {
                let image = read_image(path)?;
                let padded = image.padded_to(divisor);
                let (label, probs) = predict(&padded, &models)?;
                if explains {
                    let mask = explain(&padded, &models)?.fit_to(image.height(), image.width());
                    write_mask_png(&mask, &mask_dir.join(format!("{}.png", image.id())))?;
                    let over = overlay(&image, &mask, alpha)?;
                    write_image_png(&over, &overlay_dir.join(format!("{}.png", image.id())))?;
                }
                Ok(PredictionRow { id: image.id().to_string(), label, p_bleeding: probs.bleeding() })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let mut csv = format!("{PREDICTIONS_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.id, r.label.index(), r.p_bleeding));
    }
    write(&out_dir.join("predictions.csv"), csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// softnms
// ---------------------------------------------------------------------------

/// Suppresses every `*.txt` detection file in `input` into `output` under the
/// same name. Returns `(input count, output count)` over all files.
pub fn cmd_softnms(input: &Path, output: &Path, cfg: &SuppressionConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    if !input.is_dir() {
        return Err(not_found(input, "detections directory"));
    }
    let files = data::sorted_files(input, |p| p.extension().is_some_and(|e| e == "txt"))?;
    ensure_dir(output)?;
    let results = worker_pool().install(|| {
        files
            .par_iter()
            .map(|path| {
                let dets = read_detections(path)?;
                let kept = soft_nms(&dets, cfg)?;
                let name = path.file_name().expect("file name");
                write(&output.join(name), format_detections(&kept))?;
                Ok((dets.len(), kept.len()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(results.iter().fold((0, 0), |acc, r| (acc.0 + r.0, acc.1 + r.1)))
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Classify,
    Detect,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Self::Classify),
            "detect" => Ok(Self::Detect),
            other => Err(Error::Config(format!("unknown eval mode {other:?}"))),
        }
    }
}

/// `id → label` from a CSV whose first two columns are `id,label`.
fn read_label_csv(path: &Path) -> Result<BTreeMap<String, ClassLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::FileParse { path: path.to_path_buf(), line: n + 1, msg };
        let mut cols = line.split(',');
        let id = cols.next().unwrap_or_default().trim().to_string();
        let label = cols
            .next()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| err("missing or non-integer label".into()))?;
        let label = ClassLabel::from_index(label).map_err(|e| err(e.to_string()))?;
        if out.insert(id.clone(), label).is_some() {
            return Err(err(format!("duplicate id {id}")));
        }
    }
    Ok(out)
}

fn check_alignment<'a>(pred: impl Iterator<Item = &'a String>, truth: impl Iterator<Item = &'a String>) -> Result<()> {
    let p: BTreeSet<&String> = pred.collect();
    let t: BTreeSet<&String> = truth.collect();
    let offenders: Vec<&str> = p.symmetric_difference(&t).take(5).map(|s| s.as_str()).collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("prediction and ground-truth ids differ: {}", offenders.join(", "))))
    }
}

fn txt_files_by_id(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(not_found(dir, "directory"));
    }
    Ok(data::sorted_files(dir, |p| p.extension().is_some_and(|e| e == "txt"))?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect())
}

/// Reads ground-truth YOLO files in normalized coordinates.
fn read_gt_boxes(path: &Path) -> Result<Vec<(u32, data::BoundingBox)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let wrap = |e: Error| match e {
            Error::Parse { line, msg } => Error::FileParse { path: path.to_path_buf(), line, msg },
            other => other,
        };
        if toks.len() != 5 {
            return Err(wrap(Error::Parse { line: n + 1, msg: format!("expected 5 fields, got {}", toks.len()) }));
        }
        let class = data::parse_class(toks[0], n + 1).map_err(wrap)?;
        out.push((class, data::parse_geometry(&toks[1..], n + 1, 1.0, 1.0).map_err(wrap)?));
    }
    Ok(out)
}

pub fn cmd_eval(pred: &Path, gt: &Path, mode: EvalMode, interp: Interpolation) -> Result<MetricsReport> {
    match mode {
        EvalMode::Classify => {
            let p = read_label_csv(pred)?;
            let t = read_label_csv(gt)?;
            check_alignment(p.keys(), t.keys())?;
            let preds: Vec<ClassLabel> = p.values().copied().collect();
            let truths: Vec<ClassLabel> = t.values().copied().collect();
            Ok(MetricsReport { classification: Some(classification_metrics(&preds, &truths)?), detection: None })
        }
        EvalMode::Detect => {
            let p = txt_files_by_id(pred)?;
            let t = txt_files_by_id(gt)?;
            check_alignment(p.keys(), t.keys())?;
            let images = p
                .iter()
                .map(|(id, path)| {
                    Ok(LabeledImage {
                        id: id.clone(),
                        detections: read_detections(path)?,
                        ground_truth: read_gt_boxes(&t[id])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport { classification: None, detection: Some(detection_metrics(&images, interp)?) })
        }
    }
}

/// Parses the suppression flags shared by the binary and tests.
pub fn suppression_from_flags(method: &str, sigma: f64, nt: f64, floor: f64) -> Result<SuppressionConfig> {
    let method: SuppressionMethod = method.parse()?;
    let cfg = SuppressionConfig { method, sigma, overlap_threshold: nt, score_floor: floor };
    cfg.validate()?;
    Ok(cfg)
}
