//! Frames with their masks and boxes, plus the disk formats for them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::rng::Seeder;
use crate::tensor::Tensor;

/// Smallest stage count any backbone uses; synthetic frames must be divisible by `2^MIN_STAGES`.
pub const MIN_STAGES: usize = 3;

/// Default minimum connected-component area (pixels) kept by [`mask_to_boxes`].
pub const DEFAULT_MIN_AREA: usize = 4;

/// An RGB image stored channel-major as `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    id: String,
    pixels: Tensor,
}

impl ImageFrame {
    pub fn new(id: impl Into<String>, pixels: Tensor) -> Result<Self> {
        let (c, h, w) = pixels.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {c}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::Shape(format!("image {h}x{w} is smaller than 8x8")));
        }
        if !pixels.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { id: id.into(), pixels })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Zero-pads bottom and right edges up to the next multiple of `multiple`.
    pub fn padded_to(&self, multiple: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let mut out = Tensor::zeros(&[3, ph, pw]);
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out.data_mut()[(c * ph + i) * pw + j] = self.pixels.at3(c, i, j);
                }
            }
        }
        Self { id: self.id.clone(), pixels: out }
    }

    pub fn from_rgb8(id: impl Into<String>, img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor::zeros(&[3, h, w]);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                t.data_mut()[(c * h + y as usize) * w + x as usize] = f64::from(p[c]) / 255.0;
            }
        }
        Self::new(id, t)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.pixels.at3(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    GroundTruth,
    Predicted,
}

/// Per-pixel bleeding indicator (`[H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    values: Tensor,
    kind: MaskKind,
}

impl SegmentationMask {
    /// Binary `{0, 1}` mask.
    pub fn ground_truth(values: Tensor) -> Result<Self> {
        values.dims2()?;
        if !values.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::InvalidArgument("ground-truth mask must be binary".into()));
        }
        Ok(Self { values, kind: MaskKind::GroundTruth })
    }

    /// Probability mask with values in `[0, 1]`.
    pub fn predicted(values: Tensor) -> Result<Self> {
        values.dims2()?;
        if !values.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("predicted mask must lie in [0, 1]".into()));
        }
        Ok(Self { values, kind: MaskKind::Predicted })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { values: Tensor::zeros(&[height, width]), kind: MaskKind::GroundTruth }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.at2(i, j)
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }

    /// Top-left `height × width` window, zero-filled where it extends past the mask.
    pub fn fit_to(&self, height: usize, width: usize) -> Self {
        let mut out = Tensor::zeros(&[height, width]);
        for i in 0..self.height().min(height) {
            for j in 0..self.width().min(width) {
                out.data_mut()[i * width + j] = self.at(i, j);
            }
        }
        Self { values: out, kind: self.kind }
    }
}

/// Axis-aligned box in pixel units, half-open: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bounding box"));
        }
        if x_min < 0.0 || y_min < 0.0 || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn fits(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_id: u32,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64, class_id: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")));
        }
        Ok(Self { bbox, score, class_id })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    NonBleeding = 0,
    Bleeding = 1,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(ClassLabel::NonBleeding),
            1 => Ok(ClassLabel::Bleeding),
            _ => Err(Error::InvalidArgument(format!("class label {i} is not 0 or 1"))),
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::NonBleeding => "non_bleeding",
            ClassLabel::Bleeding => "bleeding",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub image: ImageFrame,
    pub label: ClassLabel,
    pub mask: Option<SegmentationMask>,
    pub gt_boxes: Vec<BoundingBox>,
}

impl AnnotatedFrame {
    /// Checks the label/mask/box invariants.
    pub fn new(
        image: ImageFrame,
        label: ClassLabel,
        mask: Option<SegmentationMask>,
        gt_boxes: Vec<BoundingBox>,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            if (m.height(), m.width()) != (image.height(), image.width()) {
                return Err(Error::Shape(format!(
                    "mask {}x{} does not match image {}x{}",
                    m.height(),
                    m.width(),
                    image.height(),
                    image.width()
                )));
            }
        }
        match label {
            ClassLabel::Bleeding => match &mask {
                None => return Err(Error::MissingMask(PathBuf::from(image.id()))),
                Some(m) if m.is_all_zero() => return Err(Error::EmptyMask(PathBuf::from(image.id()))),
                _ => {}
            },
            ClassLabel::NonBleeding => {
                if mask.as_ref().is_some_and(|m| !m.is_all_zero()) {
                    return Err(Error::Dataset(format!("non-bleeding frame {} has a nonzero mask", image.id())));
                }
                if !gt_boxes.is_empty() {
                    return Err(Error::Dataset(format!("non-bleeding frame {} has boxes", image.id())));
                }
            }
        }
        let (w, h) = (image.width() as f64, image.height() as f64);
        if let Some(b) = gt_boxes.iter().find(|b| !b.fits(w, h)) {
            return Err(Error::Dataset(format!("box {b:?} exceeds image {}", image.id())));
        }
        Ok(Self { image, label, mask, gt_boxes })
    }

    pub fn id(&self) -> &str {
        self.image.id()
    }

    /// Zero-pads image and mask at the bottom and right to a multiple of `multiple`.
    pub fn padded_to(&self, multiple: usize) -> Self {
        let image = self.image.padded_to(multiple);
        let mask = self.mask.as_ref().map(|m| m.fit_to(image.height(), image.width()));
        Self { image, label: self.label, mask, gt_boxes: self.gt_boxes.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedFrame>,
    pub val: Vec<AnnotatedFrame>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// YOLO text
// ---------------------------------------------------------------------------

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("non-numeric token {tok:?}") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite token {tok:?}") });
    }
    Ok(v)
}

pub(crate) fn parse_class(tok: &str, line: usize) -> Result<u32> {
    tok.parse()
        .map_err(|_| Error::Parse { line, msg: format!("class id {tok:?} is not a nonnegative integer") })
}

/// Converts normalized `cx cy w h` tokens into a clamped pixel box.
pub(crate) fn parse_geometry(toks: &[&str], line: usize, width: f64, height: f64) -> Result<BoundingBox> {
    let mut v = [0.0; 4];
    for (slot, tok) in v.iter_mut().zip(toks) {
        *slot = parse_number(tok, line)?;
        if !(0.0..=1.0).contains(slot) {
            return Err(Error::Parse { line, msg: "coordinate out of range".into() });
        }
    }
    let [cx, cy, bw, bh] = v;
    let x_min = ((cx - bw / 2.0) * width).clamp(0.0, width);
    let x_max = ((cx + bw / 2.0) * width).clamp(0.0, width);
    let y_min = ((cy - bh / 2.0) * height).clamp(0.0, height);
    let y_max = ((cy + bh / 2.0) * height).clamp(0.0, height);
    BoundingBox::new(x_min, y_min, x_max, y_max)
        .map_err(|_| Error::Parse { line, msg: "degenerate box".into() })
}

pub(crate) fn format_geometry(b: &BoundingBox, width: f64, height: f64) -> String {
    format!(
        "{:.6} {:.6} {:.6} {:.6}",
        (b.x_min + b.x_max) / 2.0 / width,
        (b.y_min + b.y_max) / 2.0 / height,
        b.width() / width,
        b.height() / height
    )
}

/// Parses YOLO lines `class cx cy w h` into pixel boxes for a `width × height` image.
pub fn parse_yolo_boxes(text: &str, width: usize, height: usize) -> Result<Vec<(u32, BoundingBox)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 5 {
            return Err(Error::Parse { line, msg: format!("expected 5 fields, got {}", toks.len()) });
        }
        let class = parse_class(toks[0], line)?;
        out.push((class, parse_geometry(&toks[1..], line, width as f64, height as f64)?));
    }
    Ok(out)
}

/// Inverse of [`parse_yolo_boxes`], one LF-terminated line per box.
pub fn format_yolo_boxes(boxes: &[(u32, BoundingBox)], width: usize, height: usize) -> String {
    boxes
        .iter()
        .map(|(c, b)| format!("{c} {}\n", format_geometry(b, width as f64, height as f64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset layout and ingestion
// ---------------------------------------------------------------------------

/// Where each role lives under a dataset root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub images_bleeding: PathBuf,
    pub masks_bleeding: PathBuf,
    pub boxes_bleeding: PathBuf,
    pub images_nonbleeding: PathBuf,
    /// Images and masks are zero-padded to a multiple of this.
    pub pad_multiple: usize,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            images_bleeding: "bleeding/images".into(),
            masks_bleeding: "bleeding/masks".into(),
            boxes_bleeding: "bleeding/boxes".into(),
            images_nonbleeding: "non_bleeding/images".into(),
            pad_multiple: 1 << MIN_STAGES,
        }
    }
}

impl DatasetLayout {
    const KEYS: [&'static str; 5] =
        ["images_bleeding", "masks_bleeding", "boxes_bleeding", "images_nonbleeding", "pad_multiple"];

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&Self::KEYS)?;
        let d = Self::default();
        let path = |k: &str, def: PathBuf| kv.get(k).map(PathBuf::from).unwrap_or(def);
        let layout = Self {
            images_bleeding: path("images_bleeding", d.images_bleeding),
            masks_bleeding: path("masks_bleeding", d.masks_bleeding),
            boxes_bleeding: path("boxes_bleeding", d.boxes_bleeding),
            images_nonbleeding: path("images_nonbleeding", d.images_nonbleeding),
            pad_multiple: kv.parse_or("pad_multiple", d.pad_multiple)?,
        };
        if layout.pad_multiple == 0 {
            return Err(Error::Config("pad_multiple must be positive".into()));
        }
        Ok(layout)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::from_file(path)?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "images_bleeding={}\nmasks_bleeding={}\nboxes_bleeding={}\nimages_nonbleeding={}\npad_multiple={}\n",
            self.images_bleeding.display(),
            self.masks_bleeding.display(),
            self.boxes_bleeding.display(),
            self.images_nonbleeding.display(),
            self.pad_multiple
        )
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

pub(crate) fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Files in `dir` accepted by `keep`, sorted by path.
pub(crate) fn sorted_files(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && keep(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Image files (PNG/JPEG) directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_files(dir, is_image)
}

pub fn read_image(path: &Path) -> Result<ImageFrame> {
    let img = image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    ImageFrame::from_rgb8(stem(path), &img.to_rgb8())
}

/// Reads a single-channel mask and binarizes it at 0.5.
pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableImage { path: path.to_path_buf(), msg: e.to_string() })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if f64::from(p[0]) / 255.0 >= 0.5 { 1.0 } else { 0.0 }).collect();
    SegmentationMask::ground_truth(Tensor::from_vec(&[h, w], data)?)
}

pub fn write_image_png(frame: &ImageFrame, path: &Path) -> Result<()> {
    frame
        .to_rgb8()
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Writes `round(value · 255)` as a single-channel PNG.
pub fn write_mask_png(mask: &SegmentationMask, path: &Path) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(mask.at(y as usize, x as usize) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Loads every frame under `root`, bleeding images first, each group in sorted-path order.
pub fn load_dataset(root: &Path, layout: &DatasetLayout) -> Result<Vec<AnnotatedFrame>> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let bleeding = list_images(&root.join(&layout.images_bleeding))?;
    let nonbleeding = list_images(&root.join(&layout.images_nonbleeding))?;

    let mut seen = BTreeSet::new();
    for p in bleeding.iter().chain(&nonbleeding) {
        if !seen.insert(stem(p)) {
            return Err(Error::Dataset(format!("duplicate image id {}", stem(p))));
        }
    }

    let box_dir = root.join(&layout.boxes_bleeding);
    let mut box_files = BTreeMap::new();
    if box_dir.is_dir() {
        let bleeding_ids: BTreeSet<String> = bleeding.iter().map(|p| stem(p)).collect();
        for path in sorted_files(&box_dir, |p| p.extension().is_some_and(|e| e == "txt"))? {
            if !bleeding_ids.contains(&stem(&path)) {
                return Err(Error::OrphanBoxFile(path));
            }
            box_files.insert(stem(&path), path);
        }
    }

    let m = layout.pad_multiple;
    let mut frames = Vec::with_capacity(bleeding.len() + nonbleeding.len());
    for path in &bleeding {
        let image = read_image(path)?;
        let (h, w) = (image.height(), image.width());
        let mask_path = root.join(&layout.masks_bleeding).join(format!("{}.png", stem(path)));
        if !mask_path.is_file() {
            return Err(Error::MissingMask(path.clone()));
        }
        let mask = read_mask(&mask_path)?;
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::Shape(format!("mask {} does not match its image size", mask_path.display())));
        }
        if mask.is_all_zero() {
            return Err(Error::EmptyMask(path.clone()));
        }
        let gt_boxes = match box_files.get(&stem(path)) {
            None => Vec::new(),
            Some(bp) => {
                let text = std::fs::read_to_string(bp).map_err(|e| Error::io(bp, e))?;
                parse_yolo_boxes(&text, w, h)
                    .map_err(|e| match e {
                        Error::Parse { line, msg } => Error::FileParse { path: bp.clone(), line, msg },
                        other => other,
                    })?
                    .into_iter()
                    .map(|(_, b)| b)
                    .collect()
            }
        };
        let image = image.padded_to(m);
        let mask = mask.fit_to(image.height(), image.width());
        frames.push(AnnotatedFrame::new(image, ClassLabel::Bleeding, Some(mask), gt_boxes)?);
    }
    for path in &nonbleeding {
        let image = read_image(path)?.padded_to(m);
        let mask = SegmentationMask::zeros(image.height(), image.width());
        frames.push(AnnotatedFrame::new(image, ClassLabel::NonBleeding, Some(mask), Vec::new())?);
    }
    Ok(frames)
}

/// Writes frames in `layout` under `root` plus a `labels.csv` of `id,label`.
pub fn write_dataset(frames: &[AnnotatedFrame], root: &Path, layout: &DatasetLayout) -> Result<()> {
    for dir in [&layout.images_bleeding, &layout.masks_bleeding, &layout.boxes_bleeding, &layout.images_nonbleeding] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut labels = String::from("id,label\n");
    for f in frames {
        let id = f.id();
        labels.push_str(&format!("{id},{}\n", f.label.index()));
        match f.label {
            ClassLabel::Bleeding => {
                write_image_png(&f.image, &root.join(&layout.images_bleeding).join(format!("{id}.png")))?;
                let mask = f.mask.as_ref().ok_or_else(|| Error::MissingMask(PathBuf::from(id)))?;
                write_mask_png(mask, &root.join(&layout.masks_bleeding).join(format!("{id}.png")))?;
                let boxes: Vec<(u32, BoundingBox)> = f.gt_boxes.iter().map(|b| (0, *b)).collect();
                let text = format_yolo_boxes(&boxes, f.image.width(), f.image.height());
                let p = root.join(&layout.boxes_bleeding).join(format!("{id}.txt"));
                std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            ClassLabel::NonBleeding => {
                write_image_png(&f.image, &root.join(&layout.images_nonbleeding).join(format!("{id}.png")))?;
            }
        }
    }
    let p = root.join("labels.csv");
    std::fs::write(&p, labels).map_err(|e| Error::io(&p, e))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Stratified train/validation split, reproducible from `(frames order, seed)`.
pub fn split_dataset(frames: &[AnnotatedFrame], val_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 frames to split".into()));
    }
    let mut rng = Seeder::new(seed).stream("split");
    let mut in_val = vec![false; frames.len()];
    for label in [ClassLabel::NonBleeding, ClassLabel::Bleeding] {
        let mut members: Vec<usize> = (0..frames.len()).filter(|&i| frames[i].label == label).collect();
        if members.len() < 2 {
            return Err(Error::Dataset(format!("class {label} has {} members, need at least 2", members.len())));
        }
        let n_val = ((members.len() as f64 * val_fraction).round() as usize).clamp(1, members.len() - 1);
        members.shuffle(&mut rng);
        for &i in &members[..n_val] {
            in_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (f, v) in frames.iter().zip(in_val) {
        if v { val.push(f.clone()) } else { train.push(f.clone()) }
    }
    Ok(DatasetSplit { train, val, seed })
}

// ---------------------------------------------------------------------------
// Synthetic frames
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, i: usize, j: usize) -> bool {
        let dx = (j as f64 + 0.5 - self.cx) / self.rx;
        let dy = (i as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Tight half-open pixel box of the ellipse support.
    fn support_box(&self, size: usize) -> Option<(usize, usize, usize, usize)> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        for i in 0..size {
            for j in 0..size {
                if self.contains(i, j) {
                    r0 = r0.min(i);
                    c0 = c0.min(j);
                    r1 = r1.max(i + 1);
                    c1 = c1.max(j + 1);
                }
            }
        }
        (r0 != usize::MAX).then_some((r0, c0, r1, c1))
    }
}

/// Deterministic synthetic frame of `size × size` pixels.
///
/// Non-bleeding frames are a textured mucosa-like background with a few dark
/// non-red spots. Bleeding frames add 1 to 3 red ellipses whose supports are
/// separated by at least two pixels, so each blob is its own 8-connected
/// component and its tight box is exactly the matching `gt_box`.
pub fn generate_synthetic_frame(seed: u64, bleeding: bool, size: usize) -> Result<AnnotatedFrame> {
    let div = 1 << MIN_STAGES;
    if size == 0 || !size.is_multiple_of(div) {
        return Err(Error::InvalidArgument(format!("size {size} is not divisible by {div}")));
    }
    let mut rng = Seeder::new(seed).stream("synthetic-frame");
    let s = size as f64;
    let base = [rng.random_range(0.70..0.85), rng.random_range(0.42..0.56), rng.random_range(0.30..0.42)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let mut pixels = Tensor::zeros(&[3, size, size]);
    for i in 0..size {
        for j in 0..size {
            let tex: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * j as f64 + fy * i as f64 + ph).sin()).sum();
            for (c, b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.03..0.03);
                pixels.data_mut()[(c * size + i) * size + j] = (b + tex + noise).clamp(0.0, 1.0);
            }
        }
    }

    let spots = rng.random_range(0..=2);
    for _ in 0..spots {
        let e = Ellipse {
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            rx: rng.random_range(2.0..s * 0.1 + 2.5),
            ry: rng.random_range(2.0..s * 0.1 + 2.5),
        };
        let shade = rng.random_range(0.55..0.75);
        for i in 0..size {
            for j in 0..size {
                if e.contains(i, j) {
                    for c in 0..3 {
                        pixels.data_mut()[(c * size + i) * size + j] *= shade;
                    }
                }
            }
        }
    }

    let mut mask = Tensor::zeros(&[size, size]);
    let mut boxes = Vec::new();
    if bleeding {
        let want = rng.random_range(1..=3);
        let max_r = (s * 0.14).max(3.5);
        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        for _ in 0..200 {
            if placed.len() == want {
                break;
            }
            let rx = rng.random_range(3.0..max_r);
            let ry = rng.random_range(3.0..max_r);
            let mut centre = |r: f64| if s - r - 1.0 > r + 1.0 { rng.random_range(r + 1.0..s - r - 1.0) } else { s / 2.0 };
            let (cx, cy) = (centre(rx), centre(ry));
            let e = Ellipse { cx, cy, rx, ry };
            let Some(b) = e.support_box(size) else { continue };
            let clear = placed
                .iter()
                .all(|p| b.0 >= p.2 + 2 || p.0 >= b.2 + 2 || b.1 >= p.3 + 2 || p.1 >= b.3 + 2);
            if !clear {
                continue;
            }
            let color: [f64; 3] = [rng.random_range(0.55..0.78), rng.random_range(0.02..0.12), rng.random_range(0.04..0.14)];
            for i in b.0..b.2 {
                for j in b.1..b.3 {
                    if e.contains(i, j) {
                        mask.data_mut()[i * size + j] = 1.0;
                        for (c, v) in color.iter().enumerate() {
                            let noise = rng.random_range(-0.04..0.04);
                            pixels.data_mut()[(c * size + i) * size + j] = (v + noise).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            placed.push(b);
            boxes.push(BoundingBox::new(b.1 as f64, b.0 as f64, b.3 as f64, b.2 as f64)?);
        }
    }

    let label = if bleeding { ClassLabel::Bleeding } else { ClassLabel::NonBleeding };
    let id = format!("synth_{seed:016x}");
    AnnotatedFrame::new(
        ImageFrame::new(id, pixels)?,
        label,
        Some(SegmentationMask::ground_truth(mask)?),
        boxes,
    )
}

// ---------------------------------------------------------------------------
// Mask → boxes
// ---------------------------------------------------------------------------

/// One tight box per 8-connected above-threshold component of at least
/// [`DEFAULT_MIN_AREA`] pixels, largest first.
pub fn mask_to_boxes(mask: &SegmentationMask, threshold: f64) -> Result<Vec<BoundingBox>> {
    mask_to_boxes_with_min_area(mask, threshold, DEFAULT_MIN_AREA)
}

pub fn mask_to_boxes_with_min_area(
    mask: &SegmentationMask,
    threshold: f64,
    min_area: usize,
) -> Result<Vec<BoundingBox>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} not in (0, 1)")));
    }
    let (h, w) = (mask.height(), mask.width());
    let on: Vec<bool> = mask.values().data().iter().map(|&v| v >= threshold).collect();
    let mut seen = vec![false; h * w];
    let mut found: Vec<(usize, BoundingBox)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut c0, mut r1, mut c1, mut area) = (h, w, 0, 0, 0);
        while let Some(p) = queue.pop_front() {
            let (i, j) = (p / w, p % w);
            area += 1;
            r0 = r0.min(i);
            c0 = c0.min(j);
            r1 = r1.max(i + 1);
            c1 = c1.max(j + 1);
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let q = ni as usize * w + nj as usize;
                    if on[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        if area >= min_area {
            found.push((area, BoundingBox::new(c0 as f64, r0 as f64, c1 as f64, r1 as f64)?));
        }
    }
    found.sort_by(|a, b| b.1.area().total_cmp(&a.1.area()));
    Ok(found.into_iter().map(|(_, b)| b).collect())
}
