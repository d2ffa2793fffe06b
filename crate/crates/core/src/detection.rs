//! Box geometry and (soft) non-maximum suppression over candidate detections.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{format_geometry, parse_class, parse_geometry, BoundingBox, Detection};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionMethod {
    /// `s ← s · exp(−iou² / σ)`
    Gaussian,
    /// `s ← s · (1 − iou)` when `iou ≥ N_t`
    Linear,
    /// `s ← 0` when `iou ≥ N_t`
    Hard,
}

impl std::str::FromStr for SuppressionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "linear" => Ok(Self::Linear),
            "hard" => Ok(Self::Hard),
            other => Err(Error::Config(format!("unknown suppression method {other:?}"))),
        }
    }
}

impl std::fmt::Display for SuppressionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Linear => "linear",
            Self::Hard => "hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    pub method: SuppressionMethod,
    pub sigma: f64,
    pub overlap_threshold: f64,
    /// Detections whose score drops below this are discarded.
    pub score_floor: f64,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self { method: SuppressionMethod::Gaussian, sigma: 0.5, overlap_threshold: 0.3, score_floor: 0.001 }
    }
}

impl SuppressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma {} must be positive", self.sigma)));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0) {
            return Err(Error::Config(format!("overlap threshold {} not in (0, 1)", self.overlap_threshold)));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(Error::Config(format!("score floor {} not in [0, 1)", self.score_floor)));
        }
        Ok(())
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).min(1.0)
}

struct Candidate {
    det: Detection,
    input_index: usize,
}

/// Higher score first, then larger area, then earlier input.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.det
        .score
        .total_cmp(&a.det.score)
        .then_with(|| b.det.bbox.area().total_cmp(&a.det.bbox.area()))
        .then_with(|| a.input_index.cmp(&b.input_index))
}

fn suppress_class(mut pool: Vec<Candidate>, cfg: &SuppressionConfig, out: &mut Vec<Candidate>) {
    pool.retain(|c| c.det.score >= cfg.score_floor);
    while !pool.is_empty() {
        let best = (0..pool.len())
            .min_by(|&i, &j| rank(&pool[i], &pool[j]))
            .expect("nonempty");
        let m = pool.swap_remove(best);
        for c in &mut pool {
            let o = iou(&m.det.bbox, &c.det.bbox);
            c.det.score *= match cfg.method {
                SuppressionMethod::Gaussian => (-(o * o) / cfg.sigma).exp(),
                SuppressionMethod::Linear if o >= cfg.overlap_threshold => 1.0 - o,
                SuppressionMethod::Hard if o >= cfg.overlap_threshold => 0.0,
                _ => 1.0,
            };
        }
        pool.retain(|c| c.det.score >= cfg.score_floor);
        out.push(m);
    }
}

/// Soft-NMS, each class independently; output sorted by final score descending.
pub fn soft_nms(dets: &[Detection], cfg: &SuppressionConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if let Some(d) = dets.iter().find(|d| !(0.0..=1.0).contains(&d.score)) {
        return Err(Error::InvalidArgument(format!("score {} outside [0, 1]", d.score)));
    }
    let mut by_class: BTreeMap<u32, Vec<Candidate>> = BTreeMap::new();
    for (input_index, det) in dets.iter().enumerate() {
        by_class.entry(det.class_id).or_default().push(Candidate { det: *det, input_index });
    }
    let mut out = Vec::with_capacity(dets.len());
    for pool in by_class.into_values() {
        suppress_class(pool, cfg, &mut out);
    }
    out.sort_by(rank);
    Ok(out.into_iter().map(|c| c.det).collect())
}

/// Classic NMS: overlaps at or above `overlap_threshold` are removed outright.
pub fn hard_nms(dets: &[Detection], overlap_threshold: f64) -> Result<Vec<Detection>> {
    let cfg = SuppressionConfig {
        method: SuppressionMethod::Hard,
        overlap_threshold,
        score_floor: f64::MIN_POSITIVE,
        ..Default::default()
    };
    soft_nms(dets, &cfg)
}

/// Parses lines `class score cx cy w h` with geometry normalized to the unit square.
pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 6 {
            return Err(Error::Parse { line, msg: format!("expected 6 fields, got {}", toks.len()) });
        }
        let class_id = parse_class(toks[0], line)?;
        let score: f64 = toks[1]
            .parse()
            .map_err(|_| Error::Parse { line, msg: format!("non-numeric score {:?}", toks[1]) })?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Parse { line, msg: "score out of range".into() });
        }
        let bbox = parse_geometry(&toks[2..], line, 1.0, 1.0)?;
        out.push(Detection { bbox, score, class_id });
    }
    Ok(out)
}

pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| format!("{} {:.6} {}\n", d.class_id, d.score, format_geometry(&d.bbox, 1.0, 1.0)))
        .collect()
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::FileParse { path: path.to_path_buf(), line, msg },
        other => other,
    })
}
