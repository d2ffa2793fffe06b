//! Independent reference implementations and random generators shared by the
//! integration tests. Nothing here calls the library code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistanet::data::{BoundingBox, Detection};
use vistanet::detection::{SuppressionConfig, SuppressionMethod};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BoundingBox {
    let x0 = rng.random_range(0.0..extent * 0.8);
    let y0 = rng.random_range(0.0..extent * 0.8);
    let w = rng.random_range(extent * 0.02..extent * 0.4);
    let h = rng.random_range(extent * 0.02..extent * 0.4);
    BoundingBox::new(x0, y0, (x0 + w).min(extent), (y0 + h).min(extent)).unwrap()
}

/// Boxes on a coarse grid so that exact duplicates and shared edges occur.
pub fn grid_box(rng: &mut impl Rng) -> BoundingBox {
    let x0 = f64::from(rng.random_range(0..6u32));
    let y0 = f64::from(rng.random_range(0..6u32));
    let w = f64::from(rng.random_range(1..5u32));
    let h = f64::from(rng.random_range(1..5u32));
    BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap()
}

pub fn random_detections(rng: &mut impl Rng, max_n: usize, classes: u32) -> Vec<Detection> {
    let n = rng.random_range(0..=max_n);
    (0..n)
        .map(|_| {
            let bbox = if rng.random_bool(0.5) { grid_box(rng) } else { random_box(rng, 8.0) };
            // Coarse scores make exact ties common.
            let score = if rng.random_bool(0.3) {
                f64::from(rng.random_range(1..=4u32)) / 4.0
            } else {
                rng.random_range(0.0..=1.0)
            };
            Detection { bbox, score, class_id: rng.random_range(0..classes) }
        })
        .collect()
}

/// IoU from explicit corner arithmetic.
pub fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let left = if a.x_min > b.x_min { a.x_min } else { b.x_min };
    let right = if a.x_max < b.x_max { a.x_max } else { b.x_max };
    let top = if a.y_min > b.y_min { a.y_min } else { b.y_min };
    let bottom = if a.y_max < b.y_max { a.y_max } else { b.y_max };
    if right <= left || bottom <= top {
        return 0.0;
    }
    let inter = (right - left) * (bottom - top);
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    inter / union
}

/// True when `a` should be picked before `b`: higher score, then larger area, then earlier input.
fn before(a: (f64, f64, usize), b: (f64, f64, usize)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    a.2 < b.2
}

/// Step-by-step Soft-NMS written directly from the textbook loop.
pub fn soft_nms_reference(dets: &[Detection], cfg: &SuppressionConfig) -> Vec<Detection> {
    let mut classes: Vec<u32> = dets.iter().map(|d| d.class_id).collect();
    classes.sort();
    classes.dedup();
    // (box, score, class, input index)
    let mut emitted: Vec<(BoundingBox, f64, u32, usize)> = Vec::new();
    for class in classes {
        let mut remaining: Vec<(BoundingBox, f64, usize)> = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            if d.class_id == class && d.score >= cfg.score_floor {
                remaining.push((d.bbox, d.score, i));
            }
        }
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (b, s, i) = remaining[k];
                let (bb, bs, bi) = remaining[best];
                let area = (b.x_max - b.x_min) * (b.y_max - b.y_min);
                let barea = (bb.x_max - bb.x_min) * (bb.y_max - bb.y_min);
                if before((s, area, i), (bs, barea, bi)) {
                    best = k;
                }
            }
            let m = remaining.remove(best);
            emitted.push((m.0, m.1, class, m.2));
            let mut next = Vec::new();
            for (b, s, i) in remaining {
                let o = iou_oracle(&m.0, &b);
                let decayed = match cfg.method {
                    SuppressionMethod::Gaussian => s * (-(o * o) / cfg.sigma).exp(),
                    SuppressionMethod::Linear => {
                        if o >= cfg.overlap_threshold {
                            s * (1.0 - o)
                        } else {
                            s
                        }
                    }
                    SuppressionMethod::Hard => {
                        if o >= cfg.overlap_threshold {
                            0.0
                        } else {
                            s
                        }
                    }
                };
                if decayed >= cfg.score_floor {
                    next.push((b, decayed, i));
                }
            }
            remaining = next;
        }
    }
    // Insertion sort by final score, area, input order.
    let mut out: Vec<(BoundingBox, f64, u32, usize)> = Vec::new();
    for e in emitted {
        let key = |x: &(BoundingBox, f64, u32, usize)| (x.1, (x.0.x_max - x.0.x_min) * (x.0.y_max - x.0.y_min), x.3);
        let pos = out.iter().position(|o| before(key(&e), key(o))).unwrap_or(out.len());
        out.insert(pos, e);
    }
    out.into_iter().map(|(bbox, score, class_id, _)| Detection { bbox, score, class_id }).collect()
}

/// Greedy matcher: detections by score descending (ties by index), each
/// takes the unmatched ground truth with the highest IoU if it clears `thr`.
pub fn match_oracle(dets: &[Detection], gts: &[BoundingBox], thr: f64) -> Vec<Option<usize>> {
    let mut result = vec![None; dets.len()];
    let mut done = vec![false; dets.len()];
    let mut used = vec![false; gts.len()];
    for _ in 0..dets.len() {
        let mut pick: Option<usize> = None;
        for d in 0..dets.len() {
            if done[d] {
                continue;
            }
            match pick {
                None => pick = Some(d),
                Some(p) if dets[d].score > dets[p].score => pick = Some(d),
                _ => {}
            }
        }
        let d = pick.unwrap();
        done[d] = true;
        let mut best_g: Option<usize> = None;
        let mut best_o = -1.0;
        for g in 0..gts.len() {
            if used[g] {
                continue;
            }
            let o = iou_oracle(&dets[d].bbox, &gts[g]);
            if o > best_o {
                best_o = o;
                best_g = Some(g);
            }
        }
        if let Some(g) = best_g {
            if best_o >= thr {
                used[g] = true;
                result[d] = Some(g);
            }
        }
    }
    result
}

/// Enumerates every score cutoff: the top-k pooled detections are rematched
/// from scratch per image, giving one (precision, recall) point per k.
pub fn pr_points_oracle(images: &[(Vec<Detection>, Vec<BoundingBox>)], thr: f64) -> Vec<(f64, f64)> {
    let n_gt: usize = images.iter().map(|im| im.1.len()).sum();
    let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (d, det) in im.0.iter().enumerate() {
            pooled.push((det.score, i, d));
        }
    }
    // Stable selection sort, descending score, ties by (image, detection).
    let mut ordered = Vec::new();
    while !pooled.is_empty() {
        let mut best = 0;
        for k in 1..pooled.len() {
            if pooled[k].0 > pooled[best].0 {
                best = k;
            }
        }
        ordered.push(pooled.remove(best));
    }
    let mut points = Vec::new();
    for k in 1..=ordered.len() {
        let top = &ordered[..k];
        let mut tp = 0usize;
        for (i, im) in images.iter().enumerate() {
            let chosen: Vec<usize> = top.iter().filter(|t| t.1 == i).map(|t| t.2).collect();
            let sub: Vec<Detection> = chosen.iter().map(|&d| im.0[d]).collect();
            tp += match_oracle(&sub, &im.1, thr).iter().filter(|m| m.is_some()).count();
        }
        points.push((tp as f64 / k as f64, tp as f64 / n_gt as f64));
    }
    points
}

/// All-points AP: sum over recall increments of the best precision at or beyond that recall.
pub fn ap_all_points_oracle(points: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(_, r)) in points.iter().enumerate() {
        if r > prev_recall {
            let best = points[k..].iter().map(|p| p.0).fold(0.0, f64::max);
            ap += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    ap
}

pub fn ap_coco101_oracle(points: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for t in 0..=100 {
        let r = t as f64 / 100.0;
        let mut best = 0.0;
        for &(p, rec) in points {
            if rec >= r && p > best {
                best = p;
            }
        }
        total += best;
    }
    total / 101.0
}
