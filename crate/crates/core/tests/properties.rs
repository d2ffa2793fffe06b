mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use vistanet::attention::{apply_attention, attention_classify, downsample_mask};
use vistanet::data::{
    format_yolo_boxes, generate_synthetic_frame, mask_to_boxes, mask_to_boxes_with_min_area, parse_yolo_boxes,
    split_dataset, AnnotatedFrame, BoundingBox, ClassLabel, Detection, SegmentationMask,
};
use vistanet::detection::{hard_nms, iou, soft_nms, SuppressionConfig, SuppressionMethod};
use vistanet::encoder::{classify_head, encode, ensemble_average, BackboneSpec, ClassifierHead, Model, ProbVector};
use vistanet::evaluation::{
    average_iou, average_precision, classification_metrics, coco_thresholds, detection_metrics, match_detections,
    ImageDetections, Interpolation, LabeledImage,
};
use vistanet::rng::Seeder;
use vistanet::segmentation::{decode, seg_target, DecoderSpec};
use vistanet::tensor::Tensor;
use vistanet::training::{combined_loss, LossWeights};
use vistanet::ImageFrame;

use common::*;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

fn arb_box(extent: f64) -> impl Strategy<Value = BoundingBox> {
    (0.0..extent, 0.0..extent, 0.01..extent, 0.01..extent).prop_map(move |(x, y, w, h)| {
        let x0 = x.min(extent - 0.01);
        let y0 = y.min(extent - 0.01);
        BoundingBox::new(x0, y0, (x0 + w).min(extent), (y0 + h).min(extent)).unwrap()
    })
}

fn arb_detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((arb_box(10.0), 0.0..=1.0f64, 0u32..3), 0..=max)
        .prop_map(|v| v.into_iter().map(|(bbox, score, class_id)| Detection { bbox, score, class_id }).collect())
}

fn arb_config() -> impl Strategy<Value = SuppressionConfig> {
    (0usize..3, 0.05..2.0f64, 0.05..0.95f64, 0.0..0.3f64).prop_map(|(m, sigma, nt, floor)| SuppressionConfig {
        method: [SuppressionMethod::Gaussian, SuppressionMethod::Linear, SuppressionMethod::Hard][m],
        sigma,
        overlap_threshold: nt,
        score_floor: floor,
    })
}

fn arb_mask(max_side: usize) -> impl Strategy<Value = SegmentationMask> {
    (1..=max_side, 1..=max_side)
        .prop_flat_map(|(h, w)| (Just((h, w)), prop::collection::vec(prop::bool::weighted(0.35), h * w)))
        .prop_map(|((h, w), bits)| {
            SegmentationMask::ground_truth(tensor(&[h, w], bits.into_iter().map(|b| f64::from(u8::from(b))).collect()))
                .unwrap()
        })
}

fn arb_prob() -> impl Strategy<Value = ProbVector> {
    (0.0..=1.0f64).prop_map(|b| ProbVector::new(1.0 - b, b).unwrap())
}

fn labels(bits: &[bool]) -> Vec<ClassLabel> {
    bits.iter().map(|&b| if b { ClassLabel::Bleeding } else { ClassLabel::NonBleeding }).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    // ----- data model -----

    #[test]
    fn yolo_round_trip(boxes in prop::collection::vec((0u32..5, arb_box(1.0)), 0..8), w in 8usize..400, h in 8usize..400) {
        let scaled: Vec<(u32, BoundingBox)> = boxes
            .iter()
            .map(|(c, b)| (*c, BoundingBox::new(b.x_min * w as f64, b.y_min * h as f64, b.x_max * w as f64, b.y_max * h as f64).unwrap()))
            .collect();
        let back = parse_yolo_boxes(&format_yolo_boxes(&scaled, w, h), w, h).unwrap();
        prop_assert_eq!(back.len(), scaled.len());
        for ((c0, a), (c1, b)) in scaled.iter().zip(&back) {
            prop_assert_eq!(c0, c1);
            // Six decimals of normalized geometry, scaled back to pixels.
            let tol = 1e-6 * w.max(h) as f64;
            for (x, y) in [(a.x_min, b.x_min), (a.y_min, b.y_min), (a.x_max, b.x_max), (a.y_max, b.y_max)] {
                prop_assert!((x - y).abs() <= tol, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn yolo_round_trip_normalized(boxes in prop::collection::vec((0u32..5, arb_box(1.0)), 0..8)) {
        let back = parse_yolo_boxes(&format_yolo_boxes(&boxes, 1, 1), 1, 1).unwrap();
        for ((_, a), (_, b)) in boxes.iter().zip(&back) {
            for (x, y) in [(a.x_min, b.x_min), (a.y_min, b.y_min), (a.x_max, b.x_max), (a.y_max, b.y_max)] {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn mask_to_boxes_covers_every_large_component(mask in arb_mask(14), min_area in 1usize..6) {
        let boxes = mask_to_boxes_with_min_area(&mask, 0.5, min_area).unwrap();
        let (h, w) = (mask.height(), mask.width());
        // Brute-force component labelling by repeated relaxation.
        let mut label: Vec<usize> = (0..h * w).collect();
        let on = |k: usize| mask.values().data()[k] >= 0.5;
        loop {
            let mut changed = false;
            for k in 0..h * w {
                if !on(k) { continue; }
                let (i, j) = (k / w, k % w);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 { continue; }
                        let q = ni as usize * w + nj as usize;
                        if on(q) && label[q] < label[k] {
                            label[k] = label[q];
                            changed = true;
                        }
                    }
                }
            }
            if !changed { break; }
        }
        let mut expected = Vec::new();
        for root in 0..h * w {
            let members: Vec<usize> = (0..h * w).filter(|&k| on(k) && label[k] == root).collect();
            if members.len() < min_area || members.is_empty() { continue; }
            let rows = members.iter().map(|k| k / w);
            let cols = members.iter().map(|k| k % w);
            let b = BoundingBox::new(
                cols.clone().min().unwrap() as f64, rows.clone().min().unwrap() as f64,
                cols.max().unwrap() as f64 + 1.0, rows.max().unwrap() as f64 + 1.0,
            ).unwrap();
            for k in &members {
                let (i, j) = ((k / w) as f64, (k % w) as f64);
                prop_assert!(boxes.iter().any(|b| b.x_min <= j && j < b.x_max && b.y_min <= i && i < b.y_max));
            }
            expected.push(b);
        }
        prop_assert_eq!(boxes.len(), expected.len());
        for b in &expected {
            prop_assert!(boxes.contains(b), "missing {:?}", b);
        }
        prop_assert!(boxes.windows(2).all(|p| p[0].area() >= p[1].area()));
    }

    #[test]
    fn split_is_a_partition(n_bleed in 2usize..30, n_clean in 2usize..30, f in 0.05..0.95f64, seed: u64) {
        let frames: Vec<AnnotatedFrame> = (0..n_bleed + n_clean)
            .map(|i| {
                let image = ImageFrame::new(format!("f{i:03}"), Tensor::zeros(&[3, 8, 8])).unwrap();
                if i < n_bleed {
                    let mut m = Tensor::zeros(&[8, 8]);
                    m.data_mut()[0] = 1.0;
                    AnnotatedFrame::new(image, ClassLabel::Bleeding, Some(SegmentationMask::ground_truth(m).unwrap()), vec![]).unwrap()
                } else {
                    AnnotatedFrame::new(image, ClassLabel::NonBleeding, None, vec![]).unwrap()
                }
            })
            .collect();
        let split = split_dataset(&frames, f, seed).unwrap();
        let mut ids: Vec<&str> = split.train.iter().chain(&split.val).map(|f| f.id()).collect();
        prop_assert_eq!(ids.len(), frames.len());
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), frames.len());
        for label in [ClassLabel::Bleeding, ClassLabel::NonBleeding] {
            prop_assert!(split.train.iter().any(|f| f.label == label));
            prop_assert!(split.val.iter().any(|f| f.label == label));
        }
    }

    // ----- encoder ensemble -----

    #[test]
    fn ensemble_is_permutation_invariant_and_idempotent(members in prop::collection::vec(arb_prob(), 1..10), seed: u64) {
        let avg = ensemble_average(&members).unwrap();
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng(seed));
        prop_assert_eq!(ensemble_average(&shuffled).unwrap(), avg);
        let copies = vec![members[0]; members.len()];
        let same = ensemble_average(&copies).unwrap();
        for c in 0..2 {
            prop_assert!((same.as_array()[c] - members[0].as_array()[c]).abs() <= 1e-12);
            let oracle = members.iter().map(|m| m.as_array()[c]).sum::<f64>() / members.len() as f64;
            prop_assert!((avg.as_array()[c] - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn head_outputs_are_probabilities(c in 1usize..6, h in 1usize..4, w in 1usize..4, seed: u64) {
        let mut r = rng(seed);
        use rand::Rng;
        let feats = tensor(&[c, h, w], (0..c * h * w).map(|_| r.random_range(0.0..5.0)).collect());
        let head = ClassifierHead {
            weight: tensor(&[2, c], (0..2 * c).map(|_| r.random_range(-2.0..2.0)).collect()),
            bias: tensor(&[2], vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]),
        };
        let p = classify_head(&feats, &head).unwrap();
        prop_assert!((p.non_bleeding() + p.bleeding() - 1.0).abs() <= 1e-12);
        prop_assert!(p.non_bleeding() >= 0.0 && p.bleeding() >= 0.0);
    }

    // ----- attention -----

    #[test]
    fn downsampling_preserves_mass(h in 1usize..6, w in 1usize..6, bh in 1usize..5, bw in 1usize..5, seed: u64) {
        use rand::Rng;
        let mut r = rng(seed);
        let data: Vec<f64> = (0..h * bh * w * bw).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
        let mask = SegmentationMask::ground_truth(tensor(&[h * bh, w * bw], data.clone())).unwrap();
        let low = downsample_mask(&mask, h, w).unwrap();
        prop_assert!(low.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mass = low.sum() * (bh * bw) as f64;
        prop_assert!((mass - data.iter().sum::<f64>()).abs() <= 1e-9);
    }

    #[test]
    fn attention_inside_mask_matches_head(c in 1usize..4, h in 2usize..6, w in 2usize..6, seed: u64) {
        use rand::Rng;
        let mut r = rng(seed);
        let cover: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.5)).collect();
        let feats = tensor(&[c, h, w], (0..c * h * w).map(|k| if cover[k % (h * w)] { r.random_range(0.0..4.0) } else { 0.0 }).collect());
        let low = tensor(&[h, w], cover.iter().map(|&b| f64::from(u8::from(b))).collect());
        let head = ClassifierHead {
            weight: tensor(&[2, c], (0..2 * c).map(|_| r.random_range(-1.0..1.0)).collect()),
            bias: tensor(&[2], vec![0.1, -0.2]),
        };
        let weighted = apply_attention(&feats, &low, ClassLabel::Bleeding).unwrap();
        let a = attention_classify(&weighted, &head).unwrap();
        let b = classify_head(&feats, &head).unwrap();
        prop_assert!((a.bleeding() - b.bleeding()).abs() <= 1e-6);
        let identity = apply_attention(&feats, &low, ClassLabel::NonBleeding).unwrap();
        prop_assert_eq!(attention_classify(&identity, &head).unwrap(), b);
    }

    // ----- training loss -----

    #[test]
    fn combined_loss_matches_scalar_reference(
        std_b in 0.0..=1.0f64, attn_b in 0.0..=1.0f64, la in 0.0..3.0f64, ls in 0.0..3.0f64,
        bleeding: bool, seed in 0u64..1000, with_attn: bool,
    ) {
        use rand::Rng;
        let frame = generate_synthetic_frame(seed, bleeding, 16).unwrap();
        let mut r = rng(seed);
        let pred = SegmentationMask::predicted(tensor(&[16, 16], (0..256).map(|_| r.random_range(0.0..=1.0)).collect())).unwrap();
        let s = ProbVector::new(1.0 - std_b, std_b).unwrap();
        let a = ProbVector::new(1.0 - attn_b, attn_b).unwrap();
        let w = LossWeights::new(la, ls).unwrap();
        let got = combined_loss(&s, with_attn.then_some(&a), &pred, &frame, &w).unwrap();

        let clamp = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
        let y = usize::from(bleeding);
        let mut want = -clamp(s.as_array()[y]).ln();
        if with_attn {
            want += la * -clamp(a.as_array()[y]).ln();
        }
        let mut bce = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let t = if bleeding { frame.mask.as_ref().unwrap().at(i, j) } else { 0.0 };
                let p = clamp(pred.at(i, j));
                bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            }
        }
        want += ls * bce / 256.0;
        prop_assert!(got >= 0.0);
        prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
    }

    // ----- detection post-processing -----

    #[test]
    fn suppression_never_inflates(dets in arb_detections(10), cfg in arb_config()) {
        let out = soft_nms(&dets, &cfg).unwrap();
        prop_assert!(out.len() <= dets.len());
        for o in &out {
            prop_assert!(dets.iter().any(|d| d.bbox == o.bbox && d.class_id == o.class_id && o.score <= d.score));
        }
        prop_assert!(out.windows(2).all(|p| p[0].score >= p[1].score));
    }

    #[test]
    fn suppression_ignores_input_order(dets in arb_detections(10), cfg in arb_config(), seed: u64) {
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut rng(seed));
        let a = soft_nms(&dets, &cfg).unwrap();
        let b = soft_nms(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.len(), b.len());
        // Exact duplicates are interchangeable; compare as multisets in output order.
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.score == y.score && x.bbox.area() == y.bbox.area(), "{:?} vs {:?}", x, y);
        }
        let key = |v: &[Detection]| {
            let mut k: Vec<String> = v.iter().map(|d| format!("{:?}", d)).collect();
            k.sort();
            k
        };
        prop_assert_eq!(key(&a), key(&b));
    }

    #[test]
    fn classes_are_suppressed_independently(dets in arb_detections(12), cfg in arb_config()) {
        let joint = soft_nms(&dets, &cfg).unwrap();
        let mut merged = Vec::new();
        for c in 0..3 {
            let part: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).copied().collect();
            merged.extend(soft_nms(&part, &cfg).unwrap());
        }
        prop_assert_eq!(joint.len(), merged.len());
        for d in &joint {
            prop_assert!(merged.contains(d));
        }
    }

    #[test]
    fn tiny_sigma_drops_overlaps(seed: u64) {
        use rand::Rng;
        let mut r = rng(seed);
        // Integer boxes: any nonzero overlap is at least 1/31 IoU.
        let dets: Vec<Detection> = (0..r.random_range(0..10))
            .map(|_| Detection { bbox: grid_box(&mut r), score: r.random_range(0.01..=1.0), class_id: r.random_range(0..2) })
            .collect();
        let cfg = SuppressionConfig { method: SuppressionMethod::Gaussian, sigma: 1e-6, ..Default::default() };
        let out = soft_nms(&dets, &cfg).unwrap();
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert_eq!(iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
        // Every input either survives untouched or overlaps a kept box of its class.
        for d in &dets {
            let kept = out.iter().any(|o| o == d);
            let shadowed = out.iter().any(|o| o.class_id == d.class_id && iou(&o.bbox, &d.bbox) > 0.0 && o != d);
            prop_assert!(kept || shadowed || d.score < cfg.score_floor);
        }
    }

    #[test]
    fn hard_nms_is_soft_nms_hard(dets in arb_detections(10), nt in 0.05..0.95f64) {
        let cfg = SuppressionConfig { method: SuppressionMethod::Hard, overlap_threshold: nt, score_floor: f64::MIN_POSITIVE, ..Default::default() };
        let positive: Vec<Detection> = dets.into_iter().filter(|d| d.score > 0.0).collect();
        prop_assert_eq!(hard_nms(&positive, nt).unwrap(), soft_nms(&positive, &cfg).unwrap());
    }

    // ----- evaluation -----

    #[test]
    fn classification_matches_counting(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let preds = labels(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
        let truths = labels(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
        let m = classification_metrics(&preds, &truths).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for (p, t) in &bits {
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        let n = bits.len() as f64;
        prop_assert!((m.accuracy - (tp + tn) / n).abs() < 1e-12);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        prop_assert!((m.precision - precision).abs() < 1e-12);
        prop_assert!((m.recall - recall).abs() < 1e-12);
        // Confusion-matrix identity: accuracy = (recall·P + TN-rate·N) / (P + N).
        let (pos, neg) = (tp + fn_, tn + fp);
        let tnr = if neg > 0.0 { tn / neg } else { 0.0 };
        prop_assert!((m.accuracy - (recall * pos + tnr * neg) / n).abs() < 1e-12);
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.macro_precision, m.macro_recall, m.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn matching_agrees_with_oracle(dets in arb_detections(8), gts in prop::collection::vec(arb_box(10.0), 0..6), thr in 0.05..0.95f64) {
        let got = match_detections(&dets, &gts, thr).unwrap();
        let want = match_oracle(&dets, &gts, thr);
        prop_assert_eq!(got.iter().map(|m| m.1).collect::<Vec<_>>(), want);
    }

    #[test]
    fn ap_is_monotone_in_threshold(seed: u64) {
        use rand::Rng;
        let mut r = rng(seed);
        let corpus: Vec<ImageDetections> = (0..r.random_range(1..4))
            .map(|i| ImageDetections {
                id: format!("{i}"),
                detections: random_detections(&mut r, 6, 1),
                ground_truth: (0..r.random_range(1..4)).map(|_| grid_box(&mut r)).collect(),
            })
            .collect();
        for interp in [Interpolation::AllPoints, Interpolation::Coco101] {
            let aps: Vec<f64> = coco_thresholds().iter().map(|&t| average_precision(&corpus, t, interp).unwrap()).collect();
            prop_assert!(aps.windows(2).all(|p| p[0] >= p[1]), "{:?}", aps);
            prop_assert!(aps.iter().all(|a| (0.0..=1.0).contains(a)));
        }
        let manual: Vec<f64> = corpus.iter().flat_map(|im| {
            match_detections(&im.detections, &im.ground_truth, 0.5).unwrap().into_iter()
                .filter_map(|(d, g)| g.map(|g| iou_oracle(&im.detections[d].bbox, &im.ground_truth[g])))
                .collect::<Vec<_>>()
        }).collect();
        let want = if manual.is_empty() { 0.0 } else { manual.iter().sum::<f64>() / manual.len() as f64 };
        prop_assert!((average_iou(&corpus).unwrap() - want).abs() < 1e-12);
        let labeled: Vec<LabeledImage> = corpus.iter().map(|im| LabeledImage {
            id: im.id.clone(),
            detections: im.detections.clone(),
            ground_truth: im.ground_truth.iter().map(|b| (0, *b)).collect(),
        }).collect();
        let m = detection_metrics(&labeled, Interpolation::AllPoints).unwrap();
        prop_assert!(m.map50 >= m.map50_95);
        prop_assert_eq!(m.ap, m.map50);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encode_halves_per_stage(stages in 3usize..=5, mult_h in 1usize..=3, mult_w in 1usize..=3, seed: u64) {
        let spec = BackboneSpec::residual18(stages, 0.0625);
        let model = Model::init(spec, None, &Seeder::new(seed), 0).unwrap();
        let d = 1 << stages;
        let (h, w) = (d * mult_h, d * mult_w);
        let image = ImageFrame::new("x", Tensor::full(&[3, h, w], 0.3)).unwrap();
        let stack = encode(&[image], &model).unwrap();
        prop_assert_eq!(stack[0].stages().len(), stages);
        for (s, t) in stack[0].stages().iter().enumerate() {
            let (_, th, tw) = t.dims3().unwrap();
            prop_assert_eq!((th, tw), (h >> (s + 1), w >> (s + 1)));
        }
        prop_assert!(stack[0].final_stage().min() >= 0.0);
    }

    #[test]
    fn decode_is_a_valid_mask(seed: u64, side in 1usize..=3, bleeding: bool) {
        let spec = BackboneSpec::tiny_test();
        let model = Model::init(spec, Some(DecoderSpec::for_backbone(&spec)), &Seeder::new(seed), 0).unwrap();
        let frame = generate_synthetic_frame(seed, bleeding, 16 * side).unwrap();
        let stack = encode(std::slice::from_ref(&frame.image), &model).unwrap();
        let mask = decode(&stack[0], &model).unwrap();
        prop_assert_eq!((mask.height(), mask.width()), (16 * side, 16 * side));
        prop_assert!(mask.values().data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(decode(&stack[0], &model).unwrap(), mask);
        let target = seg_target(&frame).unwrap();
        prop_assert_eq!(target.is_all_zero(), !bleeding);
        prop_assert_eq!(frame.mask.as_ref().is_some_and(|m| !m.is_all_zero()), bleeding);
    }

    #[test]
    fn synthetic_boxes_are_tight(seed: u64) {
        let frame = generate_synthetic_frame(seed, true, 64).unwrap();
        let mask = frame.mask.as_ref().unwrap();
        prop_assert!(mask.sum() > 0.0);
        prop_assert!((1..=3).contains(&frame.gt_boxes.len()));
        // Blobs are separated, so components of the mask are exactly the blobs.
        let mut from_mask = mask_to_boxes_with_min_area(mask, 0.5, 1).unwrap();
        let mut gt = frame.gt_boxes.clone();
        let key = |b: &BoundingBox| (b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64);
        from_mask.sort_by_key(key);
        gt.sort_by_key(key);
        prop_assert_eq!(from_mask, gt);
        let clean = generate_synthetic_frame(seed, false, 64).unwrap();
        prop_assert!(clean.mask.as_ref().is_none_or(|m| m.is_all_zero()) && clean.gt_boxes.is_empty());
        prop_assert!(mask_to_boxes(&SegmentationMask::zeros(8, 8), 0.5).unwrap().is_empty());
    }
}
