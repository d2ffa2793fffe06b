//! Training-only path that weights final-stage features by the ground-truth mask.
//!
//! Inference never reaches this module. Every entry point bumps a per-thread
//! counter so tests can confirm that.

use std::cell::Cell;

use crate::data::{ClassLabel, SegmentationMask};
use crate::encoder::{classify_head, ClassifierHead, ProbVector};
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

thread_local! {
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

fn touch() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of calls into this module made by the current thread.
pub fn invocation_count() -> usize {
    CALLS.with(Cell::get)
}

/// Non-overlapping block average of `mask` down to `h × w`.
pub fn downsample_mask(mask: &SegmentationMask, h: usize, w: usize) -> Result<Tensor> {
    touch();
    let (mh, mw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::Shape(format!("mask {mh}x{mw} is not an integer multiple of {h}x{w}")));
    }
    let (bh, bw) = (mh / h, mw / w);
    let area = (bh * bw) as f64;
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for di in 0..bh {
                for dj in 0..bw {
                    s += mask.at(i * bh + di, j * bw + dj);
                }
            }
            out.data_mut()[i * w + j] = s / area;
        }
    }
    Ok(out)
}

/// Bleeding frames: features scaled by the low-resolution mask; otherwise unchanged.
pub fn apply_attention(features: &Tensor, lowres_mask: &Tensor, label: ClassLabel) -> Result<Tensor> {
    touch();
    let (_, h, w) = features.dims3()?;
    if lowres_mask.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match features {:?}",
            lowres_mask.shape(),
            features.shape()
        )));
    }
    match label {
        ClassLabel::Bleeding => ops::mul_spatial(features, lowres_mask),
        ClassLabel::NonBleeding => Ok(features.clone()),
    }
}

/// Head applied to attention-weighted features; same contract and weights as the standard path.
pub fn attention_classify(weighted: &Tensor, head: &ClassifierHead) -> Result<ProbVector> {
    touch();
    classify_head(weighted, head)
}

/// Differentiable attention path on `tape`, sharing the `head` parameters.
pub(crate) fn attend_on(
    tape: &mut Tape<'_>,
    features: NodeId,
    mask: &SegmentationMask,
    label: ClassLabel,
) -> Result<NodeId> {
    touch();
    let (_, h, w) = tape.value(features).dims3()?;
    let weighted = match label {
        ClassLabel::Bleeding => {
            let low = downsample_mask(mask, h, w)?;
            tape.mul_spatial(features, low)?
        }
        ClassLabel::NonBleeding => features,
    };
    crate::encoder::head_on(tape, weighted)
}
