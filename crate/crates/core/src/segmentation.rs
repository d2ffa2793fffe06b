//! U-Net style decoder producing per-pixel bleeding probabilities.

use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedFrame, ClassLabel, ImageFrame, SegmentationMask};
use crate::encoder::{encode_on, BackboneSpec, FeatureMapStack, Model};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Colour painted over predicted bleeding pixels by [`overlay`].
pub const HIGHLIGHT: [f64; 3] = [0.0, 1.0, 0.0];

/// Decoder wiring.
///
/// Up-stage `k` (1-based) doubles the resolution of its input and lands at
/// encoder level `S - k`; when that level is listed in `skip_stages` the
/// matching encoder stage is concatenated before the 3×3 convolution. The
/// last up-stage lands at full input resolution, where there is no encoder
/// stage to skip from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub skip_stages: Vec<usize>,
    pub up_channels: Vec<usize>,
}

impl DecoderSpec {
    /// Skips from every encoder stage, channel widths mirroring the encoder.
    pub fn for_backbone(spec: &BackboneSpec) -> Self {
        let ch = spec.stage_channels();
        let s = spec.stage_count;
        Self {
            skip_stages: (1..s).collect(),
            up_channels: (1..=s).map(|k| ch[(s - k).max(1) - 1]).collect(),
        }
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let s = spec.stage_count;
        if self.up_channels.len() != s {
            return Err(Error::ShapeMismatch(format!(
                "decoder has {} up-stages, encoder has {s} stages",
                self.up_channels.len()
            )));
        }
        if self.up_channels.contains(&0) {
            return Err(Error::Config("decoder channels must be positive".into()));
        }
        if let Some(bad) = self.skip_stages.iter().find(|&&l| l == 0 || l >= s) {
            return Err(Error::Config(format!("skip stage {bad} outside 1..{s}")));
        }
        Ok(())
    }

    pub(crate) fn param_shapes(&self, spec: &BackboneSpec) -> Vec<(String, Vec<usize>)> {
        let ch = spec.stage_channels();
        let s = spec.stage_count;
        let mut out = Vec::new();
        let mut cin = ch[s - 1];
        for k in 1..=s {
            let level = s - k;
            let skip = if level >= 1 && self.skip_stages.contains(&level) { ch[level - 1] } else { 0 };
            let cout = self.up_channels[k - 1];
            out.push((format!("dec.up{k}.conv.w"), vec![cout, cin + skip, 3, 3]));
            out.push((format!("dec.up{k}.conv.b"), vec![cout]));
            cin = cout;
        }
        out.push(("dec.out.w".into(), vec![1, cin, 1, 1]));
        out.push(("dec.out.b".into(), vec![1]));
        out
    }
}

/// Decoder recorded on `tape`; returns a `[1, H, W]` probability node.
pub(crate) fn decode_on(
    tape: &mut Tape<'_>,
    spec: &BackboneSpec,
    decoder: &DecoderSpec,
    stages: &[NodeId],
) -> Result<NodeId> {
    let s = spec.stage_count;
    if stages.len() != s {
        return Err(Error::ShapeMismatch(format!("decoder expects {s} stages, got {}", stages.len())));
    }
    let mut x = stages[s - 1];
    for k in 1..=s {
        let level = s - k;
        let up = tape.upsample(x)?;
        let joined = if level >= 1 && decoder.skip_stages.contains(&level) {
            tape.concat(up, stages[level - 1])?
        } else {
            up
        };
        let c = tape.conv(joined, &format!("dec.up{k}.conv"))?;
        x = tape.act(c, spec.activation);
    }
    let logits = tape.conv(x, "dec.out")?;
    Ok(tape.sigmoid(logits))
}

fn to_mask(t: &Tensor) -> Result<SegmentationMask> {
    let (_, h, w) = t.dims3()?;
    SegmentationMask::predicted(t.clone().reshape(&[h, w])?)
}

/// Predicted mask from an encoder stack using `model`'s decoder.
pub fn decode(stack: &FeatureMapStack, model: &Model) -> Result<SegmentationMask> {
    let decoder = model
        .decoder()
        .ok_or_else(|| Error::InvalidArgument("model has no decoder".into()))?;
    let mut tape = Tape::new(model.params());
    let ids: Vec<NodeId> = stack.stages().iter().map(|t| tape.input(t.clone())).collect();
    let out = decode_on(&mut tape, model.spec(), decoder, &ids)?;
    to_mask(tape.value(out))
}

/// Predicted mask for one image from a single model.
pub fn segment(image: &ImageFrame, model: &Model) -> Result<SegmentationMask> {
    let decoder = model
        .decoder()
        .ok_or_else(|| Error::InvalidArgument("model has no decoder".into()))?;
    model.check_input(image)?;
    let mut tape = Tape::new(model.params());
    let x = tape.input(image.pixels().clone());
    let stages = encode_on(&mut tape, model.spec(), x)?;
    let out = decode_on(&mut tape, model.spec(), decoder, &stages)?;
    to_mask(tape.value(out))
}

/// Pixelwise mean of every member's predicted mask.
pub fn explain(image: &ImageFrame, models: &[Model]) -> Result<SegmentationMask> {
    let masks = models
        .iter()
        .filter(|m| m.decoder().is_some())
        .map(|m| segment(image, m))
        .collect::<Result<Vec<_>>>()?;
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no ensemble member has a decoder".into()))?;
    let mut acc = Tensor::zeros(first.values().shape());
    for m in &masks {
        acc.add_assign(m.values());
    }
    acc.scale(1.0 / masks.len() as f64);
    SegmentationMask::predicted(acc.map(|v| v.clamp(0.0, 1.0)))
}

/// Segmentation target: the ground-truth mask, or zeros for non-bleeding frames.
pub fn seg_target(frame: &AnnotatedFrame) -> Result<SegmentationMask> {
    match frame.label {
        ClassLabel::NonBleeding => Ok(SegmentationMask::zeros(frame.image.height(), frame.image.width())),
        ClassLabel::Bleeding => frame
            .mask
            .clone()
            .ok_or_else(|| Error::MissingMask(frame.id().into())),
    }
}

/// Blends [`HIGHLIGHT`] into `image` in proportion to `alpha · mask`.
pub fn overlay(image: &ImageFrame, mask: &SegmentationMask, alpha: f64) -> Result<ImageFrame> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in [0, 1]")));
    }
    let (h, w) = (image.height(), image.width());
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let mut px = image.pixels().clone();
    for (c, hi) in HIGHLIGHT.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let k = alpha * mask.at(i, j);
                let v = &mut px.data_mut()[(c * h + i) * w + j];
                *v = ((1.0 - k) * *v + k * hi).clamp(0.0, 1.0);
            }
        }
    }
    ImageFrame::new(image.id(), px)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_frame;
    use crate::encoder::encode;
    use crate::rng::Seeder;

    fn tiny() -> Model {
        let spec = BackboneSpec::tiny_test();
        Model::init(spec, Some(DecoderSpec::for_backbone(&spec)), &Seeder::new(3), 0).unwrap()
    }

    #[test]
    fn decode_shape_and_range() {
        let m = tiny();
        let img = generate_synthetic_frame(1, true, 64).unwrap().image;
        let stacks = encode(&[img.clone(), img.clone()], &m).unwrap();
        let a = decode(&stacks[0], &m).unwrap();
        let b = decode(&stacks[1], &m).unwrap();
        assert_eq!((a.height(), a.width()), (64, 64));
        assert!(a.values().min() >= 0.0 && a.values().max() <= 1.0);
        assert_eq!(a, b);
        assert_eq!(a, segment(&img, &m).unwrap());
    }

    #[test]
    fn decoder_stage_mismatch() {
        let spec = BackboneSpec::tiny_test();
        let mut d = DecoderSpec::for_backbone(&spec);
        d.up_channels.push(4);
        assert!(matches!(d.validate(&spec), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn targets() {
        let clean = generate_synthetic_frame(2, false, 32).unwrap();
        assert!(seg_target(&clean).unwrap().is_all_zero());
        let bleed = generate_synthetic_frame(2, true, 32).unwrap();
        assert_eq!(&seg_target(&bleed).unwrap(), bleed.mask.as_ref().unwrap());
        let mut broken = bleed.clone();
        broken.mask = None;
        assert!(matches!(seg_target(&broken), Err(Error::MissingMask(_))));
    }

    #[test]
    fn overlay_identities() {
        let img = generate_synthetic_frame(4, false, 16).unwrap().image;
        let ones = SegmentationMask::predicted(Tensor::full(&[16, 16], 1.0)).unwrap();
        assert_eq!(overlay(&img, &ones, 0.0).unwrap(), img);
        assert_eq!(overlay(&img, &SegmentationMask::zeros(16, 16), 0.8).unwrap(), img);
        let full = overlay(&img, &ones, 1.0).unwrap();
        assert!((0..16).all(|i| (0..3).all(|c| full.pixels().at3(c, i, i) == HIGHLIGHT[c])));
        assert!(overlay(&img, &SegmentationMask::zeros(8, 8), 0.5).is_err());
    }
}
