//! Backbones, the shared classification head and probability-averaging ensembles.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassLabel, ImageFrame};
use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::rng::Seeder;
use crate::segmentation::DecoderSpec;
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::Tensor;

/// Parameter budget of the `tiny_test` backbone including head and decoder.
pub const TINY_PARAM_BUDGET: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Stem plus two residual basic blocks per stage.
    Residual18Style,
    /// Stacks of plain 3×3 convolutions with max pooling, 2-2-3-3-3 per stage.
    Plainconv16Style,
    /// One convolution per stage, three stages; for fast tests.
    TinyTest,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual18_style" => Ok(Self::Residual18Style),
            "plainconv16_style" => Ok(Self::Plainconv16Style),
            "tiny_test" => Ok(Self::TinyTest),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Residual18Style => "residual18_style",
            Self::Plainconv16Style => "plainconv16_style",
            Self::TinyTest => "tiny_test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub arch: Architecture,
    pub width_mult: f64,
    pub stage_count: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl BackboneSpec {
    pub fn tiny_test() -> Self {
        Self { arch: Architecture::TinyTest, width_mult: 1.0, stage_count: 3, activation: Activation::Relu }
    }

    pub fn residual18(stage_count: usize, width_mult: f64) -> Self {
        Self { arch: Architecture::Residual18Style, width_mult, stage_count, activation: Activation::Relu }
    }

    pub fn plainconv16(stage_count: usize, width_mult: f64) -> Self {
        Self { arch: Architecture::Plainconv16Style, width_mult, stage_count, activation: Activation::Relu }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.stage_count
    }

    /// Output channels of each stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        let scale = |c: f64| ((c * self.width_mult).round() as usize).max(1);
        (1..=self.stage_count)
            .map(|s| match self.arch {
                Architecture::TinyTest => scale(8.0 * f64::from(1 << (s - 1))),
                Architecture::Residual18Style => scale((64.0 * f64::from(1 << (s - 1).min(3))).min(512.0)),
                Architecture::Plainconv16Style => scale([64.0, 128.0, 256.0, 512.0, 512.0][(s - 1).min(4)]),
            })
            .collect()
    }

    fn plain_convs(stage: usize) -> usize {
        if stage <= 2 { 2 } else { 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult.is_finite() && self.width_mult > 0.0) {
            return Err(Error::Config(format!("width_mult {} must be positive", self.width_mult)));
        }
        if self.stage_count < 3 || self.stage_count > 16 {
            return Err(Error::Config(format!("stage_count {} outside 3..=16", self.stage_count)));
        }
        if self.arch == Architecture::TinyTest {
            if self.stage_count != 3 {
                return Err(Error::Config("tiny_test requires stage_count = 3".into()));
            }
            let n: usize = param_shapes(self, Some(&DecoderSpec::for_backbone(self)))
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            if n > TINY_PARAM_BUDGET {
                return Err(Error::Config(format!("tiny_test has {n} parameters, budget {TINY_PARAM_BUDGET}")));
            }
        }
        Ok(())
    }
}

fn conv_shapes(out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize) {
    out.push((format!("{name}.w"), vec![cout, cin, k, k]));
    out.push((format!("{name}.b"), vec![cout]));
}

/// Names and shapes of every parameter for a backbone, its head and optionally a decoder.
pub fn param_shapes(spec: &BackboneSpec, decoder: Option<&DecoderSpec>) -> Vec<(String, Vec<usize>)> {
    let ch = spec.stage_channels();
    let mut out = Vec::new();
    match spec.arch {
        Architecture::TinyTest => {
            let mut cin = 3;
            for (s, &c) in ch.iter().enumerate() {
                conv_shapes(&mut out, format!("enc.s{}.conv", s + 1), cin, c, 3);
                cin = c;
            }
        }
        Architecture::Plainconv16Style => {
            let mut cin = 3;
            for (s, &c) in ch.iter().enumerate() {
                for k in 1..=BackboneSpec::plain_convs(s + 1) {
                    conv_shapes(&mut out, format!("enc.s{}.conv{k}", s + 1), cin, c, 3);
                    cin = c;
                }
            }
        }
        Architecture::Residual18Style => {
            conv_shapes(&mut out, "enc.stem".into(), 3, ch[0], 3);
            let mut cin = ch[0];
            for (s, &c) in ch.iter().enumerate() {
                for b in 1..=2 {
                    let p = format!("enc.s{}.b{b}", s + 1);
                    conv_shapes(&mut out, format!("{p}.conv1"), cin, c, 3);
                    conv_shapes(&mut out, format!("{p}.conv2"), c, c, 3);
                    if cin != c {
                        conv_shapes(&mut out, format!("{p}.proj"), cin, c, 1);
                    }
                    cin = c;
                }
            }
        }
    }
    out.push(("head.w".into(), vec![2, *ch.last().expect("stages")]));
    out.push(("head.b".into(), vec![2]));
    if let Some(dec) = decoder {
        out.extend(dec.param_shapes(spec));
    }
    out
}

/// Encoder stages recorded on `tape`, shallowest first.
pub(crate) fn encode_on(tape: &mut Tape<'_>, spec: &BackboneSpec, input: NodeId) -> Result<Vec<NodeId>> {
    let act = spec.activation;
    let ch = spec.stage_channels();
    let mut stages = Vec::with_capacity(spec.stage_count);
    let mut x = input;
    match spec.arch {
        Architecture::TinyTest => {
            for s in 1..=spec.stage_count {
                let c = tape.conv(x, &format!("enc.s{s}.conv"))?;
                let a = tape.act(c, act);
                x = tape.avg_pool(a)?;
                stages.push(x);
            }
        }
        Architecture::Plainconv16Style => {
            for s in 1..=spec.stage_count {
                for k in 1..=BackboneSpec::plain_convs(s) {
                    let c = tape.conv(x, &format!("enc.s{s}.conv{k}"))?;
                    x = tape.act(c, act);
                }
                x = tape.max_pool(x)?;
                stages.push(x);
            }
        }
        Architecture::Residual18Style => {
            let stem = tape.conv(x, "enc.stem")?;
            x = tape.act(stem, act);
            let mut cin = ch[0];
            for (s, &c) in ch.iter().enumerate() {
                x = tape.avg_pool(x)?;
                for b in 1..=2 {
                    let p = format!("enc.s{}.b{b}", s + 1);
                    let c1 = tape.conv(x, &format!("{p}.conv1"))?;
                    let a1 = tape.act(c1, act);
                    let c2 = tape.conv(a1, &format!("{p}.conv2"))?;
                    let skip = if cin != c { tape.conv(x, &format!("{p}.proj"))? } else { x };
                    let sum = tape.add(c2, skip)?;
                    x = tape.act(sum, act);
                    cin = c;
                }
                stages.push(x);
            }
        }
    }
    Ok(stages)
}

/// Pool, affine map to two logits and softmax, recorded on `tape`.
pub(crate) fn head_on(tape: &mut Tape<'_>, features: NodeId) -> Result<NodeId> {
    let pooled = tape.global_avg_pool(features)?;
    let logits = tape.linear(pooled, "head")?;
    Ok(tape.softmax(logits))
}

/// Encoder feature maps, stage `s` at `H/2^s × W/2^s`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapStack {
    stages: Vec<Tensor>,
}

impl FeatureMapStack {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() < 3 {
            return Err(Error::Shape(format!("need at least 3 stages, got {}", stages.len())));
        }
        for pair in stages.windows(2) {
            let (_, h0, w0) = pair[0].dims3()?;
            let (_, h1, w1) = pair[1].dims3()?;
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::Shape("stage dims must halve from one stage to the next".into()));
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn final_stage(&self) -> &Tensor {
        self.stages.last().expect("nonempty")
    }
}

/// Class probabilities; index 0 is non-bleeding, index 1 bleeding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbVector([f64; 2]);

impl ProbVector {
    pub fn new(non_bleeding: f64, bleeding: f64) -> Result<Self> {
        let p = [non_bleeding, bleeding];
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (p[0] + p[1] - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("{p:?} is not a probability vector")));
        }
        Ok(Self(p))
    }

    pub(crate) fn from_slice_unchecked(p: &[f64]) -> Self {
        Self([p[0], p[1]])
    }

    pub fn non_bleeding(&self) -> f64 {
        self.0[0]
    }

    pub fn bleeding(&self) -> f64 {
        self.0[1]
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.0
    }

    /// The more probable class; exact ties go to bleeding.
    pub fn argmax(&self) -> ClassLabel {
        if self.0[1] >= self.0[0] { ClassLabel::Bleeding } else { ClassLabel::NonBleeding }
    }
}

/// Head weights (`[2, C]`) and bias (`[2]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Training provenance stored alongside parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub member: usize,
}

/// One ensemble member: backbone, head and (optionally) its decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: BackboneSpec,
    decoder: Option<DecoderSpec>,
    params: ParamStore,
    pub meta: TrainingMeta,
}

impl Model {
    /// He-initialized model drawing from substream `init/member{member}` of `seeder`.
    pub fn init(spec: BackboneSpec, decoder: Option<DecoderSpec>, seeder: &Seeder, member: usize) -> Result<Self> {
        spec.validate()?;
        if let Some(d) = &decoder {
            d.validate(&spec)?;
        }
        let mut rng = seeder.stream(&format!("init/member{member}"));
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&spec, decoder.as_ref()) {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name.starts_with("head") || name.starts_with("dec.out") { 1.0 } else { 2.0 };
                init_normal(&shape, (gain / fan_in as f64).sqrt(), &mut rng)
            };
            params.insert(name, t);
        }
        let meta = TrainingMeta { seed: seeder.seed(), epoch: 0, member };
        Ok(Self { spec, decoder, params, meta })
    }

    /// Assembles a model, checking that `params` matches the architecture exactly.
    pub fn from_parts(
        spec: BackboneSpec,
        decoder: Option<DecoderSpec>,
        params: ParamStore,
        meta: TrainingMeta,
    ) -> Result<Self> {
        spec.validate()?;
        if let Some(d) = &decoder {
            d.validate(&spec)?;
        }
        let expected = param_shapes(&spec, decoder.as_ref());
        if expected.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "architecture has {} arrays, parameters have {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::ShapeMismatch(format!("missing array {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { spec, decoder, params, meta })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn decoder(&self) -> Option<&DecoderSpec> {
        self.decoder.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> ClassifierHead {
        ClassifierHead {
            weight: self.params.get("head.w").expect("head.w").clone(),
            bias: self.params.get("head.b").expect("head.b").clone(),
        }
    }

    /// The same model with its segmentation decoder removed.
    pub fn without_decoder(&self) -> Self {
        Self {
            spec: self.spec,
            decoder: None,
            params: self.params.without_prefix("dec."),
            meta: self.meta,
        }
    }

    pub fn check_input(&self, image: &ImageFrame) -> Result<()> {
        let d = self.spec.divisor();
        if !image.height().is_multiple_of(d) || !image.width().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by {d}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Standard classification path: encoder, then head. No attention, no decoder.
    pub fn classify(&self, image: &ImageFrame) -> Result<ProbVector> {
        self.check_input(image)?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(image.pixels().clone());
        let stages = encode_on(&mut tape, &self.spec, x)?;
        let probs = head_on(&mut tape, *stages.last().expect("stages"))?;
        Ok(ProbVector::from_slice_unchecked(tape.value(probs).data()))
    }
}

fn init_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Encoder feature stacks for a batch of equally sized images.
pub fn encode(batch: &[ImageFrame], model: &Model) -> Result<Vec<FeatureMapStack>> {
    if let Some(first) = batch.first() {
        if batch.iter().any(|f| (f.height(), f.width()) != (first.height(), first.width())) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
    }
    batch
        .iter()
        .map(|image| {
            model.check_input(image)?;
            let mut tape = Tape::new(model.params());
            let x = tape.input(image.pixels().clone());
            let stages = encode_on(&mut tape, model.spec(), x)?;
            FeatureMapStack::new(stages.into_iter().map(|id| tape.value(id).clone()).collect())
        })
        .collect()
}

/// Global average pool, affine map to two logits, softmax.
pub fn classify_head(final_stage: &Tensor, head: &ClassifierHead) -> Result<ProbVector> {
    let pooled = ops::global_avg_pool(final_stage)?;
    let logits = ops::linear(&pooled, &head.weight, &head.bias)?;
    Ok(ProbVector::from_slice_unchecked(&ops::softmax(logits.data())))
}

fn ordered_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Elementwise mean of member probabilities.
///
/// Each component is summed in sorted order, so the result does not depend
/// on member order down to the last bit.
pub fn ensemble_average(members: &[ProbVector]) -> Result<ProbVector> {
    if members.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let n = members.len() as f64;
    let p0 = ordered_sum(members.iter().map(|m| m.0[0]).collect()) / n;
    let p1 = ordered_sum(members.iter().map(|m| m.0[1]).collect()) / n;
    Ok(ProbVector([p0, p1]))
}

/// Ensemble label and averaged probabilities for one image.
pub fn predict(image: &ImageFrame, models: &[Model]) -> Result<(ClassLabel, ProbVector)> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("predict needs at least one model".into()));
    }
    let probs = models.iter().map(|m| m.classify(image)).collect::<Result<Vec<_>>>()?;
    let avg = ensemble_average(&probs)?;
    Ok((avg.argmax(), avg))
}
