//! Attention masks that gate attack steps.
//!
//! A mask has the guided image's shape and values in `[0, 1]`. Generators
//! implement [`MaskGenerator`] and are registered as `mute`, `xunet` and
//! `constant` in [`mask_registry`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ModelGraph, ModelKind};
use crate::registry::Registry;
use crate::tensor::{Rng, Tensor};
use crate::xai::{normalize01_tensor, Explainer, Explanation, IntegratedGradients, LrpEpsilon, XaiSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskProvenance {
    Mute,
    Xunet,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    values: Tensor,
    provenance: MaskProvenance,
}

impl AttentionMask {
    /// Wraps `values`, rejecting anything outside `[0, 1]`.
    pub fn new(values: Tensor, provenance: MaskProvenance) -> Result<Self> {
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self { values, provenance })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuteConfig {
    pub thresh: f64,
    pub seed: u64,
}

impl Default for MuteConfig {
    fn default() -> Self {
        Self { thresh: 0.5, seed: 0 }
    }
}

impl MuteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.thresh) {
            return Err(invalid(format!("mute thresh {} outside [0, 1]", self.thresh)));
        }
        Ok(())
    }
}

/// Mixing weights `(a, b)` for IG and LRP after the conditional swap.
pub fn mute_weights(drawn: f64, thresh: f64) -> (f64, f64) {
    let (a, b) = (drawn, 1.0 - drawn);
    if a < thresh {
        (1.0 - a, 1.0 - b)
    } else {
        (a, b)
    }
}

/// `1 − (b·lrp_n + a·ig_n)` for already normalized attributions.
pub fn mute_mix(lrp_n: &Tensor, ig_n: &Tensor, a: f64, b: f64) -> Result<Tensor> {
    lrp_n.zip_map(ig_n, "mute", |l, i| (1.0 - (b * l + a * i)).clamp(0.0, 1.0))
}

/// Mixes one sample's LRP and IG explanations into a mask, drawing the
/// mixing weight from `rng`.
pub fn mute(lrp: &Explanation, ig: &Explanation, cfg: &MuteConfig, rng: &mut Rng) -> Result<AttentionMask> {
    cfg.validate()?;
    lrp.attribution.expect_shape(&ig.attribution, "mute")?;
    let (a, b) = mute_weights(rng.uniform(), cfg.thresh);
    let mix = mute_mix(
        &normalize01_tensor(&lrp.attribution),
        &normalize01_tensor(&ig.attribution),
        a,
        b,
    )?;
    AttentionMask::new(mix, MaskProvenance::Mute)
}

/// Uniform mask with value `v`.
pub fn constant_mask(shape: &[usize], v: f64) -> Result<AttentionMask> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(format!("constant mask value {v} outside [0, 1]")));
    }
    AttentionMask::new(Tensor::full(shape.to_vec(), v), MaskProvenance::Constant)
}

/// Produces a mask for one image of a dataset.
pub trait MaskGenerator: Send + Sync {
    fn name(&self) -> &'static str;

    /// `sample` identifies the image so that randomized generators can draw
    /// from a per-sample stream independent of evaluation order.
    fn generate(&self, classifier: &ModelGraph, image: &Tensor, sample: usize) -> Result<AttentionMask>;
}

/// Mute mixing of LRP and IG taken at the classifier's predicted class.
#[derive(Debug, Clone)]
pub struct MuteGenerator {
    pub config: MuteConfig,
    pub ig: IntegratedGradients,
    pub lrp: LrpEpsilon,
}

impl MuteGenerator {
    pub fn new(config: MuteConfig, xai: &XaiSettings) -> Result<Self> {
        config.validate()?;
        xai.validate()?;
        Ok(Self {
            config,
            ig: IntegratedGradients::new(xai.ig_steps),
            lrp: LrpEpsilon { epsilon: xai.lrp_epsilon },
        })
    }
}

impl MaskGenerator for MuteGenerator {
    fn name(&self) -> &'static str {
        "mute"
    }

    fn generate(&self, classifier: &ModelGraph, image: &Tensor, sample: usize) -> Result<AttentionMask> {
        let target = classifier.predict(image)?;
        let lrp = self.lrp.explain(classifier, image, target)?;
        let ig = self.ig.explain(classifier, image, target)?;
        let mut rng = Rng::new(self.config.seed).fork(sample as u64);
        mute(&lrp, &ig, &self.config, &mut rng)
    }
}

/// Runs a trained X-UNet on the image. A single-channel mask is repeated
/// across the image's channels.
#[derive(Debug, Clone)]
pub struct XunetGenerator {
    pub model: Arc<ModelGraph>,
}

impl XunetGenerator {
    pub fn new(model: Arc<ModelGraph>) -> Result<Self> {
        if model.kind() != ModelKind::Xunet {
            return Err(invalid(format!("expected an xunet model, got {}", model.kind().as_str())));
        }
        Ok(Self { model })
    }
}

impl MaskGenerator for XunetGenerator {
    fn name(&self) -> &'static str {
        "xunet"
    }

    fn generate(&self, _classifier: &ModelGraph, image: &Tensor, _sample: usize) -> Result<AttentionMask> {
        let out = self.model.forward(&image.unsqueeze0())?;
        let plane = out.into_data();
        let channels = image.shape()[0];
        if plane.len() * channels != image.len() {
            return Err(Error::ShapeMismatch {
                op: "xunet mask",
                left: vec![plane.len()],
                right: image.shape().to_vec(),
            });
        }
        let values: Vec<f64> = (0..channels).flat_map(|_| plane.iter().copied()).collect();
        AttentionMask::new(Tensor::new(image.shape().to_vec(), values)?, MaskProvenance::Xunet)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantGenerator {
    pub value: f64,
}

impl MaskGenerator for ConstantGenerator {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn generate(&self, _classifier: &ModelGraph, image: &Tensor, _sample: usize) -> Result<AttentionMask> {
        constant_mask(image.shape(), self.value)
    }
}

/// Settings consumed by the mask generator factories.
#[derive(Debug, Clone, Default)]
pub struct MaskSettings {
    pub mute: MuteConfig,
    pub xai: XaiSettings,
    pub constant_value: f64,
    pub xunet: Option<Arc<ModelGraph>>,
}

pub type MaskRegistry = Registry<dyn MaskGenerator, MaskSettings>;

pub fn mask_registry() -> MaskRegistry {
    let mut reg = MaskRegistry::new("mask generator");
    reg.register("mute", |s: &MaskSettings| {
        Ok(Box::new(MuteGenerator::new(s.mute, &s.xai)?) as Box<dyn MaskGenerator>)
    });
    reg.register("xunet", |s: &MaskSettings| {
        let model = s
            .xunet
            .clone()
            .ok_or_else(|| invalid("the xunet mask generator needs a trained xunet checkpoint"))?;
        Ok(Box::new(XunetGenerator::new(model)?) as Box<dyn MaskGenerator>)
    });
    reg.register("constant", |s: &MaskSettings| {
        constant_mask(&[1], s.constant_value)?;
        Ok(Box::new(ConstantGenerator {
            value: s.constant_value,
        }) as Box<dyn MaskGenerator>)
    });
    reg
}
