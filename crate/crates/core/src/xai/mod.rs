//! Pixelwise attribution methods.
//!
//! Every method implements [`Explainer`] and is available by name from
//! [`explainer_registry`]: `gradient`, `ig` and `lrp`.

mod cache;
mod ig;
mod lrp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ModelGraph, Objective};
use crate::registry::Registry;
use crate::tensor::Tensor;

pub use cache::ExplanationCache;
pub use ig::integrated_gradients;
pub use lrp::{lrp_epsilon, lrp_epsilon_trace, LrpTrace};

pub const DEFAULT_IG_STEPS: usize = 64;
pub const DEFAULT_LRP_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XaiMethod {
    Gradient,
    Ig,
    Lrp,
}

impl XaiMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            XaiMethod::Gradient => "gradient",
            XaiMethod::Ig => "ig",
            XaiMethod::Lrp => "lrp",
        }
    }
}

impl fmt::Display for XaiMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for XaiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(XaiMethod::Gradient),
            "ig" => Ok(XaiMethod::Ig),
            "lrp" => Ok(XaiMethod::Lrp),
            other => Err(Error::UnknownName {
                kind: "xai method",
                name: other.to_string(),
                known: "gradient, ig, lrp".into(),
            }),
        }
    }
}

/// Attribution map with the input image's shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub attribution: Tensor,
    pub method: XaiMethod,
    pub target_class: usize,
    /// Riemann steps for IG.
    pub steps: Option<usize>,
    /// Stabilizer for LRP.
    pub epsilon: Option<f64>,
}

impl Explanation {
    pub fn new(attribution: Tensor, method: XaiMethod, target_class: usize) -> Self {
        Self {
            attribution,
            method,
            target_class,
            steps: None,
            epsilon: None,
        }
    }
}

/// Attribution rescaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedExplanation {
    pub values: Tensor,
}

/// Min-max rescaling; a constant map becomes all `0.5`.
pub fn normalize01_tensor(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return t.map(|_| 0.5);
    }
    t.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

pub fn normalize01(e: &Explanation) -> NormalizedExplanation {
    NormalizedExplanation {
        values: normalize01_tensor(&e.attribution),
    }
}

/// Settings consumed by the explainer factories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XaiSettings {
    pub ig_steps: usize,
    pub lrp_epsilon: f64,
    /// Recompute cached explanations after this many lookups (0 = never).
    pub cache_refresh: usize,
}

impl Default for XaiSettings {
    fn default() -> Self {
        Self {
            ig_steps: DEFAULT_IG_STEPS,
            lrp_epsilon: DEFAULT_LRP_EPSILON,
            cache_refresh: 0,
        }
    }
}

impl XaiSettings {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(invalid("ig_steps must be at least 1"));
        }
        if !(self.lrp_epsilon > 0.0) {
            return Err(invalid("lrp_epsilon must be positive"));
        }
        Ok(())
    }
}

/// A pixelwise attribution method.
pub trait Explainer: Send + Sync {
    fn method(&self) -> XaiMethod;

    /// Explains `model`'s `target` logit at the single image `image`.
    fn explain(&self, model: &ModelGraph, image: &Tensor, target: usize) -> Result<Explanation>;
}

/// Plain input gradient of the target logit. Diagnostic only.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientSaliency;

impl Explainer for GradientSaliency {
    fn method(&self) -> XaiMethod {
        XaiMethod::Gradient
    }

    fn explain(&self, model: &ModelGraph, image: &Tensor, target: usize) -> Result<Explanation> {
        check_target(model, target)?;
        let (_, grad) = model.input_gradient(&image.unsqueeze0(), Objective::TargetLogit(&[target]))?;
        let attribution = grad.reshape(image.shape().to_vec())?;
        Ok(Explanation::new(attribution, XaiMethod::Gradient, target))
    }
}

/// Integrated gradients along the straight path from `baseline`
/// (all zeros when `None`) with a right-point Riemann sum.
#[derive(Debug, Clone)]
pub struct IntegratedGradients {
    pub steps: usize,
    pub baseline: Option<Tensor>,
}

impl IntegratedGradients {
    pub fn new(steps: usize) -> Self {
        Self { steps, baseline: None }
    }
}

impl Explainer for IntegratedGradients {
    fn method(&self) -> XaiMethod {
        XaiMethod::Ig
    }

    fn explain(&self, model: &ModelGraph, image: &Tensor, target: usize) -> Result<Explanation> {
        let zeros;
        let baseline = match &self.baseline {
            Some(b) => b,
            None => {
                zeros = image.zeros_like();
                &zeros
            }
        };
        integrated_gradients(model, image, target, baseline, self.steps)
    }
}

/// Layer-wise relevance propagation with the epsilon rule.
#[derive(Debug, Clone, Copy)]
pub struct LrpEpsilon {
    pub epsilon: f64,
}

impl Explainer for LrpEpsilon {
    fn method(&self) -> XaiMethod {
        XaiMethod::Lrp
    }

    fn explain(&self, model: &ModelGraph, image: &Tensor, target: usize) -> Result<Explanation> {
        lrp_epsilon(model, image, target, self.epsilon)
    }
}

pub(crate) fn check_target(model: &ModelGraph, target: usize) -> Result<()> {
    match model.classes() {
        Some(k) if target < k => Ok(()),
        Some(k) => Err(invalid(format!("target class {target} out of range for {k} classes"))),
        None => Err(invalid("attributions need a classifier, not a mask model")),
    }
}

pub type ExplainerRegistry = Registry<dyn Explainer, XaiSettings>;

/// Registry holding the built-in explainers.
pub fn explainer_registry() -> ExplainerRegistry {
    let mut reg = ExplainerRegistry::new("explainer");
    reg.register("gradient", |_| Ok(Box::new(GradientSaliency) as Box<dyn Explainer>));
    reg.register("ig", |s: &XaiSettings| {
        s.validate()?;
        Ok(Box::new(IntegratedGradients::new(s.ig_steps)) as Box<dyn Explainer>)
    });
    reg.register("lrp", |s: &XaiSettings| {
        s.validate()?;
        Ok(Box::new(LrpEpsilon { epsilon: s.lrp_epsilon }) as Box<dyn Explainer>)
    });
    reg
}

pub fn make_explainer(method: XaiMethod, settings: &XaiSettings) -> Result<Box<dyn Explainer>> {
    explainer_registry().create(method.as_str(), settings)
}
