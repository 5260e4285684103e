//! Explanation-based safety monitor and the attack metric suite.

mod bench;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mask::AttentionMask;
use crate::nn::ModelGraph;
use crate::tensor::{Rng, Tensor};
use crate::xai::{make_explainer, normalize01_tensor, Explainer, Explanation, XaiMethod, XaiSettings};

pub use bench::{run_benchmark, BenchmarkConfig, BenchmarkInputs, TimingMode};
pub use report::{BenchmarkReport, MethodRow};

/// Denominator floor of the cosine similarity.
pub const COSINE_FLOOR: f64 = 1e-12;
/// Amplitude of the uniform noise used to calibrate the monitor.
pub const CALIBRATION_NOISE: f64 = 1.0 / 255.0;
pub const MIN_CALIBRATION_SAMPLES: usize = 20;

/// Cosine similarity in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct StealthScore(pub f64);

/// `(a·b) / max(‖a‖‖b‖, 1e-12)`; two all-zero maps count as identical.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<StealthScore> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm_l2(), b.norm_l2());
    if na == 0.0 && nb == 0.0 {
        return Ok(StealthScore(1.0));
    }
    Ok(StealthScore((dot / (na * nb).max(COSINE_FLOOR)).clamp(-1.0, 1.0)))
}

pub fn explanation_similarity(a: &Explanation, b: &Explanation) -> Result<StealthScore> {
    cosine_similarity(&a.attribution, &b.attribution)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Calibration {
    /// Use `tau` as given.
    Fixed,
    /// Set `tau` to this percentile of clean-vs-renoised similarities.
    CleanPercentile { percentile: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorConfig {
    pub xai_method: XaiMethod,
    pub tau: f64,
    pub calibration: Calibration,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            xai_method: XaiMethod::Ig,
            tau: 0.5,
            calibration: Calibration::CleanPercentile { percentile: 5.0 },
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid(format!("monitor tau {} outside [0, 1]", self.tau)));
        }
        if let Calibration::CleanPercentile { percentile } = self.calibration {
            if !(0.0..=100.0).contains(&percentile) {
                return Err(invalid(format!("percentile {percentile} outside [0, 100]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    pub score: f64,
}

/// Flags inputs whose explanation drifts away from the clean reference.
pub struct Monitor {
    explainer: Box<dyn Explainer>,
    tau: f64,
}

impl Monitor {
    pub fn new(cfg: &MonitorConfig, xai: &XaiSettings) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            explainer: make_explainer(cfg.xai_method, xai)?,
            tau: cfg.tau,
        })
    }

    pub fn with_explainer(explainer: Box<dyn Explainer>, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(invalid(format!("monitor tau {tau} outside [0, 1]")));
        }
        Ok(Self { explainer, tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(invalid(format!("monitor tau {tau} outside [0, 1]")));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn explainer(&self) -> &dyn Explainer {
        self.explainer.as_ref()
    }

    /// Explanation of `image` at the model's own predicted class.
    pub fn explain(&self, model: &ModelGraph, image: &Tensor) -> Result<Explanation> {
        let target = model.predict(image)?;
        self.explainer.explain(model, image, target)
    }

    pub fn judge(&self, score: f64) -> Verdict {
        Verdict {
            pass: score >= self.tau,
            score,
        }
    }

    pub fn verdict(&self, model: &ModelGraph, clean: &Tensor, candidate: &Tensor) -> Result<Verdict> {
        clean.expect_shape(candidate, "monitor verdict")?;
        let a = self.explain(model, clean)?;
        let b = self.explain(model, candidate)?;
        Ok(self.judge(explanation_similarity(&a, &b)?.0))
    }

    /// Similarities between each clean image and a copy re-noised with
    /// uniform noise of amplitude 1/255 (one RNG stream per image).
    pub fn clean_similarities(&self, model: &ModelGraph, images: &Tensor, seed: u64) -> Result<Vec<f64>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let base = Rng::new(seed);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let image = images.index_axis0(i)?;
                let mut rng = base.fork(i as u64);
                let noisy: Vec<f64> = image
                    .data()
                    .iter()
                    .map(|v| (v + rng.uniform_range(-CALIBRATION_NOISE, CALIBRATION_NOISE)).clamp(0.0, 1.0))
                    .collect();
                let noisy = Tensor::new(image.shape().to_vec(), noisy)?;
                let a = self.explain(model, &image)?;
                let b = self.explain(model, &noisy)?;
                Ok(explanation_similarity(&a, &b)?.0)
            })
            .collect()
    }
}

/// Monitor verdict for a candidate input against its clean reference.
pub fn monitor_verdict(
    model: &ModelGraph,
    clean: &Tensor,
    candidate: &Tensor,
    cfg: &MonitorConfig,
    xai: &XaiSettings,
) -> Result<Verdict> {
    Monitor::new(cfg, xai)?.verdict(model, clean, candidate)
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Threshold at the `p`-th percentile of clean-vs-renoised similarities.
pub fn calibrate_threshold(monitor: &Monitor, model: &ModelGraph, clean: &Tensor, p: f64, seed: u64) -> Result<f64> {
    let n = clean.shape().first().copied().unwrap_or(0);
    if n < MIN_CALIBRATION_SAMPLES {
        return Err(invalid(format!(
            "calibration needs at least {MIN_CALIBRATION_SAMPLES} clean samples, got {n}"
        )));
    }
    let sims = monitor.clean_similarities(model, clean, seed)?;
    Ok(percentile(&sims, p)?.clamp(0.0, 1.0))
}

/// Misclassifications per unit time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedStat {
    pub misclassified: usize,
    pub elapsed: f64,
    pub value: f64,
}

pub fn speed(misclassified: usize, elapsed: f64) -> Result<SpeedStat> {
    if !(elapsed > 0.0) || !elapsed.is_finite() {
        return Err(invalid(format!("elapsed time must be positive, got {elapsed}")));
    }
    Ok(SpeedStat {
        misclassified,
        elapsed,
        value: misclassified as f64 / elapsed,
    })
}

/// Alignment in `[0, 1]` between where the mask withholds perturbation
/// and where the clean explanation attends:
/// `(1 + cos(1 − mask, normalize01(explanation))) / 2`.
pub fn explain_score(mask: &AttentionMask, clean: &Explanation) -> Result<f64> {
    let withheld = mask.values().map(|v| 1.0 - v);
    let cos = cosine_similarity(&withheld, &normalize01_tensor(&clean.attribution))?;
    Ok((1.0 + cos.0) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceWeights {
    pub stealth: f64,
    pub explain: f64,
    pub speed: f64,
}

impl Default for BalanceWeights {
    fn default() -> Self {
        Self {
            stealth: 1.0 / 3.0,
            explain: 1.0 / 3.0,
            speed: 1.0 / 3.0,
        }
    }
}

impl BalanceWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.stealth, self.explain, self.speed];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().all(|&v| v == 0.0) {
            return Err(invalid("balance weights must be non-negative and not all zero"));
        }
        Ok(())
    }
}

/// One run's inputs to the balance ratio; `speed` is already normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceRun {
    pub stealth: f64,
    pub explain: f64,
    pub speed: f64,
}

/// Mean over runs of `λ1·stealth + λ2·explain + λ3·speed`.
pub fn balance(runs: &[BalanceRun], w: &BalanceWeights) -> Result<f64> {
    w.validate()?;
    if runs.is_empty() {
        return Err(Error::InvalidArgument("balance needs at least one run".into()));
    }
    let total: f64 = runs
        .iter()
        .map(|r| w.stealth * r.stealth + w.explain * r.explain + w.speed * r.speed)
        .sum();
    Ok(total / runs.len() as f64)
}

/// Min-max normalization of speeds across compared methods; equal speeds
/// map to 0.5.
pub fn normalize_speeds(speeds: &[f64]) -> Vec<f64> {
    let lo = speeds.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = speeds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; speeds.len()];
    }
    speeds.iter().map(|v| (v - lo) / (hi - lo)).collect()
}
