//! Untargeted L∞ attacks with cross-entropy loss.
//!
//! Attacks work on batches `[n, ...image]`. Every step is followed by
//! projection onto the ε-ball around the clean input and clipping to the
//! pixel range `[0, 1]`, done as a single clamp into
//! `[max(x − ε, 0), min(x + ε, 1)]`.

mod unrolled;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mask::{mask_registry, MaskGenerator, MaskSettings};
use crate::nn::{ModelGraph, Objective};
use crate::registry::Registry;
use crate::tensor::{sign, Precision, Rng, Tensor};

pub use unrolled::unrolled_masked_pgd;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ budget on the `[0, 1]` pixel scale.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    /// Seed of the random-start streams (one fork per batch row).
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            alpha: 0.05,
            steps: 10,
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(invalid(format!(
                "alpha must satisfy 0 < alpha <= epsilon, got alpha {} epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(invalid("attack steps must be at least 1"));
        }
        Ok(())
    }
}

/// SI-NI-FGSM hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SiniParams {
    /// Number of dyadic input scales `x / 2^i`.
    pub scales: usize,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for SiniParams {
    fn default() -> Self {
        Self {
            scales: 5,
            momentum: 1.0,
            nesterov: true,
        }
    }
}

/// Result of attacking a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub x_clean: Tensor,
    pub labels: Vec<usize>,
    pub pred_before: Vec<usize>,
    pub pred_after: Vec<usize>,
    pub iterations_used: usize,
    /// Input-gradient evaluations spent by the attack, counted per image.
    pub gradient_evals: usize,
    pub wall_time: Duration,
    /// Part of `wall_time` spent building masks.
    pub mask_time: Duration,
    /// Masks that gated the steps, for masked attacks.
    pub masks: Option<Tensor>,
}

/// One row of an [`AdvBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdvExample {
    pub x_adv: Tensor,
    pub x_clean: Tensor,
    pub true_label: usize,
    pub predicted_before: usize,
    pub predicted_after: usize,
    pub iterations_used: usize,
}

impl AdvBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example(&self, i: usize) -> Result<AdvExample> {
        Ok(AdvExample {
            x_adv: self.x_adv.index_axis0(i)?,
            x_clean: self.x_clean.index_axis0(i)?,
            true_label: self.labels[i],
            predicted_before: self.pred_before[i],
            predicted_after: self.pred_after[i],
            iterations_used: self.iterations_used,
        })
    }

    /// Fraction of rows still classified correctly.
    pub fn accuracy(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let ok = self.pred_after.iter().zip(&self.labels).filter(|(p, l)| p == l).count();
        ok as f64 / self.len() as f64
    }
}

fn check_batch(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.rank() == 0 || x.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "attack labels",
            left: x.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("attack inputs must lie in [0, 1]"));
    }
    if let Some(k) = model.classes() {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
    }
    Ok(())
}

/// Copy of `t` stored at the model's precision, as a tape leaf would be.
fn at_precision(t: &Tensor, p: Precision) -> Tensor {
    let mut t = t.clone();
    p.round_tensor(&mut t);
    t
}

/// Per-coordinate bounds `[max(x − ε, 0), min(x + ε, 1)]`.
pub(crate) fn box_bounds(x: &Tensor, epsilon: f64) -> (Tensor, Tensor) {
    (x.map(|v| (v - epsilon).max(0.0)), x.map(|v| (v + epsilon).min(1.0)))
}

pub(crate) fn signed_gradient(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (_, g) = model.input_gradient(x, Objective::CrossEntropySum(labels))?;
    Ok(g.map(sign))
}

/// One gated step: `clamp(x + α·(M ⊙ s), lo, hi)`, rounding every
/// intermediate the same way a tape in the given precision would.
pub(crate) fn gated_step(
    x: &mut [f64],
    s: &[f64],
    mask: Option<&[f64]>,
    alpha: f64,
    lo: &[f64],
    hi: &[f64],
    p: Precision,
) {
    for i in 0..x.len() {
        let gated = match mask {
            Some(m) => p.round(m[i] * s[i]),
            None => s[i],
        };
        let stepped = p.round(x[i] + p.round(alpha * gated));
        x[i] = p.round(stepped.max(lo[i]).min(hi[i]));
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &ModelGraph,
    x_clean: &Tensor,
    x_adv: Tensor,
    labels: &[usize],
    pred_before: Vec<usize>,
    iterations: usize,
    gradient_evals: usize,
    started: Instant,
) -> Result<AdvBatch> {
    let pred_after = model.predict_batch(&x_adv)?;
    Ok(AdvBatch {
        x_adv,
        x_clean: x_clean.clone(),
        labels: labels.to_vec(),
        pred_before,
        pred_after,
        iterations_used: iterations,
        gradient_evals,
        wall_time: started.elapsed(),
        mask_time: Duration::ZERO,
        masks: None,
    })
}

/// Single signed-gradient step of size ε. The result is clamped into the
/// same box as PGD, which only matters when the step itself rounds.
pub fn fgsm(model: &ModelGraph, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<AdvBatch> {
    check_batch(model, x, labels)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid("epsilon must be positive"));
    }
    let started = Instant::now();
    let p = model.precision();
    let x = &at_precision(x, p);
    let pred_before = model.predict_batch(x)?;
    let s = signed_gradient(model, x, labels)?;
    let (lo, hi) = box_bounds(x, epsilon);
    let mut adv = x.clone();
    gated_step(adv.data_mut(), s.data(), None, epsilon, lo.data(), hi.data(), p);
    finish(model, x, adv, labels, pred_before, 1, labels.len(), started)
}

/// Projected gradient descent.
pub fn pgd(model: &ModelGraph, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch> {
    run_pgd(model, x, labels, None, cfg)
}

/// PGD whose every step is multiplied elementwise by `mask` (batch-shaped).
pub fn masked_pgd(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    mask: &Tensor,
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    x.expect_shape(mask, "masked pgd")?;
    if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("mask values must lie in [0, 1]"));
    }
    run_pgd(model, x, labels, Some(mask), cfg)
}

fn run_pgd(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    mask: Option<&Tensor>,
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    cfg.validate()?;
    check_batch(model, x, labels)?;
    let started = Instant::now();
    let p = model.precision();
    let x = &at_precision(x, p);
    let mask = mask.map(|m| at_precision(m, p));
    let mask = mask.as_ref();
    let pred_before = model.predict_batch(x)?;
    let (lo, hi) = box_bounds(x, cfg.epsilon);
    let mut cur = x.clone();
    if cfg.random_start {
        let per = x.len() / labels.len();
        let base = Rng::new(cfg.seed);
        let data = cur.data_mut();
        for (row, chunk) in data.chunks_mut(per).enumerate() {
            let mut rng = base.fork(row as u64);
            for (j, v) in chunk.iter_mut().enumerate() {
                let idx = row * per + j;
                let gate = mask.map_or(1.0, |m| m.data()[idx]);
                let noise = rng.uniform_range(-cfg.epsilon, cfg.epsilon);
                *v = p.round((*v + gate * noise).max(lo.data()[idx]).min(hi.data()[idx]));
            }
        }
    }
    for _ in 0..cfg.steps {
        let s = signed_gradient(model, &cur, labels)?;
        gated_step(
            cur.data_mut(),
            s.data(),
            mask.map(Tensor::data),
            cfg.alpha,
            lo.data(),
            hi.data(),
            p,
        );
    }
    finish(model, x, cur, labels, pred_before, cfg.steps, cfg.steps * labels.len(), started)
}

/// Scale-invariant Nesterov iterative FGSM.
///
/// `g ← μ·g + G / ‖G‖₁` per image, where `G` averages the loss gradient at
/// `x_nes / 2^i` for `i = 0..scales` and `x_nes = x + α·μ·g` is the
/// lookahead point (skipped when `nesterov` is off).
pub fn sinifgsm(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    sini: &SiniParams,
) -> Result<AdvBatch> {
    cfg.validate()?;
    check_batch(model, x, labels)?;
    if sini.scales == 0 {
        return Err(invalid("sinifgsm needs at least one scale"));
    }
    if !sini.momentum.is_finite() || sini.momentum < 0.0 {
        return Err(invalid("sinifgsm momentum must be finite and non-negative"));
    }
    let started = Instant::now();
    let p = model.precision();
    let x = &at_precision(x, p);
    let pred_before = model.predict_batch(x)?;
    let (lo, hi) = box_bounds(x, cfg.epsilon);
    let n = labels.len();
    let per = x.len() / n;
    let mu = sini.momentum;
    let mut cur = x.clone();
    let mut g = vec![0.0; x.len()];
    for _ in 0..cfg.steps {
        let lookahead = if sini.nesterov {
            let shifted = cur
                .data()
                .iter()
                .zip(&g)
                .map(|(&v, &gv)| p.round(v + p.round(cfg.alpha * mu * gv)))
                .collect();
            Tensor::new(cur.shape().to_vec(), shifted)?
        } else {
            cur.clone()
        };
        let mut avg = vec![0.0; x.len()];
        for i in 0..sini.scales {
            let scaled = lookahead.map(|v| v / f64::from(1u32 << i.min(31)));
            let (_, grad) = model.input_gradient(&scaled, Objective::CrossEntropySum(labels))?;
            avg.iter_mut().zip(grad.data()).for_each(|(a, v)| *a += v);
        }
        if sini.scales > 1 {
            let m = sini.scales as f64;
            avg.iter_mut().for_each(|a| *a /= m);
        }
        for (gr, ar) in g.chunks_mut(per).zip(avg.chunks(per)) {
            let l1: f64 = ar.iter().map(|v| v.abs()).sum();
            for (gv, &av) in gr.iter_mut().zip(ar) {
                let normalized = if l1 > 0.0 { av / l1 } else { 0.0 };
                *gv = mu * *gv + normalized;
            }
        }
        let s: Vec<f64> = g.iter().map(|&v| sign(v)).collect();
        gated_step(cur.data_mut(), &s, None, cfg.alpha, lo.data(), hi.data(), p);
    }
    let evals = cfg.steps * sini.scales * n;
    finish(model, x, cur, labels, pred_before, cfg.steps, evals, started)
}

/// A named attack. `ids` identify the batch rows within the dataset so
/// randomized components draw from per-sample streams.
pub trait Attack: Send + Sync {
    fn name(&self) -> String;

    fn run(&self, model: &ModelGraph, x: &Tensor, labels: &[usize], ids: &[usize]) -> Result<AdvBatch>;
}

pub struct PgdAttack {
    pub config: AttackConfig,
}

impl Attack for PgdAttack {
    fn name(&self) -> String {
        "pgd".into()
    }

    fn run(&self, model: &ModelGraph, x: &Tensor, labels: &[usize], _ids: &[usize]) -> Result<AdvBatch> {
        pgd(model, x, labels, &self.config)
    }
}

pub struct FgsmAttack {
    pub epsilon: f64,
}

impl Attack for FgsmAttack {
    fn name(&self) -> String {
        "fgsm".into()
    }

    fn run(&self, model: &ModelGraph, x: &Tensor, labels: &[usize], _ids: &[usize]) -> Result<AdvBatch> {
        fgsm(model, x, labels, self.epsilon)
    }
}

pub struct SiniFgsmAttack {
    pub config: AttackConfig,
    pub params: SiniParams,
}

impl Attack for SiniFgsmAttack {
    fn name(&self) -> String {
        "sinifgsm".into()
    }

    fn run(&self, model: &ModelGraph, x: &Tensor, labels: &[usize], _ids: &[usize]) -> Result<AdvBatch> {
        sinifgsm(model, x, labels, &self.config, &self.params)
    }
}

/// PGD gated by masks from a generator, built per image before attacking.
pub struct MaskedPgdAttack {
    pub config: AttackConfig,
    pub generator: Box<dyn MaskGenerator>,
}

impl MaskedPgdAttack {
    /// Masks for every row of `x`, stacked to the batch shape.
    pub fn masks(&self, model: &ModelGraph, x: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let rows = (0..ids.len())
            .map(|i| {
                let image = x.index_axis0(i)?;
                Ok(self.generator.generate(model, &image, ids[i])?.into_values())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&rows)
    }
}

impl Attack for MaskedPgdAttack {
    fn name(&self) -> String {
        format!("masked-pgd({})", self.generator.name())
    }

    fn run(&self, model: &ModelGraph, x: &Tensor, labels: &[usize], ids: &[usize]) -> Result<AdvBatch> {
        if ids.len() != labels.len() {
            return Err(invalid("one sample id per batch row is required"));
        }
        let started = Instant::now();
        let masks = self.masks(model, x, ids)?;
        let mask_time = started.elapsed();
        let mut out = masked_pgd(model, x, labels, &masks, &self.config)?;
        out.mask_time = mask_time;
        out.wall_time += mask_time;
        out.masks = Some(masks);
        Ok(out)
    }
}

/// Settings consumed by the attack factories.
#[derive(Debug, Clone, Default)]
pub struct AttackSettings {
    pub config: AttackConfig,
    pub sini: SiniParams,
    pub masks: MaskSettings,
}

pub type AttackRegistry = Registry<dyn Attack, AttackSettings>;

/// Built-in attacks. Masked variants are registered as
/// `masked-pgd(<generator>)` for every mask generator.
pub fn attack_registry() -> AttackRegistry {
    let mut reg = AttackRegistry::new("attack");
    reg.register("pgd", |s: &AttackSettings| {
        s.config.validate()?;
        Ok(Box::new(PgdAttack { config: s.config }) as Box<dyn Attack>)
    });
    reg.register("fgsm", |s: &AttackSettings| {
        s.config.validate()?;
        Ok(Box::new(FgsmAttack {
            epsilon: s.config.epsilon,
        }) as Box<dyn Attack>)
    });
    reg.register("sinifgsm", |s: &AttackSettings| {
        s.config.validate()?;
        Ok(Box::new(SiniFgsmAttack {
            config: s.config,
            params: s.sini,
        }) as Box<dyn Attack>)
    });
    let masks = Arc::new(mask_registry());
    let names: Vec<String> = masks.names().map(str::to_string).collect();
    for mask in names {
        let masks = Arc::clone(&masks);
        let key = mask.clone();
        reg.register(&format!("masked-pgd({mask})"), move |s: &AttackSettings| {
            s.config.validate()?;
            Ok(Box::new(MaskedPgdAttack {
                config: s.config,
                generator: masks.create(&key, &s.masks)?,
            }) as Box<dyn Attack>)
        });
    }
    reg
}
