//! Supervised classifier training and self-supervised X-UNet training.

mod log;

use serde::{Deserialize, Serialize};

use crate::attack::{masked_pgd, pgd, unrolled_masked_pgd, AttackConfig};
use crate::error::{invalid, Error, Result};
use crate::io::Dataset;
use crate::mask::{mute, MuteConfig};
use crate::metrics::explanation_similarity;
use crate::nn::{softmax_rows, ModelGraph, ModelKind};
use crate::tensor::{Rng, Tape, Tensor, Var};
use crate::xai::{make_explainer, Explainer, ExplanationCache, IntegratedGradients, LrpEpsilon, XaiMethod, XaiSettings};

pub use log::{EpochLog, TrainLog, TRAIN_LOG_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
}

/// Weights of the three X-UNet loss terms: attack fidelity, mask-to-mix
/// regression and the soft-accuracy hinge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fidelity: f64,
    pub mix: f64,
    pub accuracy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fidelity: 1.0,
            mix: 1.0,
            accuracy: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.fidelity, self.mix, self.accuracy];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(invalid("loss weights must not all be zero"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Zero is accepted and leaves the weights untouched.
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub seed: u64,
    /// Attack steps unrolled on the tape for the X-UNet loss.
    pub unroll: usize,
    pub weights: LossWeights,
    pub attack: AttackConfig,
    pub mute: MuteConfig,
    pub xai: XaiSettings,
    /// Leading samples re-scored with full-length attacks after every
    /// X-UNet epoch; 0 disables validation.
    pub validation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 32,
            lr: 0.01,
            optimizer: Optimizer::SgdMomentum,
            momentum: 0.9,
            seed: 0,
            unroll: 3,
            weights: LossWeights::default(),
            attack: AttackConfig::default(),
            mute: MuteConfig::default(),
            xai: XaiSettings::default(),
            validation: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.unroll == 0 {
            return Err(invalid("epochs, batch and unroll must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(invalid(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        self.weights.validate()?;
        self.attack.validate()?;
        self.mute.validate()?;
        self.xai.validate()
    }
}

/// Plain or heavy-ball SGD over a model's parameter list.
struct Sgd {
    lr: f64,
    momentum: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(cfg: &TrainConfig, model: &ModelGraph) -> Self {
        Self {
            lr: cfg.lr,
            momentum: (cfg.optimizer == Optimizer::SgdMomentum).then_some(cfg.momentum),
            velocity: model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    fn step(&mut self, model: &mut ModelGraph, grads: &[&Tensor]) -> Result<()> {
        let mut next = Vec::with_capacity(grads.len());
        for ((p, g), v) in model.params().iter().zip(grads).zip(&mut self.velocity) {
            let mut values = p.tensor.data().to_vec();
            for ((x, &gi), vi) in values.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = match self.momentum {
                    Some(mu) => {
                        *vi = mu * *vi + gi;
                        *vi
                    }
                    None => gi,
                };
                *x -= self.lr * d;
            }
            next.push(Tensor::new(p.tensor.shape().to_vec(), values)?);
        }
        model.set_params(next)
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(epoch as u64).shuffle(&mut order);
    order
}

/// Mini-batch cross-entropy training. Each epoch visits the samples in an
/// order drawn from `cfg.seed`.
pub fn train_classifier(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if model.classes().is_none() {
        return Err(invalid("train_classifier needs a model with class logits"));
    }
    if model.is_frozen() {
        return Err(Error::Unfrozen("cannot train a frozen classifier".into()));
    }
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut opt = Sgd::new(cfg, model);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch) {
            let (x, y) = data.batch(idx)?;
            let mut tape = Tape::new(model.precision());
            let params = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let logits = model.forward_on(&mut tape, &params, xv)?;
            correct += count_correct(tape.value(logits)?, &y);
            let loss = tape.cross_entropy(logits, &y)?;
            loss_sum += tape.value(loss)?.item()? * idx.len() as f64;
            let grads = tape.backward(loss)?;
            let g = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>>>()?;
            opt.step(model, &g)?;
        }
        let loss = loss_sum / data.len() as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            total: loss,
            term1: loss,
            accuracy: correct as f64 / data.len() as f64,
            ..Default::default()
        })?;
    }
    Ok(log)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Values of the X-UNet loss and its terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub fidelity: f64,
    pub mix: f64,
    pub accuracy: f64,
}

/// Mean probability assigned to the true class.
pub fn soft_accuracy(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let p = softmax_rows(&model.forward(x)?)?;
    let k = p.shape()[1];
    Ok(labels.iter().enumerate().map(|(i, &l)| p.data()[i * k + l]).sum::<f64>() / labels.len() as f64)
}

/// Records the X-UNet loss on `tape` and returns it with its terms.
///
/// `mask` is the X-UNet output `[n, 1, h, w]`; it is repeated across the
/// image channels. `mix` is the Mute mixture for the batch, image-shaped.
/// The vanilla reference attack runs `cfg.unroll` unmasked steps off-tape.
pub fn xunet_loss(
    tape: &mut Tape,
    classifier: &ModelGraph,
    mask: Var,
    data: &Tensor,
    labels: &[usize],
    mix: &Tensor,
    cfg: &TrainConfig,
) -> Result<(Var, LossTerms)> {
    data.expect_shape(mix, "xunet loss mix")?;
    let mshape = tape.value(mask)?.shape().to_vec();
    let channels = data.shape()[1];
    if mshape.len() != 4 || mshape[1] != 1 || mshape[0] != data.shape()[0] || mshape[2..] != data.shape()[2..] {
        return Err(Error::ShapeMismatch {
            op: "xunet loss mask",
            left: mshape,
            right: data.shape().to_vec(),
        });
    }
    let mask = if channels > 1 { tape.repeat_channels(mask, channels)? } else { mask };
    let w = cfg.weights;

    let adv = unrolled_masked_pgd(tape, classifier, data, labels, mask, &cfg.attack, cfg.unroll)?;
    let clean = tape.constant(data.clone());
    let diff = tape.sub(adv, clean)?;
    let diff = tape.abs(diff)?;
    let t1 = tape.mean(diff)?;

    let mix_v = tape.constant(mix.clone());
    let gap = tape.sub(mask, mix_v)?;
    let gap = tape.abs(gap)?;
    let t2 = tape.mean(gap)?;

    let vanilla_cfg = AttackConfig {
        steps: cfg.unroll,
        random_start: false,
        ..cfg.attack
    };
    let vanilla = pgd(classifier, data, labels, &vanilla_cfg)?;
    let vanilla_acc = soft_accuracy(classifier, &vanilla.x_adv, labels)?;
    let params = classifier.bind(tape, false);
    let logits = classifier.forward_on(tape, &params, adv)?;
    let logp = tape.log_softmax(logits)?;
    let p = tape.exp(logp)?;
    let p_true = tape.pick(p, labels)?;
    let masked_acc = tape.mean(p_true)?;
    let excess = tape.add_scalar(masked_acc, -vanilla_acc)?;
    let t3 = tape.relu(excess)?;

    let a = tape.scale(t1, w.fidelity)?;
    let b = tape.scale(t2, w.mix)?;
    let c = tape.scale(t3, w.accuracy)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let terms = LossTerms {
        total: tape.value(total)?.item()?,
        fidelity: tape.value(t1)?.item()?,
        mix: tape.value(t2)?.item()?,
        accuracy: tape.value(t3)?.item()?,
    };
    Ok((total, terms))
}

/// Mute mixtures for every sample, explained at the classifier's predicted
/// class and drawn from the per-sample stream of `cfg.mute.seed`.
fn mute_mixes(classifier: &ModelGraph, data: &Dataset, cfg: &TrainConfig, cache: &mut ExplanationCache) -> Result<Vec<Tensor>> {
    let ig = IntegratedGradients::new(cfg.xai.ig_steps);
    let lrp = LrpEpsilon {
        epsilon: cfg.xai.lrp_epsilon,
    };
    (0..data.len())
        .map(|i| {
            let image = data.images.index_axis0(i)?;
            let target = classifier.predict(&image)?;
            let l = cache.get_or_compute(i, XaiMethod::Lrp, || lrp.explain(classifier, &image, target))?.clone();
            let g = cache.get_or_compute(i, XaiMethod::Ig, || ig.explain(classifier, &image, target))?;
            let mut rng = Rng::new(cfg.mute.seed).fork(i as u64);
            Ok(mute(&l, g, &cfg.mute, &mut rng)?.into_values())
        })
        .collect()
}

/// Trains the X-UNet against a frozen classifier. The classifier is only
/// read, so its parameters are bitwise unchanged.
pub fn train_xunet(xunet: &mut ModelGraph, classifier: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if !classifier.is_frozen() {
        return Err(Error::Unfrozen("freeze the classifier before training the X-UNet".into()));
    }
    if xunet.kind() != ModelKind::Xunet {
        return Err(invalid(format!("expected an xunet model, got {}", xunet.kind().as_str())));
    }
    if xunet.input_shape() != data.image_shape() || classifier.input_shape() != data.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "train_xunet",
            left: xunet.input_shape().to_vec(),
            right: data.image_shape().to_vec(),
        });
    }
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut cache = ExplanationCache::new(cfg.xai.cache_refresh);
    let mut opt = Sgd::new(cfg, xunet);
    let mut log = TrainLog::default();
    let per = data.images.len() / data.len();
    let val = cfg.validation.min(data.len());
    let monitor = make_explainer(XaiMethod::Ig, &cfg.xai)?;
    for epoch in 0..cfg.epochs {
        let mixes = mute_mixes(classifier, data, cfg, &mut cache)?;
        let mut sums = LossTerms::default();
        for idx in epoch_order(data.len(), cfg.seed, epoch).chunks(cfg.batch) {
            let (x, y) = data.batch(idx)?;
            let mut mix = Vec::with_capacity(idx.len() * per);
            idx.iter().for_each(|&i| mix.extend_from_slice(mixes[i].data()));
            let mix = Tensor::new(x.shape().to_vec(), mix)?;
            let mut tape = Tape::new(xunet.precision());
            let params = xunet.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let mask = xunet.forward_on(&mut tape, &params, xv)?;
            let (loss, terms) = xunet_loss(&mut tape, classifier, mask, &x, &y, &mix, cfg)?;
            let grads = tape.backward(loss)?;
            let g = params.iter().map(|&p| grads.wrt(p)).collect::<Result<Vec<_>>>()?;
            opt.step(xunet, &g)?;
            let share = idx.len() as f64 / data.len() as f64;
            sums.total += terms.total * share;
            sums.fidelity += terms.fidelity * share;
            sums.mix += terms.mix * share;
            sums.accuracy += terms.accuracy * share;
        }
        let (val_stealth, val_delta_acc) = if val > 0 {
            validate_xunet(xunet, classifier, &data.slice(0, val)?, cfg, monitor.as_ref())?
        } else {
            (0.0, 0.0)
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            total: sums.total,
            term1: sums.fidelity,
            term2: sums.mix,
            term3: sums.accuracy,
            accuracy: 0.0,
            val_stealth,
            val_delta_acc,
        })?;
    }
    Ok(log)
}

/// Mean stealth of the full-length X-UNet-masked attack and its accuracy
/// gap to vanilla PGD.
fn validate_xunet(
    xunet: &ModelGraph,
    classifier: &ModelGraph,
    val: &Dataset,
    cfg: &TrainConfig,
    explainer: &dyn Explainer,
) -> Result<(f64, f64)> {
    let masks = xunet_masks(xunet, &val.images)?;
    let masked = masked_pgd(classifier, &val.images, &val.labels, &masks, &cfg.attack)?;
    let vanilla = pgd(classifier, &val.images, &val.labels, &cfg.attack)?;
    let mut stealth = 0.0;
    for i in 0..val.len() {
        let clean = val.images.index_axis0(i)?;
        let adv = masked.x_adv.index_axis0(i)?;
        let a = explainer.explain(classifier, &clean, classifier.predict(&clean)?)?;
        let b = explainer.explain(classifier, &adv, classifier.predict(&adv)?)?;
        stealth += explanation_similarity(&a, &b)?.0;
    }
    Ok((stealth / val.len() as f64, masked.accuracy() - vanilla.accuracy()))
}

/// X-UNet masks for a batch, repeated across the image channels.
pub fn xunet_masks(xunet: &ModelGraph, images: &Tensor) -> Result<Tensor> {
    let out = xunet.forward(images)?;
    let shape = images.shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if out.len() != n * plane {
        return Err(Error::ShapeMismatch {
            op: "xunet masks",
            left: out.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    let mut data = Vec::with_capacity(images.len());
    for row in out.data().chunks(plane) {
        (0..c).for_each(|_| data.extend_from_slice(row));
    }
    Tensor::new(shape.to_vec(), data)
}
