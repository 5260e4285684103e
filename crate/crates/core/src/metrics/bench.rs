use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{BenchmarkReport, MethodRow};
use super::{
    balance, calibrate_threshold, explain_score, explanation_similarity, normalize_speeds, speed, BalanceRun,
    BalanceWeights, Calibration, Monitor, MonitorConfig,
};
use crate::attack::{attack_registry, AdvBatch, AttackConfig, AttackSettings, SiniParams};
use crate::error::{invalid, Error, Result};
use crate::mask::{AttentionMask, MaskProvenance, MaskSettings, MuteConfig};
use crate::nn::ModelGraph;
use crate::tensor::{Rng, Tensor};
use crate::xai::{Explanation, XaiSettings};

/// How the `time_s` column is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    /// Attack gradient evaluations times a fixed per-evaluation cost.
    /// Deterministic, so reports are byte-stable.
    #[default]
    Evals,
    /// Measured wall-clock seconds summed over attack chunks.
    Wall,
}

impl TimingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TimingMode::Evals => "evals",
            TimingMode::Wall => "wall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub methods: Vec<String>,
    pub attack: AttackConfig,
    pub sini: SiniParams,
    pub mute: MuteConfig,
    pub xai: XaiSettings,
    pub monitor: MonitorConfig,
    pub weights: BalanceWeights,
    pub timing: TimingMode,
    /// Seconds charged per gradient evaluation in `evals` timing.
    pub eval_cost_s: f64,
    /// Rows per attack batch; the unit of parallel work.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                "pgd".into(),
                "masked-pgd(mute)".into(),
                "masked-pgd(xunet)".into(),
                "sinifgsm".into(),
            ],
            attack: AttackConfig::default(),
            sini: SiniParams::default(),
            mute: MuteConfig::default(),
            xai: XaiSettings::default(),
            monitor: MonitorConfig::default(),
            weights: BalanceWeights::default(),
            timing: TimingMode::Evals,
            eval_cost_s: 1e-3,
            chunk: 50,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("benchmark needs at least one method"));
        }
        let reg = attack_registry();
        for m in &self.methods {
            if !reg.contains(m) {
                return Err(Error::UnknownName {
                    kind: "attack",
                    name: m.clone(),
                    known: reg.names().collect::<Vec<_>>().join(", "),
                });
            }
        }
        self.attack.validate()?;
        self.mute.validate()?;
        self.xai.validate()?;
        self.monitor.validate()?;
        self.weights.validate()?;
        if self.chunk == 0 {
            return Err(invalid("benchmark chunk must be at least 1"));
        }
        if !(self.eval_cost_s > 0.0) || !self.eval_cost_s.is_finite() {
            return Err(invalid("eval_cost_s must be positive"));
        }
        Ok(())
    }

    /// Short hash identifying this configuration and one method.
    pub fn hash_for(&self, method: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::new().chain_update(json.as_bytes()).chain_update(method.as_bytes()).finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Data and models for one benchmark run.
pub struct BenchmarkInputs<'a> {
    pub model: &'a ModelGraph,
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    /// Clean images for threshold calibration; defaults to `images`.
    pub calibration: Option<&'a Tensor>,
    pub xunet: Option<Arc<ModelGraph>>,
}

struct MethodOutcome {
    batches: Vec<AdvBatch>,
}

/// Runs every configured method on the evaluation set and scores it with
/// the monitor. Per-sample work is parallelized with rayon; results are
/// reduced in sample order so the report does not depend on the thread
/// count.
pub fn run_benchmark(inputs: &BenchmarkInputs<'_>, cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let model = inputs.model;
    let n = inputs.labels.len();
    if n == 0 || inputs.images.shape().first() != Some(&n) {
        return Err(invalid("benchmark needs a non-empty image batch with one label per image"));
    }
    if cfg.methods.iter().any(|m| m.contains("xunet")) && inputs.xunet.is_none() {
        return Err(invalid("an xunet method was requested without an xunet model"));
    }

    let mut monitor = Monitor::new(&cfg.monitor, &cfg.xai)?;
    if let Calibration::CleanPercentile { percentile } = cfg.monitor.calibration {
        let calib = inputs.calibration.unwrap_or(inputs.images);
        let seed = Rng::new(cfg.seed).fork(u64::MAX).next_u64();
        monitor.set_tau(calibrate_threshold(&monitor, model, calib, percentile, seed)?)?;
    }

    let images: Vec<Tensor> = (0..n).map(|i| inputs.images.index_axis0(i)).collect::<Result<_>>()?;
    let clean_expl: Vec<Explanation> = images
        .par_iter()
        .map(|img| monitor.explain(model, img))
        .collect::<Result<_>>()?;
    let clean_pred = model.predict_batch(inputs.images)?;
    let clean_correct = clean_pred.iter().zip(inputs.labels).filter(|(p, l)| p == l).count();

    let settings = AttackSettings {
        config: cfg.attack,
        sini: cfg.sini,
        masks: MaskSettings {
            mute: cfg.mute,
            xai: cfg.xai.clone(),
            constant_value: 1.0,
            xunet: inputs.xunet.clone(),
        },
    };
    let registry = attack_registry();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(cfg.chunk).map(|s| (s, (s + cfg.chunk).min(n))).collect();

    let mut rows = Vec::with_capacity(cfg.methods.len());
    let mut per_sample_runs = Vec::with_capacity(cfg.methods.len());
    for method in &cfg.methods {
        let outcome = MethodOutcome {
            batches: chunks
                .par_iter()
                .enumerate()
                .map(|(ci, &(s, e))| {
                    let mut chunk_settings = settings.clone();
                    chunk_settings.config.seed = Rng::new(cfg.seed).fork(ci as u64).next_u64();
                    let attack = registry.create(method, &chunk_settings)?;
                    let x = Tensor::stack(&images[s..e])?;
                    let ids: Vec<usize> = (s..e).collect();
                    attack.run(model, &x, &inputs.labels[s..e], &ids)
                })
                .collect::<Result<_>>()?,
        };
        let mut adv = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for b in &outcome.batches {
            for r in 0..b.len() {
                adv.push(b.x_adv.index_axis0(r)?);
                masks.push(match &b.masks {
                    Some(m) => Some(m.index_axis0(r)?),
                    None => None,
                });
            }
        }
        let scored: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let e = monitor.explain(model, &adv[i])?;
                let stealth = explanation_similarity(&clean_expl[i], &e)?.0;
                let mask = match &masks[i] {
                    Some(m) => AttentionMask::new(m.clone(), MaskProvenance::Mute)?,
                    None => AttentionMask::new(images[i].ones_like(), MaskProvenance::Constant)?,
                };
                Ok((stealth, explain_score(&mask, &clean_expl[i])?))
            })
            .collect::<Result<_>>()?;

        let correct: usize = outcome
            .batches
            .iter()
            .map(|b| b.pred_after.iter().zip(&b.labels).filter(|(p, l)| p == l).count())
            .sum();
        let evals: usize = outcome.batches.iter().map(|b| b.gradient_evals).sum();
        let time_s = match cfg.timing {
            TimingMode::Evals => evals as f64 * cfg.eval_cost_s,
            TimingMode::Wall => outcome.batches.iter().map(|b| b.wall_time.as_secs_f64()).sum::<f64>().max(1e-9),
        };
        let stealth_scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let passes = stealth_scores.iter().filter(|&&s| monitor.judge(s).pass).count();
        let mis = n - correct;
        rows.push(MethodRow {
            method: method.clone(),
            accuracy: correct as f64 / n as f64,
            time_s,
            stealth: mean(&stealth_scores),
            pass_rate: passes as f64 / n as f64,
            delta_exp: mean(&scored.iter().map(|s| s.1).collect::<Vec<_>>()),
            balance: 0.0,
            seed: cfg.seed,
            config_hash: cfg.hash_for(method),
            misclassified: mis,
            speed: speed(mis, time_s)?.value,
            speed_normalized: 0.0,
            gradient_evals: evals,
            stealth_scores,
        });
        per_sample_runs.push(scored);
    }

    let speeds: Vec<f64> = rows.iter().map(|r| r.speed).collect();
    for ((row, v), scored) in rows.iter_mut().zip(normalize_speeds(&speeds)).zip(&per_sample_runs) {
        row.speed_normalized = v;
        let runs: Vec<BalanceRun> = scored
            .iter()
            .map(|&(stealth, explain)| BalanceRun {
                stealth,
                explain,
                speed: v,
            })
            .collect();
        row.balance = balance(&runs, &cfg.weights)?;
    }

    Ok(BenchmarkReport {
        rows,
        samples: n,
        clean_accuracy: clean_correct as f64 / n as f64,
        tau: monitor.tau(),
        timing: cfg.timing.as_str().to_string(),
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_mlp;
    use crate::tensor::{rng_uniform, Precision};

    #[test]
    fn small_run_is_deterministic_across_thread_counts() {
        let mut rng = Rng::new(4);
        let model = build_mlp(&[1, 4, 4], &[8], 3, &mut rng, Precision::F32).unwrap();
        let images = rng_uniform(&mut rng, &[24, 1, 4, 4]);
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let cfg = BenchmarkConfig {
            methods: vec!["pgd".into(), "masked-pgd(mute)".into(), "sinifgsm".into()],
            xai: XaiSettings {
                ig_steps: 8,
                ..Default::default()
            },
            chunk: 5,
            seed: 9,
            ..Default::default()
        };
        let inputs = BenchmarkInputs {
            model: &model,
            images: &images,
            labels: &labels,
            calibration: None,
            xunet: None,
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| run_benchmark(&inputs, &cfg)).unwrap();
        let b = four.install(|| run_benchmark(&inputs, &cfg)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows.len(), 3);
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.pass_rate));
        }
        let bad = BenchmarkConfig {
            methods: vec!["sparsefool".into()],
            ..cfg
        };
        assert!(run_benchmark(&inputs, &bad).is_err());
    }
}
