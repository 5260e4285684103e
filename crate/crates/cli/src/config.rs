//! TOML run configuration. Every section rejects unknown keys and is
//! validated before any command starts computing.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use xmask::attack::{attack_registry, AttackConfig, SiniParams};
use xmask::io::SyntheticKind;
use xmask::mask::MuteConfig;
use xmask::metrics::{BalanceWeights, MonitorConfig, TimingMode};
use xmask::nn::DEFAULT_MLP_HIDDEN;
use xmask::tensor::Precision;
use xmask::train::{LossWeights, Optimizer};
use xmask::xai::{XaiMethod, XaiSettings};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub float_mode: Precision,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: OptimConfig,
    pub xunet: XunetConfig,
    pub attack: AttackConfig,
    pub sini: SiniParams,
    pub mute: MuteConfig,
    pub xai: XaiSettings,
    pub monitor: MonitorConfig,
    pub loss: LossWeights,
    pub balance: BalanceWeights,
    pub benchmark: BenchSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            float_mode: Precision::F32,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: OptimConfig::default(),
            xunet: XunetConfig::default(),
            attack: AttackConfig::default(),
            sini: SiniParams::default(),
            mute: MuteConfig::default(),
            xai: XaiSettings::default(),
            monitor: MonitorConfig::default(),
            loss: LossWeights::default(),
            balance: BalanceWeights::default(),
            benchmark: BenchSection::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub kind: SyntheticKind,
    pub samples: usize,
    pub shape: Vec<usize>,
    pub classes: usize,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub cifar_batches: Vec<PathBuf>,
    /// Leading samples used for training; the next `eval` form the
    /// evaluation split.
    pub train: usize,
    pub eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            kind: SyntheticKind::Strokes,
            samples: 2500,
            shape: vec![1, 28, 28],
            classes: 10,
            idx_images: None,
            idx_labels: None,
            cifar_batches: Vec::new(),
            train: 2000,
            eval: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Mlp,
    Convnet,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ClassifierKind,
    pub hidden: Vec<usize>,
    /// Classifier checkpoint; defaults to `<out>/classifier.xmk`.
    pub checkpoint: Option<PathBuf>,
    /// X-UNet checkpoint; defaults to `<out>/xunet.xmk`.
    pub xunet_checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Mlp,
            hidden: DEFAULT_MLP_HIDDEN.to_vec(),
            checkpoint: None,
            xunet_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch: 32,
            lr: 0.01,
            optimizer: Optimizer::SgdMomentum,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XunetConfig {
    pub widths: [usize; 3],
    pub slu_a: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub unroll: usize,
    /// Leading training samples the X-UNet is trained on.
    pub samples: usize,
    pub validation: usize,
}

impl Default for XunetConfig {
    fn default() -> Self {
        let net = xmask::nn::XUnetConfig::default();
        Self {
            widths: net.widths,
            slu_a: net.slu_a,
            epochs: 10,
            batch: 32,
            lr: 0.01,
            optimizer: Optimizer::SgdMomentum,
            momentum: 0.9,
            unroll: 3,
            samples: 200,
            validation: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub methods: Vec<String>,
    pub timing: TimingMode,
    pub eval_cost_s: f64,
    pub chunk: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let d = xmask::metrics::BenchmarkConfig::default();
        Self {
            methods: d.methods,
            timing: d.timing,
            eval_cost_s: d.eval_cost_s,
            chunk: d.chunk,
        }
    }
}

/// Options of the single-stage commands.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Registry name used by `attack`.
    pub attack: String,
    /// Tensor file with one mask per evaluation image; used by `attack`
    /// instead of a mask generator.
    pub mask_file: Option<PathBuf>,
    /// Adversarial tensor scored by `monitor`; defaults to the output of
    /// `attack`.
    pub candidates: Option<PathBuf>,
    pub explain_method: XaiMethod,
    /// Number of evaluation images written by `export-saliency`.
    pub export_count: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            attack: "masked-pgd(mute)".into(),
            mask_file: None,
            candidates: None,
            explain_method: XaiMethod::Ig,
            export_count: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.model.checkpoint.clone().unwrap_or_else(|| self.out.join("classifier.xmk"))
    }

    pub fn xunet_path(&self) -> PathBuf {
        self.model.xunet_checkpoint.clone().unwrap_or_else(|| self.out.join("xunet.xmk"))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.shape.len() != 3 {
                    bail!("data.shape must be [channels, height, width]");
                }
                if d.train + d.eval > d.samples {
                    bail!("data.train + data.eval ({}) exceeds data.samples ({})", d.train + d.eval, d.samples);
                }
            }
            DataSource::Idx => {
                for p in [&d.idx_images, &d.idx_labels] {
                    match p {
                        Some(p) if p.is_file() => {}
                        Some(p) => bail!("IDX file {} does not exist", p.display()),
                        None => bail!("data.source = \"idx\" needs data.idx_images and data.idx_labels"),
                    }
                }
            }
            DataSource::Cifar10 => {
                if d.cifar_batches.is_empty() {
                    bail!("data.source = \"cifar10\" needs data.cifar_batches");
                }
                if let Some(p) = d.cifar_batches.iter().find(|p| !p.is_file()) {
                    bail!("CIFAR-10 batch {} does not exist", p.display());
                }
            }
        }
        if d.train == 0 || d.eval == 0 {
            bail!("data.train and data.eval must be positive");
        }
        if self.model.kind == ClassifierKind::Mlp && self.model.hidden.contains(&0) {
            bail!("model.hidden widths must be positive");
        }
        let opt = |name: &str, epochs: usize, batch: usize, lr: f64, momentum: f64| -> Result<()> {
            if epochs == 0 || batch == 0 {
                bail!("{name}.epochs and {name}.batch must be positive");
            }
            if !(lr.is_finite() && lr >= 0.0) {
                bail!("{name}.lr must be finite and non-negative");
            }
            if !(0.0..1.0).contains(&momentum) {
                bail!("{name}.momentum must lie in [0, 1)");
            }
            Ok(())
        };
        opt("train", self.train.epochs, self.train.batch, self.train.lr, self.train.momentum)?;
        let x = &self.xunet;
        opt("xunet", x.epochs, x.batch, x.lr, x.momentum)?;
        if x.unroll == 0 || x.samples == 0 || x.widths.contains(&0) {
            bail!("xunet.unroll, xunet.samples and xunet.widths must be positive");
        }
        self.attack.validate()?;
        self.mute.validate()?;
        self.xai.validate()?;
        self.monitor.validate()?;
        self.loss.validate()?;
        self.balance.validate()?;
        if !attack_registry().contains(&self.run.attack) {
            bail!(
                "unknown run.attack {:?}; known: {}",
                self.run.attack,
                attack_registry().names().collect::<Vec<_>>().join(", ")
            );
        }
        self.benchmark_config().validate()?;
        Ok(())
    }

    pub fn benchmark_config(&self) -> xmask::metrics::BenchmarkConfig {
        xmask::metrics::BenchmarkConfig {
            methods: self.benchmark.methods.clone(),
            attack: self.attack,
            sini: self.sini,
            mute: self.mute,
            xai: self.xai.clone(),
            monitor: self.monitor,
            weights: self.balance,
            timing: self.benchmark.timing,
            eval_cost_s: self.benchmark.eval_cost_s,
            chunk: self.benchmark.chunk,
            seed: self.seed,
        }
    }

    pub fn classifier_train_config(&self) -> xmask::train::TrainConfig {
        xmask::train::TrainConfig {
            epochs: self.train.epochs,
            batch: self.train.batch,
            lr: self.train.lr,
            optimizer: self.train.optimizer,
            momentum: self.train.momentum,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn xunet_train_config(&self) -> xmask::train::TrainConfig {
        let x = &self.xunet;
        xmask::train::TrainConfig {
            epochs: x.epochs,
            batch: x.batch,
            lr: x.lr,
            optimizer: x.optimizer,
            momentum: x.momentum,
            seed: self.seed,
            unroll: x.unroll,
            weights: self.loss,
            attack: self.attack,
            mute: self.mute,
            xai: self.xai.clone(),
            validation: x.validation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_unknown_keys_fail() {
        RunConfig::default().validate().unwrap();
        let cfg: RunConfig = toml::from_str("seed = 3\n[attack]\nepsilon = 0.1\nalpha = 0.01\n").unwrap();
        assert_eq!((cfg.seed, cfg.attack.epsilon), (3, 0.1));
        assert!(toml::from_str::<RunConfig>("[attack]\nepsilonn = 0.1\n").is_err());
        assert!(toml::from_str::<RunConfig>("colour = 1\n").is_err());
        let bad: RunConfig = toml::from_str("[attack]\nalpha = 0.5\nepsilon = 0.1\n").unwrap();
        assert!(bad.validate().is_err());
    }
}
