use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use xmask::attack::{attack_registry, masked_pgd, AttackSettings};
use xmask::io::{
    export_pgm, load_checkpoint, load_cifar10, load_idx, load_tensor, save_checkpoint, save_tensor, synthetic_dataset,
    Dataset,
};
use xmask::mask::MaskSettings;
use xmask::metrics::{calibrate_threshold, explanation_similarity, run_benchmark, BenchmarkInputs, Calibration, Monitor};
use xmask::nn::{build_convnet, build_mlp, build_xunet, ModelGraph, XUnetConfig};
use xmask::tensor::{Rng, Tensor};
use xmask::train;
use xmask::xai::{make_explainer, normalize01_tensor};

use crate::config::{ClassifierKind, DataSource, RunConfig};

struct Splits {
    train: Dataset,
    eval: Dataset,
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let all = match d.source {
        DataSource::Synthetic => synthetic_dataset(d.kind, d.samples, &d.shape, d.classes, cfg.seed)?,
        DataSource::Idx => {
            let (images, labels) = (d.idx_images.as_ref(), d.idx_labels.as_ref());
            load_idx(images.expect("validated"), labels.expect("validated"))?
        }
        DataSource::Cifar10 => {
            let paths: Vec<&Path> = d.cifar_batches.iter().map(|p| p.as_path()).collect();
            load_cifar10(&paths)?
        }
    };
    ensure!(
        d.train + d.eval <= all.len(),
        "data.train + data.eval ({}) exceeds the {} loaded samples",
        d.train + d.eval,
        all.len()
    );
    Ok(Splits {
        train: all.slice(0, d.train)?,
        eval: all.slice(d.train, d.train + d.eval)?,
    })
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn load_model(path: &Path, what: &str, cfg: &RunConfig) -> Result<ModelGraph> {
    require_file(path, what)?;
    let mut m = load_checkpoint(path).with_context(|| format!("loading {what} {}", path.display()))?;
    m.set_precision(cfg.float_mode);
    Ok(m)
}

fn load_classifier(cfg: &RunConfig, data: &Dataset) -> Result<ModelGraph> {
    let mut m = load_model(&cfg.classifier_path(), "classifier checkpoint", cfg)?;
    ensure!(
        m.input_shape() == data.image_shape(),
        "classifier expects images of shape {:?} but the data has {:?}",
        m.input_shape(),
        data.image_shape()
    );
    m.freeze();
    Ok(m)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))
}

pub fn train_classifier(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let shape = splits.train.image_shape().to_vec();
    let classes = splits.train.classes;
    let mut rng = Rng::new(cfg.seed);
    let mut model = match cfg.model.kind {
        ClassifierKind::Mlp => build_mlp(&shape, &cfg.model.hidden, classes, &mut rng, cfg.float_mode)?,
        ClassifierKind::Convnet => build_convnet(&shape, classes, &mut rng, cfg.float_mode)?,
    };
    prepare_out(cfg)?;
    let log = train::train_classifier(&mut model, &splits.train, &cfg.classifier_train_config())?;
    let path = cfg.classifier_path();
    save_checkpoint(&model, &path)?;
    log.write_csv(&cfg.out.join("classifier_log.csv"))?;
    let preds = model.predict_batch(&splits.eval.images)?;
    let acc = accuracy(&preds, &splits.eval.labels);
    println!(
        "train-classifier: {} epochs, eval accuracy {:.1}% on {} samples -> {}",
        cfg.train.epochs,
        100.0 * acc,
        splits.eval.len(),
        path.display()
    );
    Ok(())
}

pub fn train_xunet(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let classifier = load_classifier(cfg, &splits.train)?;
    let subset = splits.train.slice(0, cfg.xunet.samples.min(splits.train.len()))?;
    let net = XUnetConfig {
        widths: cfg.xunet.widths,
        slu_a: cfg.xunet.slu_a,
    };
    let mut xunet = build_xunet(subset.image_shape(), &net, &mut Rng::new(cfg.seed).fork(1), cfg.float_mode)?;
    prepare_out(cfg)?;
    let log = train::train_xunet(&mut xunet, &classifier, &subset, &cfg.xunet_train_config())?;
    let path = cfg.xunet_path();
    save_checkpoint(&xunet, &path)?;
    log.write_csv(&cfg.out.join("xunet_log.csv"))?;
    let (first, last) = (log.first().expect("epochs >= 1"), log.last().expect("epochs >= 1"));
    println!(
        "train-xunet: {} epochs on {} samples, loss {:.4} -> {:.4} -> {}",
        cfg.xunet.epochs,
        subset.len(),
        first.total,
        last.total,
        path.display()
    );
    Ok(())
}

fn xunet_if_needed(cfg: &RunConfig, methods: &[&str]) -> Result<Option<Arc<ModelGraph>>> {
    if methods.iter().any(|m| m.contains("xunet")) {
        Ok(Some(Arc::new(load_model(&cfg.xunet_path(), "xunet checkpoint", cfg)?)))
    } else {
        Ok(None)
    }
}

pub fn attack(cfg: &RunConfig) -> Result<()> {
    if let Some(p) = &cfg.run.mask_file {
        require_file(p, "mask file")?;
    }
    let splits = load_splits(cfg)?;
    let model = load_classifier(cfg, &splits.eval)?;
    let eval = &splits.eval;
    let mask = match &cfg.run.mask_file {
        Some(p) => {
            let m = load_tensor(p).with_context(|| format!("loading mask file {}", p.display()))?;
            ensure!(
                m.shape() == eval.images.shape(),
                "mask file {} has shape {:?} but the evaluation images have shape {:?}",
                p.display(),
                m.shape(),
                eval.images.shape()
            );
            Some(m)
        }
        None => None,
    };
    let (name, batch) = match mask {
        Some(m) => ("masked-pgd(file)".to_string(), masked_pgd(&model, &eval.images, &eval.labels, &m, &cfg.attack)?),
        None => {
            let settings = AttackSettings {
                config: cfg.attack,
                sini: cfg.sini,
                masks: MaskSettings {
                    mute: cfg.mute,
                    xai: cfg.xai.clone(),
                    constant_value: 1.0,
                    xunet: xunet_if_needed(cfg, &[cfg.run.attack.as_str()])?,
                },
            };
            let attack = attack_registry().create(&cfg.run.attack, &settings)?;
            let ids: Vec<usize> = (0..eval.len()).collect();
            (attack.name(), attack.run(&model, &eval.images, &eval.labels, &ids)?)
        }
    };
    prepare_out(cfg)?;
    let path = cfg.out.join("adversarial.xtn");
    save_tensor(&batch.x_adv, &path)?;
    let mut csv = String::from("index,label,pred_before,pred_after\n");
    for i in 0..batch.len() {
        let _ = writeln!(csv, "{i},{},{},{}", batch.labels[i], batch.pred_before[i], batch.pred_after[i]);
    }
    std::fs::write(cfg.out.join("attack.csv"), csv)?;
    println!(
        "attack {name}: accuracy {:.1}% on {} samples -> {}",
        100.0 * batch.accuracy(),
        batch.len(),
        path.display()
    );
    Ok(())
}

pub fn explain(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let model = load_classifier(cfg, &splits.eval)?;
    let explainer = make_explainer(cfg.run.explain_method, &cfg.xai)?;
    prepare_out(cfg)?;
    let maps = (0..splits.eval.len())
        .map(|i| {
            let image = splits.eval.images.index_axis0(i)?;
            Ok(explainer.explain(&model, &image, model.predict(&image)?)?.attribution)
        })
        .collect::<Result<Vec<_>>>()?;
    let path = cfg.out.join("explanations.xtn");
    save_tensor(&Tensor::stack(&maps)?, &path)?;
    println!("explain {}: {} maps -> {}", cfg.run.explain_method, maps.len(), path.display());
    Ok(())
}

fn calibrated_monitor(cfg: &RunConfig, model: &ModelGraph, clean: &Tensor) -> Result<Monitor> {
    let mut monitor = Monitor::new(&cfg.monitor, &cfg.xai)?;
    if let Calibration::CleanPercentile { percentile } = cfg.monitor.calibration {
        let seed = Rng::new(cfg.seed).fork(u64::MAX).next_u64();
        monitor.set_tau(calibrate_threshold(&monitor, model, clean, percentile, seed)?)?;
    }
    Ok(monitor)
}

pub fn monitor(cfg: &RunConfig) -> Result<()> {
    let cand_path = cfg.run.candidates.clone().unwrap_or_else(|| cfg.out.join("adversarial.xtn"));
    require_file(&cand_path, "candidate tensor")?;
    let splits = load_splits(cfg)?;
    let model = load_classifier(cfg, &splits.eval)?;
    let candidates = load_tensor(&cand_path)?;
    ensure!(
        candidates.shape() == splits.eval.images.shape(),
        "candidates {} have shape {:?} but the evaluation images have shape {:?}",
        cand_path.display(),
        candidates.shape(),
        splits.eval.images.shape()
    );
    let monitor = calibrated_monitor(cfg, &model, &splits.eval.images)?;
    prepare_out(cfg)?;
    let mut csv = String::from("index,score,pass\n");
    let mut passed = 0;
    for i in 0..splits.eval.len() {
        let a = monitor.explain(&model, &splits.eval.images.index_axis0(i)?)?;
        let b = monitor.explain(&model, &candidates.index_axis0(i)?)?;
        let v = monitor.judge(explanation_similarity(&a, &b)?.0);
        passed += usize::from(v.pass);
        let _ = writeln!(csv, "{i},{:.6},{}", v.score, v.pass);
    }
    let path = cfg.out.join("monitor.csv");
    std::fs::write(&path, csv)?;
    println!(
        "monitor: tau {:.6}, pass rate {:.1}% on {} samples -> {}",
        monitor.tau(),
        100.0 * passed as f64 / splits.eval.len() as f64,
        splits.eval.len(),
        path.display()
    );
    Ok(())
}

pub fn benchmark(cfg: &RunConfig) -> Result<()> {
    let methods: Vec<&str> = cfg.benchmark.methods.iter().map(String::as_str).collect();
    let splits = load_splits(cfg)?;
    let model = load_classifier(cfg, &splits.eval)?;
    let xunet = xunet_if_needed(cfg, &methods)?;
    prepare_out(cfg)?;
    let inputs = BenchmarkInputs {
        model: &model,
        images: &splits.eval.images,
        labels: &splits.eval.labels,
        calibration: None,
        xunet,
    };
    let report = run_benchmark(&inputs, &cfg.benchmark_config())?;
    report.write_csv(&cfg.out.join("benchmark.csv"))?;
    let table = report.to_table();
    std::fs::write(cfg.out.join("benchmark.txt"), &table)?;
    print!("{table}");
    println!("benchmark: {} methods on {} samples -> {}", report.rows.len(), report.samples, cfg.out.display());
    Ok(())
}

pub fn export_saliency(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let model = load_classifier(cfg, &splits.eval)?;
    let explainer = make_explainer(cfg.run.explain_method, &cfg.xai)?;
    let count = cfg.run.export_count.min(splits.eval.len());
    prepare_out(cfg)?;
    for i in 0..count {
        let image = splits.eval.images.index_axis0(i)?;
        let e = explainer.explain(&model, &image, model.predict(&image)?)?;
        let map = channel_mean(&normalize01_tensor(&e.attribution))?;
        export_pgm(&map, &cfg.out.join(format!("saliency_{i:04}.pgm")))?;
    }
    println!("export-saliency {}: {count} maps -> {}", cfg.run.explain_method, cfg.out.display());
    Ok(())
}

/// `[c, h, w]` to `[h, w]` by averaging channels.
fn channel_mean(t: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        bail!("expected a [c, h, w] map, got {:?}", t.shape());
    };
    let plane = h * w;
    let data = (0..plane)
        .map(|p| (0..c).map(|k| t.data()[k * plane + p]).sum::<f64>() / c as f64)
        .collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}
