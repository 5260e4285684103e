use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xmask::io::save_tensor;
use xmask::tensor::Tensor;

const TINY: &str = r#"
seed = 4

[data]
source = "synthetic"
kind = "blobs"
samples = 90
shape = [1, 8, 8]
classes = 3
train = 60
eval = 30

[model]
kind = "mlp"
hidden = [16]

[train]
epochs = 3
batch = 16
lr = 0.05

[xunet]
widths = [2, 3, 4]
epochs = 2
batch = 6
samples = 12
validation = 0
unroll = 1

[attack]
epsilon = 0.2
alpha = 0.05
steps = 3

[xai]
ig_steps = 8

[benchmark]
methods = ["pgd", "masked-pgd(mute)", "masked-pgd(xunet)", "sinifgsm"]
chunk = 10
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn xmask(cfg: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmask"))
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn benchmark_report_has_one_row_per_method_and_is_reproducible() {
    let (dir, cfg) = setup();
    let out = dir.path().join("a");
    ok(xmask(&cfg, &out, &["train-classifier"]));
    ok(xmask(&cfg, &out, &["train-xunet"]));
    let table = ok(xmask(&cfg, &out, &["benchmark"]));
    assert!(table.contains("masked-pgd(xunet)"));
    let first = std::fs::read(out.join("benchmark.csv")).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), 5, "{text}");
    assert!(text.starts_with("method,accuracy,time_s,stealth,pass_rate,delta_exp,balance,seed,config_hash\n"));

    // a second run from scratch in another directory gives identical bytes
    let again = dir.path().join("b");
    ok(xmask(&cfg, &again, &["train-classifier"]));
    ok(xmask(&cfg, &again, &["train-xunet"]));
    ok(xmask(&cfg, &again, &["--jobs", "2", "benchmark"]));
    assert_eq!(std::fs::read(again.join("benchmark.csv")).unwrap(), first);
    assert_eq!(
        std::fs::read(again.join("classifier_log.csv")).unwrap(),
        std::fs::read(out.join("classifier_log.csv")).unwrap()
    );
}

#[test]
fn staged_commands_write_their_artifacts() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    let line = ok(xmask(&cfg, &out, &["train-classifier"]));
    assert!(line.starts_with("train-classifier:"));
    assert!(ok(xmask(&cfg, &out, &["attack"])).starts_with("attack masked-pgd(mute):"));
    assert!(ok(xmask(&cfg, &out, &["monitor"])).starts_with("monitor: tau"));
    ok(xmask(&cfg, &out, &["explain"]));
    ok(xmask(&cfg, &out, &["export-saliency"]));
    let monitor = std::fs::read_to_string(out.join("monitor.csv")).unwrap();
    assert_eq!(monitor.lines().count(), 31);
    let pgm = std::fs::read(out.join("saliency_0000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5 8 8 255\n"));
    assert_eq!(pgm.len(), 11 + 64);
    assert!(out.join("explanations.xtn").is_file());
}

#[test]
fn wrong_mask_shape_fails_before_writing_outputs() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    ok(xmask(&cfg, &out, &["train-classifier"]));
    let mask = dir.path().join("mask.xtn");
    save_tensor(&Tensor::ones([30, 1, 4, 4]), &mask).unwrap();
    let text = TINY.to_string() + &format!("\n[run]\nmask_file = {:?}\n", mask.to_str().unwrap());
    std::fs::write(&cfg, text).unwrap();
    let o = xmask(&cfg, &out, &["attack"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("shape [30, 1, 4, 4]") && err.contains("[30, 1, 8, 8]"), "{err}");
    assert!(!out.join("adversarial.xtn").exists());

    save_tensor(&Tensor::full([30, 1, 8, 8], 0.5), &mask).unwrap();
    assert!(ok(xmask(&cfg, &out, &["attack"])).starts_with("attack masked-pgd(file):"));
}

#[test]
fn invalid_configs_are_rejected_before_any_work() {
    let (dir, cfg) = setup();
    let out = dir.path().join("o");
    for bad in ["[attack]\nepsilonn = 0.1\n", "[attack]\nepsilon = 0.1\nalpha = 0.3\n", "[run]\nattack = \"sparsefool\"\n"] {
        std::fs::write(&cfg, bad).unwrap();
        let o = xmask(&cfg, &out, &["benchmark"]);
        assert!(!o.status.success(), "{bad}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
        assert!(!out.exists());
    }
    std::fs::write(&cfg, TINY).unwrap();
    let o = xmask(&cfg, &out, &["train-xunet"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("classifier checkpoint"));
}
