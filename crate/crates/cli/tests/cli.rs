use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use drmm::data::{parse_idx_images, parse_idx_labels, read_trace, write_idx_f32, write_idx_labels};
use drmm::model::{top_down, Checkpoint, GenerativeConfig, LatentTrace, TopDownOptions, Unpool};
use drmm::tensor::Tensor;
use tempfile::TempDir;

fn drmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drmm"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRMM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

const SMALL_RUN: &[&str] = &["train", "--preset", "convtiny-ci", "--synthetic-count", "600", "--n-labeled", "100", "--quiet"];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = SMALL_RUN.to_vec();
    args.extend_from_slice(&["--out", out]);
    args.extend_from_slice(extra);
    drmm(dir, &args)
}

#[test]
fn dry_run_prints_preset_table_values() {
    let tmp = TempDir::new().unwrap();
    let o = drmm(tmp.path(), &["train", "--preset", "mnist-convsmall", "--format", "synthetic", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    let t = cfg["train"].as_table().unwrap();
    let f = |k: &str| t[k].as_float().unwrap();
    assert_eq!([f("alpha_h"), f("alpha_rc"), f("alpha_kl"), f("alpha_nn")], [1.0, 0.2, 1.0, 1.0]);
    assert_eq!([f("lr_start"), f("lr_end")], [0.2, 0.0001]);
    assert_eq!(t["batch_size"].as_integer(), Some(100));
    assert_eq!(t["epochs"].as_integer(), Some(500));
    assert_eq!(cfg["data"]["n_labeled"].as_integer(), Some(100));

    let o = drmm(tmp.path(), &["train", "--preset", "cifar10-convlarge", "--format", "synthetic", "--dry-run"]);
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    let t = cfg["train"].as_table().unwrap();
    assert_eq!([t["alpha_rc"].as_float(), t["alpha_kl"].as_float(), t["alpha_nn"].as_float()], [Some(0.5), Some(0.2), Some(0.5)]);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.toml"), "preset = \"convtiny-ci\"\nseed = 5\ntrain.epochs = 7\ntrain.alpha_kl = 0.5\n").unwrap();
    let o = drmm(tmp.path(), &["train", "--config", "run.toml", "--epochs", "2", "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(cfg["train"]["epochs"].as_integer(), Some(2));
    assert_eq!(cfg["train"]["alpha_kl"].as_float(), Some(0.5));
    assert_eq!(cfg["seed"].as_integer(), Some(5));
}

#[test]
fn bad_configuration_exits_2_before_compute() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("run.toml"), "preset = \"convtiny-ci\"\ntrain.epoch = 2\n").unwrap();
    let o = drmm(tmp.path(), &["train", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
    for extra in [&["--batch-size", "7"][..], &["--alpha-rc", "-1"], &["--n-labeled", "15"], &["--unpool", "bilinear"]] {
        let o = train(tmp.path(), "never", extra);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
    assert!(!tmp.path().join("never").exists());
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_evaluates() {
    let tmp = TempDir::new().unwrap();
    let o = train(tmp.path(), "run", &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    let ck = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    assert_eq!(ck.step, 0);
    let summary: toml::Table = fs::read_to_string(run.join("summary.toml")).unwrap().parse().unwrap();
    assert_eq!(summary["status"].as_str(), Some("completed"));
    assert_eq!(summary["epochs_completed"].as_integer(), Some(0));
    assert_eq!(summary["test_items"].as_integer(), Some(100));
    assert!(summary["test_error"].as_float().is_some());
    assert_eq!(fs::read_to_string(run.join("metrics.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn training_is_reproducible_and_eval_agrees() {
    let tmp = TempDir::new().unwrap();
    let stable = ["--epochs", "2", "--lr-start", "0.005", "--lr-end", "0.001", "--checkpoint-every", "1"];
    let a = train(tmp.path(), "a", &stable);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = train(tmp.path(), "b", &stable);
    assert!(b.status.success(), "{}", stderr(&b));
    for f in ["metrics.tsv", "epochs.tsv", "final.ckpt", "checkpoints/epoch-0001.ckpt"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(tmp.path().join("a/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 10);
    assert_eq!(Checkpoint::load(&tmp.path().join("a/final.ckpt")).unwrap().step, 20);

    let trained = field(&stdout(&a), "test_error");
    let e = drmm(tmp.path(), &["eval", "--checkpoint", "a/final.ckpt", "--config", "a/config.toml"]);
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(field(&stdout(&e), "test_error"), trained);
    assert_eq!(field(&stdout(&e), "items"), "100");
    let e2 = drmm(tmp.path(), &["eval", "--checkpoint", "a/final.ckpt", "--synthetic-count", "600"]);
    assert_eq!(field(&stdout(&e2), "test_error"), trained);
}

#[test]
fn output_root_prefixes_relative_paths() {
    let tmp = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_drmm"))
        .args(["sample", "--preset", "convtiny-ci", "--count", "2", "--out", "s"])
        .current_dir(tmp.path())
        .env("DRMM_OUTPUT_ROOT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("root/s/images.idx").is_file());
}

#[test]
fn corrupt_or_mismatched_checkpoints_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert!(train(tmp.path(), "run", &["--epochs", "0"]).status.success());
    let mut bytes = fs::read(tmp.path().join("run/final.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(tmp.path().join("bad.ckpt"), &bytes).unwrap();
    let o = drmm(tmp.path(), &["eval", "--checkpoint", "bad.ckpt", "--synthetic-count", "60"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = drmm(tmp.path(), &["sample", "--checkpoint", "bad.ckpt", "--count", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let images = Tensor::<f32>::zeros(&[4, 28, 28, 1]);
    write_idx_f32(&tmp.path().join("i.idx"), &images).unwrap();
    write_idx_labels(&tmp.path().join("l.idx"), &[0, 1, 2, 3]).unwrap();
    let o = drmm(tmp.path(), &["eval", "--checkpoint", "run/final.ckpt", "--test-images", "i.idx", "--test-labels", "l.idx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[28, 28, 1]"), "{}", stderr(&o));
}

#[test]
fn sampling_is_deterministic_and_round_trips() {
    let tmp = TempDir::new().unwrap();
    let args = |out: &'static str| ["sample", "--preset", "convtiny-ci", "--init-seed", "3", "--count", "6", "--seed", "11", "--out", out];
    assert!(drmm(tmp.path(), &args("a")).status.success());
    assert!(drmm(tmp.path(), &args("b")).status.success());
    for f in ["images.idx", "labels.idx", "latents.trace"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    let images = parse_idx_images(&fs::read(tmp.path().join("a/images.idx")).unwrap()).unwrap();
    assert_eq!(images.shape(), &[6, 32, 32, 1]);
    let labels = parse_idx_labels(&fs::read(tmp.path().join("a/labels.idx")).unwrap()).unwrap();
    let trace: LatentTrace<f32> = read_trace(&tmp.path().join("a/latents.trace")).unwrap();
    assert_eq!(trace.classes, labels);

    // Re-rendering the recorded latents reproduces the noise-free images.
    let arch = drmm::model::Preset::ConvTinyCi.arch();
    let params = drmm::model::ModelParams::init(&arch, 3);
    let vectors = GenerativeConfig::uniform(10).class_vectors::<f32>(&trace.classes, 10).unwrap();
    let (again, _) = top_down(&params, &arch, &vectors, &trace, TopDownOptions::with_unpool(Unpool::Switch)).unwrap();
    let worst = again.data().iter().zip(images.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn zero_samples_give_valid_empty_files() {
    let tmp = TempDir::new().unwrap();
    let o = drmm(tmp.path(), &["sample", "--preset", "convtiny-ci", "--count", "0", "--out", "s"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let images = parse_idx_images(&fs::read(tmp.path().join("s/images.idx")).unwrap()).unwrap();
    assert_eq!(images.shape(), &[0, 32, 32, 1]);
    assert!(parse_idx_labels(&fs::read(tmp.path().join("s/labels.idx")).unwrap()).unwrap().is_empty());
}

#[test]
fn probe_reports_are_deterministic_and_need_sidecars() {
    let tmp = TempDir::new().unwrap();
    assert!(train(tmp.path(), "run", &["--epochs", "0"]).status.success());
    assert!(drmm(tmp.path(), &["synth", "--count", "300", "--seed", "4", "--out", "syn"]).status.success());
    let args = ["probe", "--checkpoint", "run/final.ckpt", "--images", "syn/images.idx", "--labels", "syn/labels.idx", "--latents", "syn/latents.bin", "--pooled"];
    let a = drmm(tmp.path(), &args);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = drmm(tmp.path(), &args);
    assert_eq!(a.stdout, b.stdout);
    let report = stdout(&a);
    assert_eq!(report.lines().next(), Some("layer\tlatent\terror\tchance\tcontrol"));
    assert_eq!(report.lines().count(), 1 + 6 * 6);

    fs::remove_file(tmp.path().join("syn/latents.bin")).unwrap();
    let o = drmm(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("latents.bin"));
}

#[test]
fn verify_runs_selected_suites_and_flags_faults() {
    let tmp = TempDir::new().unwrap();
    let o = drmm(tmp.path(), &["verify", "--suite", "shapes", "--suite", "losses"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("PASS shapes") && lines[1].starts_with("PASS losses"), "{lines:?}");

    let o = drmm(tmp.path(), &["verify", "--suite", "paths", "--fault", "deconv-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL paths") && stdout(&o).contains("counterexample"), "{}", stdout(&o));

    let o = drmm(tmp.path(), &["verify", "--suite", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
