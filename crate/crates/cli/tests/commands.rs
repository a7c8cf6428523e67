mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::small_config;
use mfnet_cli::checkpoint::Checkpoint;
use mfnet_cli::commands::{self, CONFIG_FILE, LAST_CHECKPOINT, METRICS_FILE, SWEEP_FILE};
use mfnet_cli::config::DataSource;
use mfnet_cli::metrics::read_metrics;
use mfnet_cli::{CliError, RunConfig};

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = small_config(dir.path());
    a.data_path = dir.path().join("a");
    let mut b = a.clone();
    b.data_path = dir.path().join("b");
    let sa = commands::gen_data(&a).unwrap();
    commands::gen_data(&b).unwrap();
    assert_eq!(sa.train_counts, vec![4; 6]);
    assert_eq!(sa.val_counts, vec![1; 6]);
    let (ta, tb) = (tree(&a.data_path), tree(&b.data_path));
    assert!(ta.len() > 6 * 5 * 8);
    assert_eq!(ta, tb);
}

#[test]
fn zero_clips_per_class_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.count_per_class = 0;
    assert!(matches!(commands::gen_data(&c), Err(CliError::Config(_))));
    assert!(!c.data_path.exists());
}

#[test]
fn flipping_is_refused_on_mirrored_classes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.set("augment.flip", "true").unwrap();
    assert!(commands::train(&c, None).is_err());
}

#[test]
fn motion_needs_two_segments() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.set("sample.k_train", "1").unwrap();
    assert!(c.validate().is_err());
    c.set("motion.variant", "off").unwrap();
    assert!(c.validate().is_ok());
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_config(dir.path());
    let mut b = a.clone();
    b.out_dir = dir.path().join("again");
    let ra = commands::train(&a, None).unwrap();
    let rb = commands::train(&b, None).unwrap();
    assert_eq!(fs::read(&ra.metrics_path).unwrap(), fs::read(&rb.metrics_path).unwrap());
    assert_eq!(fs::read(&ra.checkpoint_path).unwrap(), fs::read(&rb.checkpoint_path).unwrap());
    let (hash, rows) = read_metrics(&ra.metrics_path).unwrap();
    assert_eq!(hash, a.hash());
    assert_eq!(rows.len(), 2 * a.epochs);
    assert_eq!(rows.last().unwrap().lr, a.lr * a.lr_factor);
    assert_eq!(RunConfig::load(&a.out_dir.join(CONFIG_FILE)).unwrap(), a);
    for e in 1..=3 {
        assert!(a.out_dir.join(format!("checkpoint_epoch{e:03}.bin")).exists());
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_config(dir.path());
    let mut b = a.clone();
    b.out_dir = dir.path().join("threaded");
    b.workers = 2;
    let ra = commands::train(&a, None).unwrap();
    let rb = commands::train(&b, None).unwrap();
    assert_eq!(fs::read(&ra.metrics_path).unwrap(), fs::read(&rb.metrics_path).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full = small_config(dir.path());
    commands::train(&full, None).unwrap();

    let mut part = full.clone();
    part.out_dir = dir.path().join("resumed");
    part.epochs = 2;
    commands::train(&part, None).unwrap();
    part.epochs = 3;
    let resume = part.out_dir.join(LAST_CHECKPOINT);
    let summary = commands::train(&part, Some(&resume)).unwrap();
    assert_eq!(summary.start_epoch, 2);
    for file in [METRICS_FILE, LAST_CHECKPOINT] {
        assert_eq!(
            fs::read(full.out_dir.join(file)).unwrap(),
            fs::read(part.out_dir.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let summary = commands::train(&c, None).unwrap();
    let bytes = fs::read(&summary.checkpoint_path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let model = commands::load_model(&c, &summary.checkpoint_path).unwrap();
    assert!(ck.diff(&model).is_empty());
    let mut opt = mfnet::tensor::SgdState::new(&model.registry, c.lr, c.momentum, c.weight_decay).unwrap();
    ck.restore(&model, Some(&mut opt)).unwrap();
    let again = Checkpoint::capture(ck.config.clone(), ck.epoch, &model, &opt);
    assert_eq!(again.to_bytes(), bytes);
}

#[test]
fn checkpoint_from_another_architecture_is_itemized() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let summary = commands::train(&c, None).unwrap();
    let mut other = c.clone();
    other.set("motion.variant", "sum").unwrap();
    match commands::load_model(&other, &summary.checkpoint_path) {
        Err(CliError::Mismatch(items)) => assert!(!items.is_empty()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint accepted"),
    }
}

#[test]
fn eval_reproduces_the_final_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    let summary = commands::train(&c, None).unwrap();
    c.set("eval.sweep", "2,3,4").unwrap();
    c.out_dir = dir.path().join("eval");
    let ev = commands::eval(&c, &summary.checkpoint_path).unwrap();
    let last = summary.last_eval.unwrap();
    assert_eq!(ev.report.top1, last.top1);
    assert_eq!(ev.report.loss, last.loss);
    assert_eq!(ev.sweep.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 3, 4]);
    let sweep = fs::read_to_string(c.out_dir.join(SWEEP_FILE)).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let confusion = fs::read_to_string(c.out_dir.join(commands::CONFUSION_FILE)).unwrap();
    assert_eq!(confusion.lines().count(), 7);
}

#[test]
fn folder_data_trains_like_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let mem = small_config(dir.path());
    commands::gen_data(&mem).unwrap();
    let mut folder = mem.clone();
    folder.data_source = DataSource::Folder;
    folder.out_dir = dir.path().join("folder_run");
    let a = commands::train(&mem, None).unwrap();
    let b = commands::train(&folder, None).unwrap();
    let rows = |p: &Path| read_metrics(p).unwrap().1;
    assert_eq!(rows(&a.metrics_path), rows(&b.metrics_path));
}

#[test]
fn binary_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let config_path = dir.path().join("small.txt");
    fs::write(&config_path, c.to_text()).unwrap();
    let bin = env!("CARGO_BIN_EXE_mfnet");
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .arg("--config")
            .arg(&config_path)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
    };
    let (ok, _, err) = run(&["train", "--set", "optim.epochs=1", "--motion", "sum"]);
    assert!(ok, "{err}");
    let ck = c.out_dir.join(LAST_CHECKPOINT);
    let (ok, out, err) = run(&["eval", "--motion", "sum", "--checkpoint", ck.to_str().unwrap()]);
    assert!(ok, "{err}");
    assert!(out.contains("top1"), "{out}");
    let (ok, _, err) = run(&["eval", "--motion", "concat", "--checkpoint", ck.to_str().unwrap()]);
    assert!(!ok);
    assert!(!err.is_empty());
    let (ok, _, err) = run(&["train", "--set", "no.such.key=1"]);
    assert!(!ok && err.contains("no.such.key"), "{err}");
}
