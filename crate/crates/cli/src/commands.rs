//! The four subcommands as library functions returning their results.

use std::fs;
use std::path::{Path, PathBuf};

use mfnet::backbone::{build_model, ModelGraph};
use mfnet::data::{
    generate_synthetic, load_frame_folder, split_by_id_hash, write_frame_folder, ClipSource, InMemoryDataset,
    MotionProgram,
};
use mfnet::gradcheck::{self, GradcheckSettings, OpReport};
use mfnet::tensor::SgdState;
use mfnet::tsn::{evaluate, train_epoch, EpochMetrics, EvalReport};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics::{MetricsFile, MetricsRow};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.bin";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

const EVAL_BATCH: usize = 32;

/// Train and validation clips plus class names.
pub struct Splits {
    pub train: Box<dyn ClipSource>,
    pub val: Box<dyn ClipSource>,
    pub class_names: Vec<String>,
}

fn synthetic_splits(config: &RunConfig) -> Result<(InMemoryDataset, InMemoryDataset)> {
    let samples = generate_synthetic(&config.synthetic(), config.count_per_class)?;
    let (mut train, mut val) = split_by_id_hash(samples, config.val_fraction)?;
    // same clip order as the frame-folder loader
    train.sort_by(|a, b| a.id.cmp(&b.id));
    val.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((InMemoryDataset::new(train), InMemoryDataset::new(val)))
}

pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    match config.data_source {
        DataSource::Synthetic => {
            let (train, val) = synthetic_splits(config)?;
            Ok(Splits {
                train: Box::new(train),
                val: Box::new(val),
                class_names: config.synthetic().class_names(),
            })
        }
        DataSource::Folder => {
            let mut parts = Vec::new();
            for split in ["train", "val"] {
                let load = load_frame_folder(&config.data_path.join(split))?;
                for e in &load.skipped {
                    log::warn!("{e}");
                }
                parts.push(load.dataset);
            }
            let val = parts.pop().unwrap();
            let train = parts.pop().unwrap();
            let mut class_names = train.class_names.clone();
            if class_names.is_empty() {
                class_names = (0..config.num_classes).map(|c| format!("class{c}")).collect();
            }
            if class_names.len() != config.num_classes {
                return Err(CliError::Config(format!(
                    "dataset has {} classes, arch.num_classes={}",
                    class_names.len(),
                    config.num_classes
                )));
            }
            for (name, ds) in [("train", &train), ("val", &val)] {
                if let Some(i) = (0..ds.len()).find(|&i| ds.label(i) >= config.num_classes) {
                    return Err(CliError::Config(format!(
                        "{name} clip {} has label {} >= {}",
                        ds.id(i),
                        ds.label(i),
                        config.num_classes
                    )));
                }
            }
            Ok(Splits {
                train: Box::new(train),
                val: Box::new(val),
                class_names,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSummary {
    pub root: PathBuf,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
}

/// Writes the synthetic dataset to `<data.path>/{train,val}`.
pub fn gen_data(config: &RunConfig) -> Result<GenSummary> {
    config.validate()?;
    let spec = config.synthetic();
    let (train, val) = synthetic_splits(config)?;
    let names = spec.class_names();
    let root = config.data_path.clone();
    write_frame_folder(&root.join("train"), &train.samples, &names)?;
    write_frame_folder(&root.join("val"), &val.samples, &names)?;
    let classes = MotionProgram::ALL.len();
    Ok(GenSummary {
        root,
        train_counts: train.class_counts(classes),
        val_counts: val.class_counts(classes),
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub start_epoch: usize,
    pub last_train: Option<EpochMetrics>,
    pub last_eval: Option<EvalReport>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn prepare_out_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out_dir).map_err(|e| CliError::io(&config.out_dir, e))?;
    let path = config.out_dir.join(CONFIG_FILE);
    fs::write(&path, config.to_text()).map_err(|e| CliError::io(&path, e))
}

/// Runs training on already loaded splits, resuming from `resume` if given.
pub fn train_on(config: &RunConfig, splits: &Splits, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let model = build_model::<f32>(&config.arch())?;
    let mut optimizer = SgdState::new(&model.registry, config.lr, config.momentum, config.weight_decay)?;
    let mut start_epoch = 0;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        ck.restore(&model, Some(&mut optimizer))?;
        start_epoch = ck.epoch as usize;
        if start_epoch > config.epochs {
            return Err(CliError::Config(format!(
                "checkpoint already has {start_epoch} epochs, optim.epochs={}",
                config.epochs
            )));
        }
    }
    prepare_out_dir(config)?;
    let metrics_path = config.out_dir.join(METRICS_FILE);
    let mut metrics = MetricsFile::open(&metrics_path, &config.hash(), resume.map(|_| start_epoch))?;
    let checkpoint_path = config.out_dir.join(LAST_CHECKPOINT);
    let pipeline = config.pipeline();
    let options = config.train_options();
    let schedule = config.schedule();
    let (mut last_train, mut last_eval) = (None, None);
    for epoch in start_epoch..config.epochs {
        let lr = schedule.at(epoch);
        optimizer.learning_rate = lr;
        let m = train_epoch(&model, splits.train.as_ref(), &pipeline, &options, &mut optimizer, epoch)?;
        let r = evaluate(&model, splits.val.as_ref(), &pipeline, config.k_eval, EVAL_BATCH, config.workers)?;
        log::info!(
            "epoch {epoch}: train loss {:.4} top1 {:.4} | val loss {:.4} top1 {:.4} | lr {lr}",
            m.loss,
            m.top1,
            r.loss,
            r.top1
        );
        for (split, loss, top1, top5) in [("train", m.loss, m.top1, m.top5), ("val", r.loss, r.top1, r.top5)] {
            metrics.append(&MetricsRow {
                epoch,
                split: split.into(),
                loss,
                top1,
                top5,
                lr,
            })?;
        }
        let done = epoch + 1;
        let ck = Checkpoint::capture(config.canonical_text(), done as u64, &model, &optimizer);
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            ck.save(&config.out_dir.join(format!("checkpoint_epoch{done:03}.bin")))?;
        }
        ck.save(&checkpoint_path)?;
        last_train = Some(m);
        last_eval = Some(r);
    }
    if start_epoch == config.epochs {
        Checkpoint::capture(config.canonical_text(), start_epoch as u64, &model, &optimizer).save(&checkpoint_path)?;
    }
    Ok(TrainSummary {
        start_epoch,
        last_train,
        last_eval,
        metrics_path,
        checkpoint_path,
    })
}

pub fn train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let splits = load_splits(config)?;
    train_on(config, &splits, resume)
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub sweep: Vec<(usize, EvalReport)>,
    pub class_names: Vec<String>,
}

pub fn load_model(config: &RunConfig, checkpoint: &Path) -> Result<ModelGraph<f32>> {
    let model = build_model::<f32>(&config.arch())?;
    Checkpoint::load(checkpoint)?.restore(&model, None)?;
    Ok(model)
}

/// Evaluates at `sample.k_eval` and at every `eval.sweep` value.
pub fn eval_on(config: &RunConfig, model: &ModelGraph<f32>, splits: &Splits) -> Result<EvalSummary> {
    let pipeline = config.pipeline();
    let val = splits.val.as_ref();
    let report = evaluate(model, val, &pipeline, config.k_eval, EVAL_BATCH, config.workers)?;
    let sweep = config
        .eval_sweep
        .iter()
        .map(|&k| Ok((k, evaluate(model, val, &pipeline, k, EVAL_BATCH, config.workers)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        report,
        sweep,
        class_names: splits.class_names.clone(),
    })
}

pub fn eval(config: &RunConfig, checkpoint: &Path) -> Result<EvalSummary> {
    config.validate()?;
    let model = load_model(config, checkpoint)?;
    let splits = load_splits(config)?;
    let summary = eval_on(config, &model, &splits)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| CliError::io(&config.out_dir, e))?;
    let path = config.out_dir.join(CONFUSION_FILE);
    fs::write(&path, confusion_csv(&summary.report, &summary.class_names)).map_err(|e| CliError::io(&path, e))?;
    if !summary.sweep.is_empty() {
        let path = config.out_dir.join(SWEEP_FILE);
        fs::write(&path, sweep_csv(&summary.sweep)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(summary)
}

/// Rows are true classes, columns predictions.
pub fn confusion_csv(report: &EvalReport, class_names: &[String]) -> String {
    let mut s = String::from("true\\pred");
    for name in class_names {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (name, row) in class_names.iter().zip(&report.confusion) {
        s.push_str(name);
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn sweep_csv(sweep: &[(usize, EvalReport)]) -> String {
    let mut s = String::from("k_eval,loss,top1,top5\n");
    for (k, r) in sweep {
        s.push_str(&format!("{k},{},{},{}\n", r.loss, r.top1, r.top5));
    }
    s
}

/// Runs every op suite and the toy full graphs.
pub fn gradcheck(config: &RunConfig) -> Result<Vec<OpReport>> {
    Ok(gradcheck::run_all(&GradcheckSettings::default(), config.seed)?)
}

/// A [`CliError::Gradcheck`] naming each failing op and seed, if any.
pub fn gradcheck_verdict(reports: &[OpReport]) -> Result<()> {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} (worst {:.3e} at seed {})", r.op, r.outcome.worst, r.worst_seed))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failed))
    }
}

pub fn gradcheck_table(reports: &[OpReport]) -> String {
    let mut s = String::from("op,worst_rel_error,tolerance,checked,kinks,status\n");
    for r in reports {
        s.push_str(&format!(
            "{},{:.3e},{:e},{},{},{}\n",
            r.op,
            r.outcome.worst,
            r.tolerance,
            r.outcome.checked,
            r.outcome.kinks,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
