//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mfnet::backbone::{build_model, ArchConfig, Mode, ModelGraph, MotionConfig, MOTION_STAGES};
use mfnet::data::paired_class;
use mfnet::motion::{shift, DirectionSet, Displacement, FusionVariant};
use mfnet::tsn::{sample_indices, EvalReport, SampleMode, SegmentPlan};
use mfnet::util::rng_for;
use mfnet::Tensor;
use mfnet_cli::checkpoint::Checkpoint;
use mfnet_cli::commands::{self, Splits, LAST_CHECKPOINT, METRICS_FILE};
use mfnet_cli::RunConfig;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Depthwise 3×3 cross-correlation with a one-hot kernel, written out as loops.
fn one_hot_depthwise(x: &[f64], shape: [usize; 4], d: Displacement) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let mut kernel = [[0.0f64; 3]; 3];
    kernel[(1 + d.dy()) as usize][(1 + d.dx()) as usize] = 1.0;
    let mut out = vec![0.0; x.len()];
    for plane in 0..b * c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        let iy = y as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += k * x[(plane * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(plane * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(2024, &[1]);
    let mut mismatches = 0;
    for _ in 0..100 {
        let shape = [
            rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(1..=7),
            rng.random_range(1..=7),
        ];
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x = Tensor::new(data.clone(), &shape).unwrap();
        for &d in DirectionSet::default().as_slice() {
            let got = shift(&x, d).unwrap().to_vec();
            let want = one_hot_depthwise(&data, shape, d);
            if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("500 shift/reference pairs, {mismatches} mismatched, {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let reports = match commands::gradcheck(&RunConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradcheck error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = |pred: &dyn Fn(&str) -> bool| {
        reports
            .iter()
            .filter(|r| pred(&r.op))
            .map(|r| r.outcome.worst)
            .fold(0.0f64, f64::max)
    };
    let ops = worst(&|op| !op.starts_with("full_graph") && !op.starts_with("motion_block"));
    let graph = worst(&|op| op.starts_with("full_graph"));
    let both_graphs = ["full_graph_sum", "full_graph_concat"]
        .iter()
        .all(|name| reports.iter().any(|r| r.op == *name && r.outcome.checked > 0));
    let pass = commands::gradcheck_verdict(&reports).is_ok()
        && ops <= 1e-4
        && graph <= 1e-3
        && both_graphs
        && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!("{} suites, worst op {ops:.2e}, worst full graph {graph:.2e}, {elapsed:.1?}", reports.len()),
    )
}

struct Trained {
    label: &'static str,
    report: EvalReport,
    sweep: Vec<(usize, EvalReport)>,
}

fn train_and_eval(label: &'static str, config: &RunConfig, splits: &Splits) -> Result<Trained, String> {
    let start = Instant::now();
    let summary = commands::train_on(config, splits, None).map_err(|e| e.to_string())?;
    let model = commands::load_model(config, &summary.checkpoint_path).map_err(|e| e.to_string())?;
    let ev = commands::eval_on(config, &model, splits).map_err(|e| e.to_string())?;
    eprintln!(
        "  trained {label}: val top1 {:.4}, train top1 {:.4}, {:.0?}",
        ev.report.top1,
        summary.last_train.map_or(f64::NAN, |m| m.top1),
        start.elapsed()
    );
    Ok(Trained {
        label,
        report: ev.report,
        sweep: ev.sweep,
    })
}

fn pair_rates(report: &EvalReport) -> Vec<f64> {
    (0..report.confusion.len()).map(|c| report.confusion_rate(c, paired_class(c))).collect()
}

fn fmt_rates(r: &[f64]) -> String {
    r.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/")
}

/// Trains the four synthetic models shared by criteria 3 to 5.
fn synthetic_models(root: &Path) -> Result<[Trained; 4], String> {
    let base = RunConfig {
        out_dir: root.join("unused"),
        ..RunConfig::default()
    };
    let splits = commands::load_splits(&base).map_err(|e| e.to_string())?;
    let with = |name: &str, sets: &[&str]| {
        let mut c = base.clone();
        c.out_dir = root.join(name);
        for s in sets {
            c.set_assignment(s).unwrap();
        }
        c
    };
    Ok([
        train_and_eval("baseline K=5", &with("baseline", &["motion.variant=off"]), &splits)?,
        train_and_eval(
            "MFNet-C K=5",
            &with("concat5", &["motion.variant=concat", "eval.sweep=2,3,4,5,6,7,8,9,10"]),
            &splits,
        )?,
        train_and_eval("MFNet-S K=5", &with("sum5", &["motion.variant=sum"]), &splits)?,
        train_and_eval(
            "MFNet-C K=3",
            &with("concat3", &["motion.variant=concat", "sample.k_train=3", "sample.k_eval=3"]),
            &splits,
        )?,
    ])
}

fn criterion_3(models: &[Trained; 4]) -> Outcome {
    let [base, c, s, _] = models;
    let base_pairs = pair_rates(&base.report);
    let (c_pairs, s_pairs) = (pair_rates(&c.report), pair_rates(&s.report));
    let pass = base.report.top1 <= 0.60
        && c.report.top1 >= 0.90
        && s.report.top1 >= 0.90
        && c_pairs.iter().chain(&s_pairs).all(|r| *r < 0.10)
        && base_pairs.iter().all(|r| *r >= 0.35);
    outcome(
        pass,
        format!(
            "top1 {} {:.3}, {} {:.3}, {} {:.3}; within-pair confusion baseline {} MFNet-C {} MFNet-S {}",
            base.label,
            base.report.top1,
            c.label,
            c.report.top1,
            s.label,
            s.report.top1,
            fmt_rates(&base_pairs),
            fmt_rates(&c_pairs),
            fmt_rates(&s_pairs)
        ),
    )
}

fn criterion_4(models: &[Trained; 4]) -> Outcome {
    let [base, c5, _, c3] = models;
    let pass = c5.report.top1 >= c3.report.top1 - 0.02 && c3.report.top1 >= base.report.top1 + 0.25;
    outcome(
        pass,
        format!(
            "MFNet-C K=5 {:.3}, K=3 {:.3}, baseline {:.3}",
            c5.report.top1, c3.report.top1, base.report.top1
        ),
    )
}

fn criterion_5(models: &[Trained; 4]) -> Outcome {
    let sweep = &models[1].sweep;
    let best = |pred: &dyn Fn(usize) -> bool| {
        sweep
            .iter()
            .filter(|(k, _)| pred(*k))
            .map(|(_, r)| r.top1)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let covered = (2..=10).all(|k| sweep.iter().any(|(s, _)| *s == k));
    let (high, low) = (best(&|k| k >= 5), best(&|k| k < 5));
    let curve = sweep
        .iter()
        .map(|(k, r)| format!("{k}:{:.3}", r.top1))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(covered && high >= low, format!("top1 by K_eval {curve}"))
}

fn zero_sum_compression(model: &ModelGraph<f32>) {
    for stage in 0..MOTION_STAGES {
        if let Some(block) = model.motion_block(stage) {
            block.compress.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn criterion_6() -> Outcome {
    let arch = |motion| ArchConfig { motion, ..ArchConfig::default() };
    let mut rng = rng_for(6, &[]);
    let x = Tensor::new(
        (0..2 * 5 * 3 * 64 * 64).map(|_| rng.random_range(-2.0..2.0)).collect(),
        &[2, 5, 3, 64, 64],
    )
    .unwrap();
    let base = build_model::<f32>(&arch(MotionConfig::off())).unwrap();
    let (_, base_trace) = base.forward_traced(&x, Mode::Eval, &mut rng_for(0, &[])).unwrap();
    let mut shapes_ok = true;
    for variant in [FusionVariant::Sum, FusionVariant::Concat] {
        let m = build_model::<f32>(&arch(MotionConfig::all(variant, 4))).unwrap();
        let (_, trace) = m.forward_traced(&x, Mode::Eval, &mut rng_for(0, &[])).unwrap();
        shapes_ok &= trace.len() == base_trace.len()
            && trace.iter().zip(&base_trace).all(|(a, b)| a.shape() == b.shape());
    }
    let sum = build_model::<f32>(&arch(MotionConfig::all(FusionVariant::Sum, 4))).unwrap();
    zero_sum_compression(&sum);
    let mut identical = true;
    for mode in [Mode::Train, Mode::Eval] {
        let a = base.forward_snippets(&x, mode, &mut rng_for(1, &[])).unwrap().to_vec();
        let b = sum.forward_snippets(&x, mode, &mut rng_for(1, &[])).unwrap().to_vec();
        identical &= a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    outcome(
        shapes_ok && identical,
        format!(
            "{} stage shapes match: {shapes_ok}; zeroed Sum equals baseline bitwise in train and eval: {identical}",
            base_trace.len()
        ),
    )
}

fn criterion_7(root: &Path) -> Result<Outcome, String> {
    let err = |e: mfnet_cli::CliError| e.to_string();
    let a = common::small_config(&root.join("a"));
    let mut b = a.clone();
    b.out_dir = root.join("b");
    commands::train(&a, None).map_err(err)?;
    commands::train(&b, None).map_err(err)?;
    let read = |dir: &Path, f: &str| fs::read(dir.join(f)).unwrap();
    let same_metrics = read(&a.out_dir, METRICS_FILE) == read(&b.out_dir, METRICS_FILE);

    let bytes = read(&a.out_dir, LAST_CHECKPOINT);
    let ck = Checkpoint::from_bytes(&bytes)?;
    let model = commands::load_model(&a, &a.out_dir.join(LAST_CHECKPOINT)).map_err(err)?;
    let mut opt = mfnet::tensor::SgdState::new(&model.registry, a.lr, a.momentum, a.weight_decay).map_err(|e| e.to_string())?;
    ck.restore(&model, Some(&mut opt)).map_err(err)?;
    let round_trip = Checkpoint::capture(ck.config.clone(), ck.epoch, &model, &opt).to_bytes() == bytes;

    let mut part = a.clone();
    part.out_dir = root.join("resumed");
    part.epochs = a.epochs - 1;
    commands::train(&part, None).map_err(err)?;
    part.epochs = a.epochs;
    commands::train(&part, Some(&part.out_dir.join(LAST_CHECKPOINT))).map_err(err)?;
    let resumed = read(&a.out_dir, METRICS_FILE) == read(&part.out_dir, METRICS_FILE)
        && read(&a.out_dir, LAST_CHECKPOINT) == read(&part.out_dir, LAST_CHECKPOINT);
    Ok(outcome(
        same_metrics && round_trip && resumed,
        format!("identical metrics: {same_metrics}; checkpoint round trip: {round_trip}; resume matches: {resumed}"),
    ))
}

fn criterion_8() -> Outcome {
    let mut eval_ok = true;
    for n in 1..60usize {
        for k in 1..12usize {
            let (base, rem) = (n / k, n % k);
            let want: Vec<usize> = (0..k)
                .map(|s| {
                    let start = s * base + s.min(rem);
                    let len = base + usize::from(s < rem);
                    if len == 0 {
                        start.min(n - 1)
                    } else {
                        start + len / 2
                    }
                })
                .collect();
            for seed in [0, 7, 99] {
                let plan = SegmentPlan::eval(k);
                eval_ok &= sample_indices(n, &plan, &mut rng_for(seed, &[])) == want;
            }
            if n % k == 0 {
                eval_ok &= want.windows(2).all(|p| p[1] - p[0] == n / k);
            }
        }
    }
    let mut worst = 0.0f64;
    for (n, k) in [(16usize, 5usize), (7, 3), (10, 4)] {
        let plan = SegmentPlan { k, mode: SampleMode::Train, seed: 3 };
        let mut rng = rng_for(8, &[n as u64, k as u64]);
        let mut counts = vec![0usize; n];
        let draws = 10_000;
        for _ in 0..draws {
            for i in sample_indices(n, &plan, &mut rng) {
                counts[i] += 1;
            }
        }
        let (base, rem) = (n / k, n % k);
        for s in 0..k {
            let start = s * base + s.min(rem);
            let len = base + usize::from(s < rem);
            let expected = draws as f64 / len as f64;
            for c in &counts[start..start + len] {
                worst = worst.max((*c as f64 - expected).abs() / expected);
            }
        }
    }
    outcome(
        eval_ok && worst <= 0.05,
        format!("eval equidistant and seed-free: {eval_ok}; worst train frequency deviation {:.2}%", worst * 100.0),
    )
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "shift-op oracle equivalence", criterion_1()),
        (2, "gradient integrity", criterion_2()),
    ];
    match synthetic_models(root.path()) {
        Ok(models) => {
            results.push((3, "symmetric-pair separation", criterion_3(&models)));
            results.push((4, "segment-count trend", criterion_4(&models)));
            results.push((5, "eval-segment sweep", criterion_5(&models)));
        }
        Err(e) => {
            for (i, name) in [(3, "symmetric-pair separation"), (4, "segment-count trend"), (5, "eval-segment sweep")] {
                results.push((i, name, outcome(false, format!("training failed: {e}"))));
            }
        }
    }
    results.push((6, "drop-in property", criterion_6()));
    results.push((
        7,
        "reproducibility",
        criterion_7(root.path()).unwrap_or_else(|e| outcome(false, format!("error: {e}"))),
    ));
    results.push((8, "sampler statistics", criterion_8()));

    let mut failed = 0;
    for (i, name, o) in &results {
        println!("{} criterion {i} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
