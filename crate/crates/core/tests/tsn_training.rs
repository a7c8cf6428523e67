use mfnet::backbone::{build_model, ArchConfig, Mode, MotionConfig};
use mfnet::data::{generate_synthetic, AugmentSpec, InMemoryDataset, Normalization, SyntheticSpec, VideoSample};
use mfnet::motion::FusionVariant;
use mfnet::tensor::{ops, SgdState};
use mfnet::tsn::{
    evaluate, sample_indices, train_epoch, video_predict, InputPipeline, SampleMode, SegmentPlan, TrainOptions,
};
use mfnet::util::rng_for;

const SIDE: usize = 32;

fn toy_arch(variant: Option<FusionVariant>) -> ArchConfig {
    ArchConfig {
        image_height: SIDE,
        image_width: SIDE,
        stem_channels: 4,
        stage_channels: [4, 8, 8, 16],
        motion: variant.map_or(MotionConfig::off(), |v| MotionConfig::all(v, 4)),
        seed: 3,
        ..ArchConfig::default()
    }
}

fn toy_pipeline() -> InputPipeline {
    InputPipeline {
        augment: AugmentSpec {
            crop_height: SIDE,
            crop_width: SIDE,
            ..AugmentSpec::default()
        },
        normalization: Normalization::default(),
    }
}

fn toy_data(per_class: usize, seed: u64) -> Vec<VideoSample> {
    let spec = SyntheticSpec {
        image_height: SIDE,
        image_width: SIDE,
        num_frames: 8,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, per_class).unwrap()
}

#[test]
fn train_sampling_is_uniform_within_segments() {
    let plan = SegmentPlan::train(3, 0);
    let mut rng = rng_for(42, &[]);
    let segments = [0..3, 3..5, 5..7];
    let mut counts = [0usize; 7];
    let draws = 10_000;
    for _ in 0..draws {
        let idx = sample_indices(7, &plan, &mut rng);
        for (s, i) in idx.iter().enumerate() {
            assert!(segments[s].contains(i), "segment {s} drew {i}");
            counts[*i] += 1;
        }
    }
    for seg in segments {
        let expected = draws as f64 / seg.len() as f64;
        for i in seg {
            let rel = (counts[i] as f64 - expected).abs() / expected;
            assert!(rel <= 0.05, "frame {i}: {} vs {expected}", counts[i]);
        }
    }
}

#[test]
fn eval_sampling_ignores_the_seed() {
    for n in 1..40 {
        for k in 1..12 {
            let a = sample_indices(n, &SegmentPlan { k, mode: SampleMode::Eval, seed: 1 }, &mut rng_for(1, &[]));
            let b = sample_indices(n, &SegmentPlan { k, mode: SampleMode::Eval, seed: 9 }, &mut rng_for(9, &[]));
            assert_eq!(a, b);
        }
    }
}

#[test]
fn first_batch_loss_is_near_chance() {
    let model = build_model::<f32>(&ArchConfig::default()).unwrap();
    let spec = SyntheticSpec { num_frames: 8, ..SyntheticSpec::default() };
    let big = InMemoryDataset::new(generate_synthetic(&spec, 3).unwrap());
    let pipeline = InputPipeline::default();
    let batch = mfnet::tsn::assemble_batch(&big, &(0..16).collect::<Vec<_>>(), SampleMode::Train, 5, &pipeline, 0, 0)
        .unwrap();
    let logits = model.forward_snippets(&batch.to_tensor().unwrap(), Mode::Train, &mut rng_for(0, &[])).unwrap();
    let video = ops::group_mean(&ops::reshape(&logits, &[16 * 5, 6]).unwrap(), 5).unwrap();
    let loss = ops::softmax_cross_entropy(&video, &batch.labels).unwrap().item() as f64;
    assert!((loss - 6f64.ln()).abs() <= 0.3, "initial loss {loss}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = InMemoryDataset::new(toy_data(2, 1));
    let model = build_model::<f32>(&toy_arch(Some(FusionVariant::Concat))).unwrap();
    let params = |m: &mfnet::backbone::ModelGraph<f32>| -> Vec<(String, Vec<f32>)> {
        m.registry.params().iter().map(|p| (p.name.clone(), p.tensor.to_vec())).collect()
    };
    let before = params(&model);
    let mut opt = SgdState::new(&model.registry, 0.0, 0.9, 5e-4).unwrap();
    let options = TrainOptions { batch_size: 4, k: 3, workers: 0, seed: 0 };
    train_epoch(&model, &data, &toy_pipeline(), &options, &mut opt, 0).unwrap();
    let after = params(&model);
    for ((n, a), (_, b)) in before.iter().zip(&after) {
        assert!(
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            "{n} changed"
        );
    }
}

#[test]
fn single_clip_is_memorized() {
    let mut clip = toy_data(1, 2).remove(0);
    clip.label = 4;
    let data = InMemoryDataset::new(vec![clip]);
    let model = build_model::<f32>(&toy_arch(Some(FusionVariant::Sum))).unwrap();
    let mut opt = SgdState::new(&model.registry, 0.01, 0.9, 5e-4).unwrap();
    let options = TrainOptions { batch_size: 1, k: 3, workers: 0, seed: 0 };
    let mut last = f64::INFINITY;
    for epoch in 0..50 {
        last = train_epoch(&model, &data, &toy_pipeline(), &options, &mut opt, epoch).unwrap().loss;
    }
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn prefetch_workers_do_not_change_results() {
    let data = InMemoryDataset::new(toy_data(2, 4));
    let run = |workers| {
        let model = build_model::<f32>(&toy_arch(None)).unwrap();
        let mut opt = SgdState::new(&model.registry, 0.01, 0.9, 5e-4).unwrap();
        let options = TrainOptions { batch_size: 3, k: 3, workers, seed: 5 };
        let m = train_epoch(&model, &data, &toy_pipeline(), &options, &mut opt, 0).unwrap();
        (m.loss.to_bits(), model.registry.snapshot())
    };
    assert_eq!(run(0), run(2));
}

/// Independent pipeline: explicit segment centers, whole-frame input (the
/// toy frames are square and already at model size), manual averaging.
fn brute_force_probs(model: &mfnet::backbone::ModelGraph<f32>, clip: &VideoSample, k: usize) -> Vec<f64> {
    let n = clip.frames.len();
    let mut indices = Vec::new();
    let mut start = 0;
    for s in 0..k {
        let len = n / k + usize::from(s < n % k);
        indices.push(if len == 0 { n - 1 } else { start + len / 2 });
        start += len;
    }
    let norm = Normalization::default();
    let mut input = Vec::new();
    for &t in &indices {
        let f = &clip.frames[t];
        for c in 0..3 {
            for y in 0..f.height {
                for x in 0..f.width {
                    input.push((f.value(c, y, x) - norm.mean[c]) / norm.std[c]);
                }
            }
        }
    }
    let frames = mfnet::Tensor::new(input, &[1, k, 3, SIDE, SIDE]).unwrap();
    let _g = mfnet::tensor::no_grad();
    let logits = model.forward_snippets(&frames, Mode::Eval, &mut rng_for(0, &[])).unwrap().to_vec();
    let classes = model.num_classes();
    let mean: Vec<f64> = (0..classes)
        .map(|c| (0..k).map(|s| logits[s * classes + c] as f64).sum::<f64>() / k as f64)
        .collect();
    let max = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = mean.iter().map(|v| (v - max).exp()).sum();
    mean.iter().map(|v| (v - max).exp() / z).collect()
}

#[test]
fn video_predict_matches_brute_force_pipeline() {
    let train = InMemoryDataset::new(toy_data(6, 5));
    let val = toy_data(2, 6);
    let model = build_model::<f32>(&toy_arch(Some(FusionVariant::Concat))).unwrap();
    let mut opt = SgdState::new(&model.registry, 0.01, 0.9, 5e-4).unwrap();
    let options = TrainOptions { batch_size: 6, k: 3, workers: 0, seed: 0 };
    for epoch in 0..3 {
        train_epoch(&model, &train, &toy_pipeline(), &options, &mut opt, epoch).unwrap();
    }
    let k = 4;
    let (mut hits_a, mut hits_b) = (0, 0);
    for clip in &val {
        let p = video_predict(&model, clip, &SegmentPlan::eval(k), &toy_pipeline()).unwrap();
        let q = brute_force_probs(&model, clip, k);
        assert!((p.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        for (a, b) in p.iter().zip(&q) {
            assert!((*a as f64 - b).abs() < 1e-5, "{p:?} vs {q:?}");
        }
        hits_a += usize::from(mfnet::tsn::argmax(&p) == clip.label);
        hits_b += usize::from(mfnet::tsn::argmax(&q) == clip.label);
    }
    assert_eq!(hits_a, hits_b);
    let report = evaluate(&model, &InMemoryDataset::new(val.clone()), &toy_pipeline(), k, 5, 0).unwrap();
    assert!((report.top1 - hits_a as f64 / val.len() as f64).abs() < 1e-12);
    for (c, row) in report.confusion.iter().enumerate() {
        assert_eq!(row.iter().sum::<usize>(), val.iter().filter(|s| s.label == c).count());
    }
}

#[test]
fn opposed_snippet_logits_average_to_uniform() {
    let p = ops::softmax_rows(&mfnet::tsn::consensus(&[2.0f64, 0.0, 0.0, 2.0], 2, 2), 2);
    assert_eq!(p, vec![0.5, 0.5]);
}
