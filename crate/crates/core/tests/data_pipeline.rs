use mfnet::data::augment::apply_crop;
use mfnet::data::{
    generate_clip, generate_synthetic, load_frame_folder, paired_class, split_by_id_hash, write_frame_folder,
    AugmentSpec, ClipSource, CropParams, Frame, MotionProgram, SyntheticSpec, CHANNELS,
};
use mfnet::tsn::{assemble_clip, InputPipeline, SampleMode};
use mfnet::data::{InMemoryDataset, Normalization, VideoSample};
use mfnet::util::rng_for;
use proptest::prelude::*;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        image_height: 24,
        image_width: 20,
        num_frames: 5,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn frame_folder_round_trip_is_pixel_identical() {
    let spec = small_spec(11);
    let samples = generate_synthetic(&spec, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_frame_folder(dir.path(), &samples, &spec.class_names()).unwrap();
    let load = load_frame_folder(dir.path()).unwrap();
    assert!(load.skipped.is_empty());
    assert_eq!(load.dataset.class_names, spec.class_names());
    assert_eq!(load.dataset.len(), samples.len());
    for i in 0..load.dataset.len() {
        let loaded = load.dataset.load_sample(i).unwrap();
        let original = samples.iter().find(|s| s.id == loaded.id).unwrap();
        assert_eq!(&loaded, original);
    }
}

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn left_and_right_swipes_have_the_same_frame_intensity_distribution() {
    let spec = SyntheticSpec {
        classes: vec![MotionProgram::SwipeLeft, MotionProgram::SwipeRight],
        seed: 5,
        ..SyntheticSpec::default()
    };
    let clips = generate_synthetic(&spec, 500).unwrap();
    let intensities = |label: usize| -> Vec<f64> {
        clips
            .iter()
            .filter(|c| c.label == label)
            .flat_map(|c| c.frames.iter().map(Frame::mean_intensity))
            .collect()
    };
    let d = ks_statistic(intensities(0), intensities(1));
    // critical value at alpha = 0.01 using the clip count, which is
    // conservative because frames within a clip are correlated
    let critical = 1.628 * (2.0f64 / 500.0).sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

#[test]
fn noiseless_mirror_twin_is_frame_reversed() {
    let spec = SyntheticSpec { noise_std: 0.0, ..small_spec(3) };
    let right = generate_clip(&spec, MotionProgram::SwipeRight, 77, "r", 1).unwrap();
    let left = generate_clip(&spec, MotionProgram::SwipeLeft, 77, "l", 0).unwrap();
    let n = right.frames.len();
    for t in 0..n {
        assert_eq!(right.frames[t], left.frames[n - 1 - t]);
    }
}

#[test]
fn exact_class_balance_and_split_quotas() {
    let spec = small_spec(8);
    let samples = generate_synthetic(&spec, 25).unwrap();
    let (train, val) = split_by_id_hash(samples, 0.2).unwrap();
    let train = InMemoryDataset::new(train);
    let val = InMemoryDataset::new(val);
    assert_eq!(train.class_counts(6), vec![20; 6]);
    assert_eq!(val.class_counts(6), vec![5; 6]);
}

#[test]
fn identical_frames_get_identical_snippets() {
    let base = generate_synthetic(&small_spec(2), 1).unwrap().remove(0);
    let frames = vec![base.frames[2].clone(); 9];
    let clip = VideoSample::new("same", 0, frames).unwrap();
    let source = InMemoryDataset::new(vec![clip]);
    let pipeline = InputPipeline {
        augment: AugmentSpec { crop_height: 12, crop_width: 12, ..AugmentSpec::default() },
        normalization: Normalization::identity(),
    };
    let per = pipeline.frame_len();
    for seed in 0..20 {
        let mut out = vec![0.0; 4 * per];
        assemble_clip(&source, 0, SampleMode::Train, 4, &pipeline, &mut rng_for(seed, &[]), &mut out).unwrap();
        for s in 1..4 {
            assert_eq!(out[..per], out[s * per..(s + 1) * per]);
        }
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn arb_program() -> impl Strategy<Value = MotionProgram> {
    prop::sample::select(MotionProgram::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reversal_maps_to_paired_class(program in arb_program(), seed in any::<u64>()) {
        let spec = small_spec(0);
        let label = MotionProgram::ALL.iter().position(|p| *p == program).unwrap();
        let clip = generate_clip(&spec, program, seed, "a", label).unwrap();
        let twin_label = paired_class(label);
        let twin = generate_clip(&spec, MotionProgram::ALL[twin_label], seed, "b", twin_label).unwrap();
        prop_assert_eq!(MotionProgram::ALL[twin_label], program.mirror());
        prop_assert_eq!(clip.reversed().frames, twin.frames);
    }

    #[test]
    fn augmented_values_stay_in_unit_range(
        h in 8usize..40, w in 8usize..40, seed in any::<u64>(), out in 4usize..20,
    ) {
        let pixels = (0..CHANNELS * h * w).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 3) as u8).collect();
        let frame = Frame::new(h, w, pixels).unwrap();
        let spec = AugmentSpec { crop_height: out, crop_width: out, ..AugmentSpec::default() };
        let mut rng = rng_for(seed, &[]);
        let crop = CropParams::sample(h, w, &spec, &mut rng).unwrap();
        prop_assert!(crop.top + crop.side <= h && crop.left + crop.side <= w);
        let mut buf = vec![0.0; CHANNELS * out * out];
        apply_crop(&frame, &crop, out, out, &mut buf).unwrap();
        prop_assert!(buf.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_frames_stay_constant(value in any::<u8>(), h in 4usize..30, w in 4usize..30, seed in any::<u64>()) {
        let frame = Frame::filled(h, w, value);
        let spec = AugmentSpec { crop_height: 7, crop_width: 9, ..AugmentSpec::default() };
        let crop = CropParams::sample(h, w, &spec, &mut rng_for(seed, &[])).unwrap();
        let mut buf = vec![0.0; CHANNELS * 63];
        apply_crop(&frame, &crop, 7, 9, &mut buf).unwrap();
        let expected = value as f32 / 255.0;
        prop_assert!(buf.iter().all(|v| (v - expected).abs() < 1e-6));
    }
}
