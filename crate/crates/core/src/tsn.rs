//! Segment sampling, batch assembly, consensus, and the train/eval loops.

use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::{Mode, ModelGraph};
use crate::data::augment::apply_crop;
use crate::data::{AugmentSpec, ClipSource, CropParams, Normalization, VideoSample, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, ops, Element, SgdState, Tensor};
use crate::util::rng_for;

// Stream tags for derived randomness.
const TAG_CLIP: u64 = 0x11;
const TAG_SHUFFLE: u64 = 0x22;
const TAG_DROPOUT: u64 = 0x33;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// How `k` snippets are drawn from a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub k: usize,
    pub mode: SampleMode,
    pub seed: u64,
}

impl SegmentPlan {
    pub fn train(k: usize, seed: u64) -> Self {
        SegmentPlan { k, mode: SampleMode::Train, seed }
    }

    pub fn eval(k: usize) -> Self {
        SegmentPlan { k, mode: SampleMode::Eval, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("segment count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Half-open `[start, end)` segments covering `0..num_frames`; the first
/// `num_frames % k` segments are one frame longer. When `num_frames < k`
/// the trailing segments are empty.
pub fn segment_bounds(num_frames: usize, k: usize) -> Vec<(usize, usize)> {
    let (base, extra) = (num_frames / k, num_frames % k);
    let mut start = 0;
    (0..k)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let seg = (start, start + len);
            start += len;
            seg
        })
        .collect()
}

/// One frame index per segment: uniform inside the segment when training,
/// the segment center otherwise. Empty segments clamp to the last frame.
pub fn sample_indices<R: Rng + ?Sized>(num_frames: usize, plan: &SegmentPlan, rng: &mut R) -> Vec<usize> {
    assert!(num_frames >= 1 && plan.k >= 1, "sample_indices needs frames and segments");
    segment_bounds(num_frames, plan.k)
        .into_iter()
        .map(|(start, end)| {
            if start == end {
                return start.min(num_frames - 1);
            }
            match plan.mode {
                SampleMode::Train => rng.random_range(start..end),
                SampleMode::Eval => start + (end - start) / 2,
            }
        })
        .collect()
}

/// Crop/resize and normalization applied to every snippet.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InputPipeline {
    pub augment: AugmentSpec,
    pub normalization: Normalization,
}

impl InputPipeline {
    pub fn frame_len(&self) -> usize {
        CHANNELS * self.augment.crop_height * self.augment.crop_width
    }
}

/// Assembled model input `(B, K, C, H, W)` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub clips: Vec<usize>,
    pub k: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data = self.data.iter().map(|v| T::from_f64_lossy(*v as f64)).collect();
        Tensor::new(data, &[self.len(), self.k, CHANNELS, self.height, self.width])
    }
}

/// Writes the `k` snippets of one clip into `out`. Train mode draws segment
/// indices and one crop from `rng`; the crop is shared by all snippets.
pub fn assemble_clip<R: Rng + ?Sized>(
    source: &dyn ClipSource,
    clip: usize,
    mode: SampleMode,
    k: usize,
    pipeline: &InputPipeline,
    rng: &mut R,
    out: &mut [f32],
) -> Result<()> {
    let n = source.num_frames(clip);
    if n == 0 {
        return Err(Error::Input(format!("clip {} has no frames", source.id(clip))));
    }
    let plan = SegmentPlan { k, mode, seed: 0 };
    let indices = sample_indices(n, &plan, rng);
    let (ch, cw) = (pipeline.augment.crop_height, pipeline.augment.crop_width);
    let per = pipeline.frame_len();
    let mut crop = None;
    for (s, &t) in indices.iter().enumerate() {
        let frame = source.frame(clip, t)?;
        let params = match crop {
            Some(c) => c,
            None => {
                let c = match mode {
                    SampleMode::Train => CropParams::sample(frame.height, frame.width, &pipeline.augment, rng)?,
                    SampleMode::Eval => CropParams::center(frame.height, frame.width)?,
                };
                crop = Some(c);
                c
            }
        };
        let dst = &mut out[s * per..(s + 1) * per];
        apply_crop(&frame, &params, ch, cw, dst)?;
        pipeline.normalization.apply(dst);
    }
    Ok(())
}

/// Builds a batch. Each clip's randomness comes from `(seed, epoch, clip)`,
/// so the result does not depend on which thread assembles it.
pub fn assemble_batch(
    source: &dyn ClipSource,
    clips: &[usize],
    mode: SampleMode,
    k: usize,
    pipeline: &InputPipeline,
    seed: u64,
    epoch: usize,
) -> Result<ClipBatch> {
    let per_clip = k * pipeline.frame_len();
    let mut data = vec![0.0; clips.len() * per_clip];
    for (i, &clip) in clips.iter().enumerate() {
        let mut rng = rng_for(seed, &[TAG_CLIP, epoch as u64, clip as u64]);
        assemble_clip(source, clip, mode, k, pipeline, &mut rng, &mut data[i * per_clip..(i + 1) * per_clip])?;
    }
    Ok(ClipBatch {
        data,
        labels: clips.iter().map(|&c| source.label(c)).collect(),
        clips: clips.to_vec(),
        k,
        height: pipeline.augment.crop_height,
        width: pipeline.augment.crop_width,
    })
}

/// Produces the batches for `groups` in order, optionally on `workers`
/// background threads, and hands each to `consume`.
fn for_each_batch(
    source: &dyn ClipSource,
    groups: &[Vec<usize>],
    mode: SampleMode,
    k: usize,
    pipeline: &InputPipeline,
    seed: u64,
    epoch: usize,
    workers: usize,
    mut consume: impl FnMut(usize, ClipBatch) -> Result<()>,
) -> Result<()> {
    if workers == 0 {
        for (i, g) in groups.iter().enumerate() {
            consume(i, assemble_batch(source, g, mode, k, pipeline, seed, epoch)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let receivers: Vec<_> = (0..workers)
            .map(|w| {
                let (tx, rx) = mpsc::sync_channel::<Result<ClipBatch>>(2);
                scope.spawn(move || {
                    for g in groups.iter().skip(w).step_by(workers) {
                        let batch = assemble_batch(source, g, mode, k, pipeline, seed, epoch);
                        let failed = batch.is_err();
                        if tx.send(batch).is_err() || failed {
                            break;
                        }
                    }
                });
                rx
            })
            .collect();
        for i in 0..groups.len() {
            let batch = receivers[i % workers]
                .recv()
                .map_err(|_| Error::Training("batch worker exited early".into()))??;
            consume(i, batch)?;
        }
        Ok(())
    })
}

/// Mean of per-snippet logits: `(B, K, C)` values to `(B, C)`.
pub fn consensus<T: Element>(logits: &[T], k: usize, classes: usize) -> Vec<T> {
    let inv = T::one() / T::from_usize(k).unwrap();
    logits
        .chunks_exact(k * classes)
        .flat_map(|clip| {
            (0..classes).map(move |c| (0..k).map(|s| clip[s * classes + c]).sum::<T>() * inv)
        })
        .collect()
}

/// Class probabilities for one clip: sample, forward, average, softmax.
pub fn video_predict<T: Element>(
    model: &ModelGraph<T>,
    clip: &VideoSample,
    plan: &SegmentPlan,
    pipeline: &InputPipeline,
) -> Result<Vec<T>> {
    plan.validate()?;
    let source = crate::data::InMemoryDataset::new(vec![clip.clone()]);
    let mut rng = rng_for(plan.seed, &[TAG_CLIP]);
    let mut data = vec![0.0; plan.k * pipeline.frame_len()];
    assemble_clip(&source, 0, plan.mode, plan.k, pipeline, &mut rng, &mut data)?;
    let batch = ClipBatch {
        data,
        labels: vec![clip.label],
        clips: vec![0],
        k: plan.k,
        height: pipeline.augment.crop_height,
        width: pipeline.augment.crop_width,
    };
    let _guard = no_grad();
    let logits = model.forward_snippets(&batch.to_tensor()?, Mode::Eval, &mut rng)?;
    let classes = model.num_classes();
    let video = consensus(&logits.data(), plan.k, classes);
    Ok(ops::softmax_rows(&video, classes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub k: usize,
    /// Background batch-assembly threads; 0 assembles inline.
    pub workers: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

fn check_geometry<T: Element>(model: &ModelGraph<T>, pipeline: &InputPipeline) -> Result<()> {
    let cfg = &model.config;
    if cfg.image_height != pipeline.augment.crop_height || cfg.image_width != pipeline.augment.crop_width {
        return Err(Error::Config(format!(
            "crop {}x{} does not match model input {}x{}",
            pipeline.augment.crop_height, pipeline.augment.crop_width, cfg.image_height, cfg.image_width
        )));
    }
    Ok(())
}

fn top_hits<T: Element>(probs_or_logits: &[T], labels: &[usize], classes: usize, n: usize) -> usize {
    probs_or_logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| row.iter().filter(|v| **v > row[label]).count() < n)
        .count()
}

/// One pass over `source` in shuffled minibatches with one SGD step each.
pub fn train_epoch<T: Element>(
    model: &ModelGraph<T>,
    source: &dyn ClipSource,
    pipeline: &InputPipeline,
    options: &TrainOptions,
    optimizer: &mut SgdState<T>,
    epoch: usize,
) -> Result<EpochMetrics> {
    if source.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if options.batch_size == 0 || options.k == 0 {
        return Err(Error::Config("batch size and K must be at least 1".into()));
    }
    check_geometry(model, pipeline)?;
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng_for(options.seed, &[TAG_SHUFFLE, epoch as u64]));
    let groups: Vec<Vec<usize>> = order.chunks(options.batch_size).map(<[usize]>::to_vec).collect();
    let classes = model.num_classes();
    let (mut loss_sum, mut hits, mut hits5) = (0.0, 0, 0);
    for_each_batch(
        source,
        &groups,
        SampleMode::Train,
        options.k,
        pipeline,
        options.seed,
        epoch,
        options.workers,
        |i, batch| {
            let mut rng = rng_for(options.seed, &[TAG_DROPOUT, epoch as u64, i as u64]);
            let logits = model.forward_snippets(&batch.to_tensor()?, Mode::Train, &mut rng)?;
            let flat = ops::reshape(&logits, &[batch.len() * options.k, classes])?;
            let video = ops::group_mean(&flat, options.k)?;
            let loss = ops::softmax_cross_entropy(&video, &batch.labels)?;
            loss.backward()?;
            optimizer
                .step(&model.registry)
                .map_err(|e| Error::Training(format!("epoch {epoch} batch {i}: {e}")))?;
            let value = loss.item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch} batch {i}")));
            }
            loss_sum += value * batch.len() as f64;
            hits += top_hits(&video.data(), &batch.labels, classes, 1);
            hits5 += top_hits(&video.data(), &batch.labels, classes, classes.min(5));
            Ok(())
        },
    )?;
    let n = source.len();
    Ok(EpochMetrics {
        loss: loss_sum / n as f64,
        top1: hits as f64 / n as f64,
        top5: hits5 as f64 / n as f64,
        samples: n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub top1: f64,
    /// Top-`min(5, classes)` accuracy.
    pub top5: f64,
    /// `confusion[true][predicted]` clip counts.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

impl EvalReport {
    /// Fraction of class `from` clips predicted as `to`.
    pub fn confusion_rate(&self, from: usize, to: usize) -> f64 {
        let row = &self.confusion[from];
        let total: usize = row.iter().sum();
        if total == 0 {
            0.0
        } else {
            row[to] as f64 / total as f64
        }
    }

    pub fn per_class_accuracy(&self) -> Vec<f64> {
        (0..self.confusion.len()).map(|c| self.confusion_rate(c, c)).collect()
    }
}

/// Equidistant-snippet evaluation with center crops.
pub fn evaluate<T: Element>(
    model: &ModelGraph<T>,
    source: &dyn ClipSource,
    pipeline: &InputPipeline,
    k: usize,
    batch_size: usize,
    workers: usize,
) -> Result<EvalReport> {
    if source.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    if batch_size == 0 || k == 0 {
        return Err(Error::Config("batch size and K must be at least 1".into()));
    }
    check_geometry(model, pipeline)?;
    let _guard = no_grad();
    let classes = model.num_classes();
    let order: Vec<usize> = (0..source.len()).collect();
    let groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut confusion = vec![vec![0; classes]; classes];
    let (mut loss_sum, mut top1, mut top5) = (0.0, 0, 0);
    let mut rng = rng_for(0, &[]);
    for_each_batch(source, &groups, SampleMode::Eval, k, pipeline, 0, 0, workers, |_, batch| {
        let logits = model.forward_snippets(&batch.to_tensor()?, Mode::Eval, &mut rng)?;
        let video = consensus(&logits.data(), k, classes);
        let video_t = Tensor::new(video.clone(), &[batch.len(), classes])?;
        let loss = ops::softmax_cross_entropy(&video_t, &batch.labels)?;
        loss_sum += loss.item().to_f64_lossy() * batch.len() as f64;
        top1 += top_hits(&video, &batch.labels, classes, 1);
        top5 += top_hits(&video, &batch.labels, classes, classes.min(5));
        for (row, &label) in video.chunks_exact(classes).zip(&batch.labels) {
            let pred = argmax(row);
            if label < classes {
                confusion[label][pred] += 1;
            }
        }
        Ok(())
    })?;
    let n = source.len() as f64;
    Ok(EvalReport {
        loss: loss_sum / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        confusion,
        samples: source.len(),
    })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
