//! Staged residual backbone with motion blocks between consecutive snippets.
//!
//! Six stages: a stem (7×7/2 conv, batch-norm, ReLU, 3×3/2 max-pool), four
//! residual stages, and a head (global average pool, dropout, linear). When
//! enabled, a motion block sits right after each of stages 1–5 and fuses
//! motion features of snippet pair `(k, k+1)` into snippet `k`'s stream.
//! All `B·K` frames run through the shared appearance path as one folded
//! batch, so batch-norm statistics pool over every snippet.

use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::{DirectionSet, FusionVariant, MotionBlock, MotionBlockSpec};
use crate::nn::{BatchNorm2d, Conv2d, Init, Linear};
use crate::tensor::ops::{self, BatchNormMode};
use crate::tensor::{Element, ParamRegistry, Tensor};

/// Number of stages that can carry a motion block (all but the head).
pub const MOTION_STAGES: usize = 5;
/// Standard deviation of the classifier weights at initialization.
pub const HEAD_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn batch_norm(self) -> BatchNormMode {
        match self {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionConfig {
    /// `None` removes every motion block (the plain segment-network baseline).
    pub variant: Option<FusionVariant>,
    pub reduction_factor: usize,
    pub directions: DirectionSet,
    /// Which of stages 1–5 receive a block.
    pub stages: [bool; MOTION_STAGES],
}

impl MotionConfig {
    pub fn off() -> Self {
        MotionConfig {
            variant: None,
            reduction_factor: 4,
            directions: DirectionSet::default(),
            stages: [false; MOTION_STAGES],
        }
    }

    pub fn all(variant: FusionVariant, reduction_factor: usize) -> Self {
        MotionConfig {
            variant: Some(variant),
            reduction_factor,
            directions: DirectionSet::default(),
            stages: [true; MOTION_STAGES],
        }
    }

    pub fn enabled(&self) -> bool {
        self.variant.is_some() && self.stages.iter().any(|s| *s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub stem_channels: usize,
    /// Output channels of residual stages 2–5.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    pub dropout_keep: f64,
    pub motion: MotionConfig,
    pub seed: u64,
}

impl Default for ArchConfig {
    /// Desk-scale network: 64×64 input, stem 8, stages 8/16/32/64, one
    /// residual block each, six classes, motion off.
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            image_height: 64,
            image_width: 64,
            stem_channels: 8,
            stage_channels: [8, 16, 32, 64],
            blocks_per_stage: 1,
            num_classes: 6,
            dropout_keep: 0.5,
            motion: MotionConfig::off(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub num_residual_blocks: usize,
    pub downsample: bool,
}

#[derive(Clone, Debug)]
struct ResidualBlock<T: Element> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    projection: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Element> ResidualBlock<T> {
    fn new(
        registry: &mut ParamRegistry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(registry, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, init)?;
        let bn1 = BatchNorm2d::new(registry, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv2d::new(registry, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, init)?;
        let bn2 = BatchNorm2d::new(registry, &format!("{name}.bn2"), cout)?;
        let projection = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(registry, &format!("{name}.proj"), cin, cout, 1, stride, 0, false, init)?,
                BatchNorm2d::new(registry, &format!("{name}.proj_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        })
    }

    fn forward(&self, x: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let h = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?)?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        ops::relu(&ops::add(&h, &skip)?)
    }
}

/// Assembled network with its flat parameter registry.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Element = f32> {
    pub config: ArchConfig,
    pub stages: Vec<StageSpec>,
    pub motion_specs: Vec<Option<MotionBlockSpec>>,
    pub registry: ParamRegistry<T>,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    residual: Vec<Vec<ResidualBlock<T>>>,
    motion_blocks: Vec<Option<MotionBlock<T>>>,
    head: Linear<T>,
}

/// Spatial extent after a `kernel`/`stride`/`padding` window.
fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (extent + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

impl ArchConfig {
    pub fn stage_specs(&self) -> Vec<StageSpec> {
        let mut stages = vec![StageSpec {
            out_channels: self.stem_channels,
            num_residual_blocks: 0,
            downsample: true,
        }];
        for (i, &c) in self.stage_channels.iter().enumerate() {
            stages.push(StageSpec {
                out_channels: c,
                num_residual_blocks: self.blocks_per_stage,
                downsample: i > 0,
            });
        }
        stages.push(StageSpec {
            out_channels: self.num_classes,
            num_residual_blocks: 0,
            downsample: false,
        });
        stages
    }

    /// `(channels, height, width)` after each of stages 1–5.
    pub fn stage_extents(&self) -> Result<Vec<(usize, usize, usize)>> {
        let bad = |what: &str| Error::Config(format!("spatial extent reaches zero at {what}"));
        let stem = |e: usize| {
            window_out(e, 7, 2, 3)
                .and_then(|e| window_out(e, 3, 2, 1))
                .filter(|e| *e > 0)
        };
        let mut h = stem(self.image_height).ok_or_else(|| bad("stem"))?;
        let mut w = stem(self.image_width).ok_or_else(|| bad("stem"))?;
        let mut out = vec![(self.stem_channels, h, w)];
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if i > 0 {
                h = window_out(h, 3, 2, 1).filter(|e| *e > 0).ok_or_else(|| bad("stage"))?;
                w = window_out(w, 3, 2, 1).filter(|e| *e > 0).ok_or_else(|| bad("stage"))?;
            }
            out.push((c, h, w));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("input extents must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        if self.motion.variant.is_some() && self.motion.reduction_factor == 0 {
            return Err(Error::Config("motion reduction factor must be positive".into()));
        }
        self.stage_extents()?;
        Ok(())
    }
}

/// Builds the network and its registry. Parameter values depend only on
/// `config.seed` and each parameter's name.
pub fn build_model<T: Element>(config: &ArchConfig) -> Result<ModelGraph<T>> {
    config.validate()?;
    let init = Init { seed: config.seed };
    let mut registry = ParamRegistry::new();
    let stages = config.stage_specs();

    let stem_conv = Conv2d::new(
        &mut registry,
        "stem.conv",
        config.in_channels,
        config.stem_channels,
        7,
        2,
        3,
        false,
        init,
    )?;
    let stem_bn = BatchNorm2d::new(&mut registry, "stem.bn", config.stem_channels)?;

    let mut residual = Vec::new();
    let mut cin = config.stem_channels;
    for (i, spec) in stages[1..=4].iter().enumerate() {
        let mut blocks = Vec::new();
        for j in 0..spec.num_residual_blocks {
            let stride = if spec.downsample && j == 0 { 2 } else { 1 };
            blocks.push(ResidualBlock::new(
                &mut registry,
                &format!("stage{}.block{j}", i + 2),
                cin,
                spec.out_channels,
                stride,
                init,
            )?);
            cin = spec.out_channels;
        }
        // A stage without blocks still has to reach its declared width.
        if spec.num_residual_blocks == 0 && cin != spec.out_channels {
            return Err(Error::Config(format!(
                "stage {} has no blocks but changes width {cin} -> {}",
                i + 2,
                spec.out_channels
            )));
        }
        residual.push(blocks);
    }

    let mut motion_specs = Vec::with_capacity(MOTION_STAGES);
    let mut motion_blocks = Vec::with_capacity(MOTION_STAGES);
    for (i, stage) in stages[..MOTION_STAGES].iter().enumerate() {
        match config.motion.variant {
            Some(variant) if config.motion.stages[i] => {
                let spec = MotionBlockSpec::new(
                    variant,
                    config.motion.reduction_factor,
                    config.motion.directions.clone(),
                    stage.out_channels,
                )?;
                let block = MotionBlock::new(&mut registry, &format!("motion{}", i + 1), spec.clone(), init)?;
                motion_specs.push(Some(spec));
                motion_blocks.push(Some(block));
            }
            _ => {
                motion_specs.push(None);
                motion_blocks.push(None);
            }
        }
    }

    let head = Linear::head(&mut registry, "head.fc", cin, config.num_classes, HEAD_INIT_STD, init)?;

    Ok(ModelGraph {
        config: config.clone(),
        stages,
        motion_specs,
        registry,
        stem_conv,
        stem_bn,
        residual,
        motion_blocks,
        head,
    })
}

impl<T: Element> ModelGraph<T> {
    pub fn parameter_count(&self) -> usize {
        self.registry.parameter_count()
    }

    pub fn motion_enabled(&self) -> bool {
        self.motion_blocks.iter().any(Option::is_some)
    }

    pub fn motion_block(&self, stage: usize) -> Option<&MotionBlock<T>> {
        self.motion_blocks.get(stage).and_then(Option::as_ref)
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Runs a clip batch `(B, K, C, H, W)` and returns per-snippet logits
    /// `(B, K, num_classes)`.
    pub fn forward_snippets<R: Rng + ?Sized>(
        &self,
        frames: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_traced(frames, mode, rng)?.0)
    }

    /// Like [`forward_snippets`](Self::forward_snippets), also returning the
    /// folded activation after each of stages 1–5 (after any motion block).
    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        frames: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        ops::expect_rank("forward_snippets", frames, 5)?;
        let s = frames.shape();
        let (b, k) = (s[0], s[1]);
        if s[2] != self.config.in_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, got {:?}",
                self.config.in_channels, s
            )));
        }
        if self.motion_enabled() && k < 2 {
            return Err(Error::Config(format!(
                "motion blocks need at least 2 snippets, got K={k}"
            )));
        }
        let folded = ops::reshape(frames, &[b * k, s[2], s[3], s[4]])?;
        let (logits, trace) = self.forward_folded(&folded, k, mode, rng)?;
        let logits = ops::reshape(&logits, &[b, k, self.config.num_classes])?;
        Ok((logits, trace))
    }

    /// Folded forward over `(B·K, C, H, W)`; rows of one clip are adjacent.
    pub fn forward_folded<R: Rng + ?Sized>(
        &self,
        x: &Tensor<T>,
        snippets: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let bn = mode.batch_norm();
        let mut trace = Vec::with_capacity(MOTION_STAGES);

        let mut h = ops::relu(&self.stem_bn.forward(&self.stem_conv.forward(x)?, bn)?)?;
        h = ops::max_pool2d(&h, 3, 2, 1)?;
        h = self.apply_motion(0, h, snippets, bn)?;
        trace.push(h.clone());

        for (i, blocks) in self.residual.iter().enumerate() {
            for block in blocks {
                h = block.forward(&h, bn)?;
            }
            h = self.apply_motion(i + 1, h, snippets, bn)?;
            trace.push(h.clone());
        }

        let pooled = ops::global_avg_pool(&h)?;
        let dropped = ops::dropout(&pooled, self.config.dropout_keep, mode == Mode::Train, rng)?;
        Ok((self.head.forward(&dropped)?, trace))
    }

    fn apply_motion(
        &self,
        stage: usize,
        h: Tensor<T>,
        snippets: usize,
        bn: BatchNormMode,
    ) -> Result<Tensor<T>> {
        match &self.motion_blocks[stage] {
            Some(block) => block.forward_folded(&h, snippets, bn),
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::FusionVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn stage_layout() {
        let cfg = ArchConfig::default();
        let stages = cfg.stage_specs();
        assert_eq!(stages.len(), 6);
        assert!(stages[0].downsample && stages[0].num_residual_blocks == 0);
        assert!(!stages[1].downsample);
        assert!(stages[2..5].iter().all(|s| s.downsample));
        assert_eq!(stages[5].out_channels, 6);
        let extents = cfg.stage_extents().unwrap();
        assert_eq!(
            extents,
            vec![(8, 16, 16), (8, 16, 16), (16, 8, 8), (32, 4, 4), (64, 2, 2)]
        );
    }

    #[test]
    fn smoke_forward_without_motion() {
        let model = build_model::<f32>(&ArchConfig::default()).unwrap();
        let frames = Tensor::zeros(&[2, 1, 3, 64, 64]).unwrap();
        let logits = model.forward_snippets(&frames, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 6]);
    }

    #[test]
    fn motion_needs_two_snippets() {
        let mut cfg = ArchConfig::default();
        cfg.motion = MotionConfig::all(FusionVariant::Concat, 4);
        let model = build_model::<f32>(&cfg).unwrap();
        let frames = Tensor::zeros(&[2, 1, 3, 64, 64]).unwrap();
        assert!(matches!(
            model.forward_snippets(&frames, Mode::Eval, &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ArchConfig::default();
        cfg.image_height = 0;
        assert!(build_model::<f32>(&cfg).is_err());
        let mut cfg = ArchConfig::default();
        cfg.dropout_keep = 0.0;
        assert!(build_model::<f32>(&cfg).is_err());
        let mut cfg = ArchConfig::default();
        cfg.motion = MotionConfig::all(FusionVariant::Sum, 0);
        assert!(build_model::<f32>(&cfg).is_err());
    }

    #[test]
    fn registry_is_deterministic_per_seed() {
        let a = build_model::<f32>(&ArchConfig::default()).unwrap();
        let b = build_model::<f32>(&ArchConfig::default()).unwrap();
        assert_eq!(a.registry.snapshot(), b.registry.snapshot());
        let c = build_model::<f32>(&ArchConfig {
            seed: 9,
            ..ArchConfig::default()
        })
        .unwrap();
        assert_ne!(a.registry.snapshot(), c.registry.snapshot());
    }
}
