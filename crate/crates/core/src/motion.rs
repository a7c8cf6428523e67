//! Fixed motion filters and motion blocks.
//!
//! A motion filter takes feature maps of two consecutive snippets from the
//! same depth of the network, shifts the later one by each displacement in a
//! fixed [`DirectionSet`] and subtracts it from the earlier one:
//!
//! ```text
//! R^δ = F_t − shift(F_{t+1}, δ)          M_t = [R^δ1 | R^δ2 | … | R^δS]
//! ```
//!
//! Along the true motion direction the residual is small, so the stack of
//! residuals encodes direction without solving for optical flow. A
//! [`MotionBlock`] wraps the filter with a 1×1 channel reduction in front and
//! a 1×1 compression behind, and fuses the result back into the appearance
//! stream either by element-wise sum or by concatenation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init};
use crate::tensor::ops::{self, BatchNormMode};
use crate::tensor::{Element, ParamRegistry, Tensor};

/// One-pixel displacement with `|dx| + |dy| ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Displacement {
    dx: i8,
    dy: i8,
}

impl Displacement {
    pub const ZERO: Displacement = Displacement { dx: 0, dy: 0 };

    pub fn new(dx: i32, dy: i32) -> Result<Self> {
        if dx.abs() + dy.abs() > 1 {
            return Err(Error::Config(format!(
                "displacement ({dx}, {dy}) violates |dx| + |dy| <= 1"
            )));
        }
        Ok(Displacement {
            dx: dx as i8,
            dy: dy as i8,
        })
    }

    pub fn dx(&self) -> i32 {
        self.dx as i32
    }

    pub fn dy(&self) -> i32 {
        self.dy as i32
    }

    pub fn inverse(&self) -> Displacement {
        Displacement {
            dx: -self.dx,
            dy: -self.dy,
        }
    }
}

/// Ordered, duplicate-free set of displacements. The order fixes which
/// channel block of the motion features belongs to which direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionSet {
    dirs: Vec<Displacement>,
}

impl DirectionSet {
    pub fn new(dirs: Vec<Displacement>) -> Result<Self> {
        if dirs.is_empty() {
            return Err(Error::Config("direction set is empty".into()));
        }
        for (i, d) in dirs.iter().enumerate() {
            if dirs[..i].contains(d) {
                return Err(Error::Config(format!(
                    "direction ({}, {}) listed twice",
                    d.dx(),
                    d.dy()
                )));
            }
        }
        Ok(DirectionSet { dirs })
    }

    pub fn from_pairs(pairs: &[(i32, i32)]) -> Result<Self> {
        let dirs = pairs
            .iter()
            .map(|&(dx, dy)| Displacement::new(dx, dy))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dirs)
    }

    pub fn as_slice(&self) -> &[Displacement] {
        &self.dirs
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn pairs(&self) -> Vec<(i32, i32)> {
        self.dirs.iter().map(|d| (d.dx(), d.dy())).collect()
    }

    pub fn position(&self, d: Displacement) -> Option<usize> {
        self.dirs.iter().position(|x| *x == d)
    }
}

impl Default for DirectionSet {
    /// `{(0,0), (1,0), (−1,0), (0,1), (0,−1)}`.
    fn default() -> Self {
        DirectionSet::from_pairs(&[(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)])
            .expect("valid default set")
    }
}

impl fmt::Display for DirectionSet {
    /// `dx,dy;dx,dy;…`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .dirs
            .iter()
            .map(|d| format!("{},{}", d.dx(), d.dy()))
            .collect();
        f.write_str(&parts.join(";"))
    }
}

impl FromStr for DirectionSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for item in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (a, b) = item
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("direction '{item}' is not dx,dy")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<i32>()
                    .map_err(|_| Error::Config(format!("direction '{item}' is not integral")))
            };
            pairs.push((parse(a)?, parse(b)?));
        }
        DirectionSet::from_pairs(&pairs)
    }
}

/// Spatial translation of every channel: `out[y][x] = in[y + dy][x + dx]`,
/// zero where the source falls outside the map.
pub fn shift<T: Element>(input: &Tensor<T>, delta: Displacement) -> Result<Tensor<T>> {
    ops::expect_rank("shift", input, 4)?;
    let out = shift_planes(&input.data(), input.shape(), delta);
    let shape = input.shape().to_vec();
    Tensor::from_op(
        out,
        input.shape(),
        vec![input.clone()],
        Box::new(move |g| vec![Some(shift_planes(g, &shape, delta.inverse()))]),
        "shift",
    )
}

fn shift_planes<T: Element>(data: &[T], shape: &[usize], delta: Displacement) -> Vec<T> {
    let (h, w) = (shape[2], shape[3]);
    let (dx, dy) = (delta.dx() as isize, delta.dy() as isize);
    let mut out = vec![T::zero(); data.len()];
    // Valid output ranges where the source index is in bounds.
    let ys = (0.max(-dy) as usize)..((h as isize).min(h as isize - dy).max(0) as usize);
    let xs = (0.max(-dx) as usize)..((w as isize).min(w as isize - dx).max(0) as usize);
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in ys.clone() {
            let sy = (y as isize + dy) as usize;
            let sx0 = (xs.start as isize + dx) as usize;
            let len = xs.len();
            dst[y * w + xs.start..y * w + xs.start + len]
                .copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + len]);
        }
    }
    out
}

/// Residual motion features `[f_t − shift(f_next, δ)]_δ` stacked along the
/// channel axis in direction-set order.
pub fn motion_filter<T: Element>(
    f_t: &Tensor<T>,
    f_next: &Tensor<T>,
    dirs: &DirectionSet,
) -> Result<Tensor<T>> {
    if f_t.shape() != f_next.shape() {
        return Err(Error::Config(format!(
            "motion_filter: {:?} vs {:?}",
            f_t.shape(),
            f_next.shape()
        )));
    }
    let residuals = dirs
        .as_slice()
        .iter()
        .map(|&d| ops::sub(f_t, &shift(f_next, d)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = residuals.iter().collect();
    ops::concat_channels(&refs)
}

/// How motion features rejoin the appearance stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionVariant {
    /// `out = f_t + BN(conv1x1(M_t))`
    Sum,
    /// `out = BN(conv1x1([f_t | M_t]))`
    Concat,
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Sum => "sum",
            FusionVariant::Concat => "concat",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" | "s" => Ok(FusionVariant::Sum),
            "concat" | "c" => Ok(FusionVariant::Concat),
            other => Err(Error::Config(format!("unknown fusion variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionBlockSpec {
    pub variant: FusionVariant,
    pub reduction_factor: usize,
    pub directions: DirectionSet,
    pub in_channels: usize,
}

impl MotionBlockSpec {
    pub fn new(
        variant: FusionVariant,
        reduction_factor: usize,
        directions: DirectionSet,
        in_channels: usize,
    ) -> Result<Self> {
        if reduction_factor == 0 {
            return Err(Error::Config("reduction factor must be positive".into()));
        }
        if in_channels == 0 {
            return Err(Error::Config("motion block needs at least one channel".into()));
        }
        Ok(MotionBlockSpec {
            variant,
            reduction_factor,
            directions,
            in_channels,
        })
    }

    /// `max(1, C / reduction_factor)`.
    pub fn reduced_channels(&self) -> usize {
        (self.in_channels / self.reduction_factor).max(1)
    }

    /// Channel count of the stacked residuals, `S · Cr`.
    pub fn motion_channels(&self) -> usize {
        self.directions.len() * self.reduced_channels()
    }

    /// Input width of the compression convolution.
    pub fn compression_in_channels(&self) -> usize {
        match self.variant {
            FusionVariant::Sum => self.motion_channels(),
            FusionVariant::Concat => self.in_channels + self.motion_channels(),
        }
    }

    /// Trainable scalars the block adds: two bias-free 1×1 convolutions and
    /// two batch-norms.
    pub fn parameter_count(&self) -> usize {
        let (c, cr) = (self.in_channels, self.reduced_channels());
        c * cr + 2 * cr + self.compression_in_channels() * c + 2 * c
    }
}

/// Learnable parts of a motion block around the fixed filter.
#[derive(Clone, Debug)]
pub struct MotionBlock<T: Element> {
    pub spec: MotionBlockSpec,
    pub reduce: Conv2d<T>,
    pub reduce_bn: BatchNorm2d<T>,
    pub compress: Conv2d<T>,
    pub compress_bn: BatchNorm2d<T>,
}

impl<T: Element> MotionBlock<T> {
    pub fn new(
        registry: &mut ParamRegistry<T>,
        name: &str,
        spec: MotionBlockSpec,
        init: Init,
    ) -> Result<Self> {
        let (c, cr) = (spec.in_channels, spec.reduced_channels());
        let reduce = Conv2d::new(registry, &format!("{name}.reduce"), c, cr, 1, 1, 0, false, init)?;
        let reduce_bn = BatchNorm2d::new(registry, &format!("{name}.reduce_bn"), cr)?;
        let compress = Conv2d::new(
            registry,
            &format!("{name}.compress"),
            spec.compression_in_channels(),
            c,
            1,
            1,
            0,
            false,
            init,
        )?;
        let compress_bn = BatchNorm2d::new(registry, &format!("{name}.compress_bn"), c)?;
        Ok(MotionBlock {
            spec,
            reduce,
            reduce_bn,
            compress,
            compress_bn,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        ops::expect_rank("motion block", x, 4)?;
        if x.shape()[1] != self.spec.in_channels {
            return Err(Error::Config(format!(
                "motion block built for {} channels, got {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    /// 1×1 conv + batch-norm: `C → Cr`.
    pub fn reduce(&self, x: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        self.reduce_bn.forward(&self.reduce.forward(x)?, mode)
    }

    /// Stacked residuals `M_t` for a single pair of feature maps. Both inputs
    /// share one set of reduction batch statistics.
    pub fn motion_features(
        &self,
        f_t: &Tensor<T>,
        f_next: &Tensor<T>,
        mode: BatchNormMode,
    ) -> Result<Tensor<T>> {
        self.check_input(f_t)?;
        if f_t.shape() != f_next.shape() {
            return Err(Error::Config(format!(
                "motion block pair mismatch {:?} vs {:?}",
                f_t.shape(),
                f_next.shape()
            )));
        }
        let b = f_t.shape()[0];
        let stacked = ops::concat_batch(&[f_t, f_next])?;
        let reduced = self.reduce(&stacked, mode)?;
        let cur = ops::gather_rows(&reduced, &(0..b).map(Some).collect::<Vec<_>>())?;
        let next = ops::gather_rows(&reduced, &(b..2 * b).map(Some).collect::<Vec<_>>())?;
        motion_filter(&cur, &next, &self.spec.directions)
    }

    /// Motion features for a folded `(B·K, C, H, W)` batch whose rows are
    /// ordered snippet-major within each clip. Snippet `k` pairs with
    /// `k + 1`; the last snippet of every clip gets all-zero features.
    pub fn folded_motion_features(
        &self,
        x: &Tensor<T>,
        snippets: usize,
        mode: BatchNormMode,
    ) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let rows = x.shape()[0];
        if snippets < 2 || rows % snippets != 0 {
            return Err(Error::Config(format!(
                "motion block needs >= 2 snippets dividing the batch, got K={snippets} for {rows} rows"
            )));
        }
        let reduced = self.reduce(x, mode)?;
        let has_next = |r: usize| r % snippets + 1 < snippets;
        let cur_rows: Vec<_> = (0..rows).map(|r| has_next(r).then_some(r)).collect();
        let next_rows: Vec<_> = (0..rows).map(|r| has_next(r).then_some(r + 1)).collect();
        let cur = ops::gather_rows(&reduced, &cur_rows)?;
        let next = ops::gather_rows(&reduced, &next_rows)?;
        motion_filter(&cur, &next, &self.spec.directions)
    }

    /// Merges motion features back into the appearance features; the output
    /// has the shape of `f_t`.
    pub fn fuse(&self, f_t: &Tensor<T>, motion: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        match self.spec.variant {
            FusionVariant::Sum => {
                let compressed = self.compress_bn.forward(&self.compress.forward(motion)?, mode)?;
                ops::add(f_t, &compressed)
            }
            FusionVariant::Concat => {
                let joined = ops::concat_channels(&[f_t, motion])?;
                self.compress_bn.forward(&self.compress.forward(&joined)?, mode)
            }
        }
    }

    /// Full block on one pair of consecutive snippets.
    pub fn forward(&self, f_t: &Tensor<T>, f_next: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let motion = self.motion_features(f_t, f_next, mode)?;
        self.fuse(f_t, &motion, mode)
    }

    /// Full block over a folded snippet batch.
    pub fn forward_folded(&self, x: &Tensor<T>, snippets: usize, mode: BatchNormMode) -> Result<Tensor<T>> {
        let motion = self.folded_motion_features(x, snippets, mode)?;
        self.fuse(x, &motion, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::sum;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Tensor<f64> {
        Tensor::new((1..=9).map(f64::from).collect(), &[1, 1, 3, 3]).unwrap()
    }

    fn d(dx: i32, dy: i32) -> Displacement {
        Displacement::new(dx, dy).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn displacement_constraint() {
        assert!(Displacement::new(1, 1).is_err());
        assert!(Displacement::new(2, 0).is_err());
        assert!(Displacement::new(0, -1).is_ok());
    }

    #[test]
    fn direction_set_rules() {
        assert!(DirectionSet::from_pairs(&[]).is_err());
        assert!(DirectionSet::from_pairs(&[(1, 0), (1, 0)]).is_err());
        let def = DirectionSet::default();
        assert_eq!(def.len(), 5);
        assert_eq!(def.to_string(), "0,0;1,0;-1,0;0,1;0,-1");
        assert_eq!(def.to_string().parse::<DirectionSet>().unwrap(), def);
        assert!("1,1".parse::<DirectionSet>().is_err());
    }

    #[test]
    fn shift_examples() {
        let x = grid();
        assert_eq!(shift(&x, Displacement::ZERO).unwrap().to_vec(), x.to_vec());
        assert_eq!(
            shift(&x, d(1, 0)).unwrap().to_vec(),
            vec![2.0, 3.0, 0.0, 5.0, 6.0, 0.0, 8.0, 9.0, 0.0]
        );
        assert_eq!(
            shift(&x, d(0, 1)).unwrap().to_vec(),
            vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 0.0, 0.0, 0.0]
        );
        let single = Tensor::<f64>::new(vec![7.0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(shift(&single, d(1, 0)).unwrap().to_vec(), vec![0.0]);
    }

    #[test]
    fn shift_round_trip_loses_last_column() {
        let x = Tensor::new(random(&[2, 3, 4, 5], 1), &[2, 3, 4, 5]).unwrap();
        let back = shift(&shift(&x, d(1, 0)).unwrap(), d(-1, 0)).unwrap().to_vec();
        for (i, (a, b)) in back.iter().zip(x.to_vec()).enumerate() {
            if i % 5 == 0 {
                assert_eq!(*a, 0.0);
            } else {
                assert_eq!(*a, b);
            }
        }
    }

    #[test]
    fn shift_gradient_is_inverse_shift() {
        let shape = [2, 2, 4, 3];
        for dir in DirectionSet::default().as_slice() {
            let x = Tensor::param(random(&shape, 2), &shape).unwrap();
            let w = Tensor::new(random(&shape, 3), &shape).unwrap();
            sum(&ops::mul(&w, &shift(&x, *dir).unwrap()).unwrap())
                .unwrap()
                .backward()
                .unwrap();
            assert_eq!(x.grad().unwrap(), shift(&w, dir.inverse()).unwrap().to_vec());
        }
    }

    #[test]
    fn motion_filter_static_scene_is_zero() {
        let x = Tensor::<f64>::full(0.7, &[1, 2, 3, 3]).unwrap();
        let m = motion_filter(&x, &x, &DirectionSet::from_pairs(&[(0, 0)]).unwrap()).unwrap();
        assert!(m.to_vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn motion_filter_with_zero_current_is_negated_shift() {
        let next = Tensor::new(random(&[1, 2, 3, 4], 4), &[1, 2, 3, 4]).unwrap();
        let zero = Tensor::zeros(&[1, 2, 3, 4]).unwrap();
        let dirs = DirectionSet::default();
        let m = motion_filter(&zero, &next, &dirs).unwrap().to_vec();
        let block = 2 * 3 * 4;
        for (i, dir) in dirs.as_slice().iter().enumerate() {
            let want: Vec<f64> = shift(&next, *dir).unwrap().to_vec().iter().map(|v| -v).collect();
            assert_eq!(&m[i * block..(i + 1) * block], &want[..]);
        }
    }

    #[test]
    fn motion_filter_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 2, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[1, 2, 3, 4]).unwrap();
        assert!(matches!(
            motion_filter(&a, &b, &DirectionSet::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reduced_channel_arithmetic() {
        let spec = MotionBlockSpec::new(FusionVariant::Concat, 16, DirectionSet::default(), 16).unwrap();
        assert_eq!(spec.reduced_channels(), 1);
        assert_eq!(spec.compression_in_channels(), 21);
        let tiny = MotionBlockSpec::new(FusionVariant::Sum, 16, DirectionSet::default(), 4).unwrap();
        assert_eq!(tiny.reduced_channels(), 1);
        assert_eq!(tiny.compression_in_channels(), 5);
        assert!(MotionBlockSpec::new(FusionVariant::Sum, 0, DirectionSet::default(), 4).is_err());
    }

    #[test]
    fn block_registers_documented_parameter_count() {
        for variant in [FusionVariant::Sum, FusionVariant::Concat] {
            let mut reg = ParamRegistry::<f32>::new();
            let spec = MotionBlockSpec::new(variant, 4, DirectionSet::default(), 16).unwrap();
            MotionBlock::new(&mut reg, "m", spec.clone(), Init { seed: 1 }).unwrap();
            assert_eq!(reg.parameter_count(), spec.parameter_count());
        }
    }
}
