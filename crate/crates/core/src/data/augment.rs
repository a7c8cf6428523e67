//! Scale-jittered cropping, bilinear resize and pixel normalization.

use rand::Rng;

use super::{Frame, CHANNELS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub scales: Vec<f32>,
    pub crop_height: usize,
    pub crop_width: usize,
    pub horizontal_flip: bool,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            scales: vec![1.0, 0.875, 0.75, 0.625],
            crop_height: 64,
            crop_width: 64,
            horizontal_flip: false,
        }
    }
}

impl AugmentSpec {
    /// `left_right_pairs` says whether the label set contains classes that a
    /// horizontal mirror would swap; flipping is refused in that case.
    pub fn validate(&self, left_right_pairs: bool) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config(format!("crop scales must lie in (0, 1], got {:?}", self.scales)));
        }
        if self.crop_height == 0 || self.crop_width == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if self.horizontal_flip && left_right_pairs {
            return Err(Error::Config(
                "horizontal flip would swap left/right classes; disable it".into(),
            ));
        }
        Ok(())
    }
}

/// A square crop window in source pixels, shared by every frame of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub flip: bool,
}

fn check_extent(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Input(format!("degenerate frame extent {height}x{width}")));
    }
    Ok(())
}

impl CropParams {
    /// Training crop: random scale from the spec, random position.
    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, spec: &AugmentSpec, rng: &mut R) -> Result<Self> {
        check_extent(height, width)?;
        if spec.scales.is_empty() {
            return Err(Error::Config("no crop scales".into()));
        }
        let scale = spec.scales[rng.random_range(0..spec.scales.len())];
        let side = ((height.min(width) as f32 * scale).round() as usize).clamp(1, height.min(width));
        let top = rng.random_range(0..=height - side);
        let left = rng.random_range(0..=width - side);
        let flip = spec.horizontal_flip && rng.random_bool(0.5);
        Ok(CropParams { top, left, side, flip })
    }

    /// Evaluation crop: the largest centered square, no flip.
    pub fn center(height: usize, width: usize) -> Result<Self> {
        check_extent(height, width)?;
        let side = height.min(width);
        Ok(CropParams {
            top: (height - side) / 2,
            left: (width - side) / 2,
            side,
            flip: false,
        })
    }
}

fn sample_points(start: usize, side: usize, out: usize) -> Vec<(usize, usize, f32)> {
    let step = side as f32 / out as f32;
    let last = (side - 1) as f32;
    (0..out)
        .map(|i| {
            let s = ((i as f32 + 0.5) * step - 0.5).clamp(0.0, last);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(side - 1);
            (start + lo, start + hi, s - lo as f32)
        })
        .collect()
}

/// Crops `frame` and bilinearly resizes the window to `out_h x out_w`,
/// writing `[0,1]` values channel-major into `out`.
pub fn apply_crop(frame: &Frame, crop: &CropParams, out_h: usize, out_w: usize, out: &mut [f32]) -> Result<()> {
    check_extent(frame.height, frame.width)?;
    if crop.side == 0 || crop.top + crop.side > frame.height || crop.left + crop.side > frame.width {
        return Err(Error::Input(format!(
            "crop {crop:?} outside {}x{} frame",
            frame.height, frame.width
        )));
    }
    if out.len() != CHANNELS * out_h * out_w {
        return Err(Error::Input(format!("output buffer holds {} values", out.len())));
    }
    let ys = sample_points(crop.top, crop.side, out_h);
    let mut xs = sample_points(crop.left, crop.side, out_w);
    if crop.flip {
        xs.reverse();
    }
    for c in 0..CHANNELS {
        let plane = &mut out[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = frame.value(c, y0, x0) * (1.0 - fx) + frame.value(c, y0, x1) * fx;
                let bottom = frame.value(c, y1, x0) * (1.0 - fx) + frame.value(c, y1, x1) * fx;
                plane[i * out_w + j] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

/// Augments one frame with a freshly drawn crop.
pub fn augment<R: Rng + ?Sized>(frame: &Frame, spec: &AugmentSpec, rng: &mut R) -> Result<Vec<f32>> {
    let crop = CropParams::sample(frame.height, frame.width, spec, rng)?;
    let mut out = vec![0.0; CHANNELS * spec.crop_height * spec.crop_width];
    apply_crop(frame, &crop, spec.crop_height, spec.crop_width, &mut out)?;
    Ok(out)
}

/// Per-channel standardization applied after scaling pixels to `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; CHANNELS],
    pub std: [f32; CHANNELS],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; CHANNELS],
            std: [0.25; CHANNELS],
        }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("bad normalization {self:?}")));
        }
        Ok(())
    }

    /// Standardizes a channel-major image in place.
    pub fn apply(&self, image: &mut [f32]) {
        let plane = image.len() / CHANNELS;
        for (c, chunk) in image.chunks_mut(plane).enumerate() {
            let inv = 1.0 / self.std[c];
            for v in chunk {
                *v = (*v - self.mean[c]) * inv;
            }
        }
    }
}
