//! Video clips, datasets, and the input pipeline.

pub mod augment;
pub mod folder;
pub mod synthetic;

pub use augment::{AugmentSpec, CropParams, Normalization};
pub use folder::{load_frame_folder, write_frame_folder, FolderDataset, FolderLoad};
pub use synthetic::{
    generate_clip, generate_synthetic, paired_class, split_by_id_hash, MotionProgram, SyntheticSpec,
};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// 8-bit RGB image stored channel-major (`C, H, W`). Pixel `p` stands for
/// the value `p / 255` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != CHANNELS * height * width {
            return Err(Error::Input(format!(
                "frame {height}x{width} with {} bytes",
                pixels.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Frame {
            height,
            width,
            pixels: vec![value; CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn value(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x] as f32 / 255.0
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().map(|p| *p as f64).sum::<f64>() / (255.0 * self.pixels.len() as f64)
    }
}

/// A decoded clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoSample {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Frame>,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, label: usize, frames: Vec<Frame>) -> Result<Self> {
        let id = id.into();
        let first = frames
            .first()
            .ok_or_else(|| Error::Input(format!("clip {id} has no frames")))?;
        if frames
            .iter()
            .any(|f| f.height != first.height || f.width != first.width)
        {
            return Err(Error::Input(format!("clip {id} mixes frame extents")));
        }
        Ok(VideoSample { id, label, frames })
    }

    pub fn reversed(&self) -> VideoSample {
        VideoSample {
            id: self.id.clone(),
            label: self.label,
            frames: self.frames.iter().rev().cloned().collect(),
        }
    }
}

/// Random access to clips without requiring them all to be decoded.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;

    fn id(&self, index: usize) -> &str;

    fn label(&self, index: usize) -> usize;

    fn num_frames(&self, index: usize) -> usize;

    fn frame(&self, index: usize, t: usize) -> Result<Frame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fully decoded clips held in memory.
#[derive(Clone, Debug, Default)]
pub struct InMemoryDataset {
    pub samples: Vec<VideoSample>,
}

impl InMemoryDataset {
    pub fn new(samples: Vec<VideoSample>) -> Self {
        InMemoryDataset { samples }
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in &self.samples {
            if s.label < num_classes {
                counts[s.label] += 1;
            }
        }
        counts
    }
}

impl ClipSource for InMemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.samples[index].id
    }

    fn label(&self, index: usize) -> usize {
        self.samples[index].label
    }

    fn num_frames(&self, index: usize) -> usize {
        self.samples[index].frames.len()
    }

    fn frame(&self, index: usize, t: usize) -> Result<Frame> {
        self.samples[index]
            .frames
            .get(t)
            .cloned()
            .ok_or_else(|| Error::Input(format!("frame {t} out of range for clip {index}")))
    }
}
