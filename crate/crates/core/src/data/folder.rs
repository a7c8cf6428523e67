//! Frame-folder datasets.
//!
//! Layout:
//!
//! ```text
//! <root>/classes.txt             class name per line, line number = index
//! <root>/labels.csv              clip_id,class_index
//! <root>/<clip_id>/frame_00000.png
//! <root>/<clip_id>/frame_00001.png
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};

use super::{ClipSource, Frame, VideoSample, CHANNELS};
use crate::error::{Error, Result};

pub const LABELS_FILE: &str = "labels.csv";
pub const CLASSES_FILE: &str = "classes.txt";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Debug)]
struct ClipEntry {
    id: String,
    label: usize,
    frames: Vec<PathBuf>,
}

/// Clips whose frames are decoded on access.
#[derive(Clone, Debug, Default)]
pub struct FolderDataset {
    pub class_names: Vec<String>,
    clips: Vec<ClipEntry>,
}

/// A loaded dataset plus the clips that were skipped and why.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: FolderDataset,
    pub skipped: Vec<Error>,
}

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_labels(root: &Path) -> Result<HashMap<String, usize>> {
    let path = root.join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ingestion(&path, e.to_string()))?;
    let mut labels = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .rsplit_once(',')
            .and_then(|(id, l)| l.trim().parse::<usize>().ok().map(|l| (id.trim().to_string(), l)));
        match parsed {
            Some((id, label)) => {
                labels.insert(id, label);
            }
            None => return Err(ingestion(&path, format!("line {} malformed: '{line}'", n + 1))),
        }
    }
    Ok(labels)
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn probe_dimensions(path: &Path) -> Result<(u32, u32)> {
    ImageReader::open(path)
        .map_err(|e| ingestion(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingestion(path, e.to_string()))?
        .into_dimensions()
        .map_err(|e| ingestion(path, format!("undecodable image: {e}")))
}

/// Indexes a frame-folder tree. Frame counts come from directory listings
/// and image headers; pixel data is decoded lazily. Unusable clips are
/// skipped and reported in [`FolderLoad::skipped`].
pub fn load_frame_folder(root: &Path) -> Result<FolderLoad> {
    let labels = read_labels(root)?;
    let class_names = match fs::read_to_string(root.join(CLASSES_FILE)) {
        Ok(text) => text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect(),
        Err(_) => Vec::new(),
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut clips = Vec::new();
    let mut skipped = Vec::new();
    for dir in dirs {
        let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let Some(&label) = labels.get(&id) else {
            skipped.push(ingestion(&dir, "no label in labels.csv"));
            continue;
        };
        if !class_names.is_empty() && label >= class_names.len() {
            skipped.push(ingestion(&dir, format!("label {label} outside classes.txt")));
            continue;
        }
        let frames = frame_files(&dir)?;
        if frames.is_empty() {
            skipped.push(ingestion(&dir, "empty clip directory"));
            continue;
        }
        let mut extent = None;
        let mut problem = None;
        for f in &frames {
            match probe_dimensions(f) {
                Ok(dims) if extent.is_none_or(|e| e == dims) => extent = Some(dims),
                Ok(dims) => {
                    problem = Some(ingestion(f, format!("extent {dims:?} differs from {extent:?}")));
                    break;
                }
                Err(e) => {
                    problem = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = problem {
            skipped.push(e);
            continue;
        }
        clips.push(ClipEntry { id, label, frames });
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} clip(s) under {}", skipped.len(), root.display());
    }
    Ok(FolderLoad {
        dataset: FolderDataset { class_names, clips },
        skipped,
    })
}

fn decode(path: &Path) -> Result<Frame> {
    let img = ImageReader::open(path)
        .map_err(|e| ingestion(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| ingestion(path, e.to_string()))?
        .decode()
        .map_err(|e| ingestion(path, format!("undecodable image: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0u8; CHANNELS * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..CHANNELS {
            pixels[(c * h + y as usize) * w + x as usize] = p.0[c];
        }
    }
    Frame::new(h, w, pixels)
}

impl FolderDataset {
    /// Decodes every frame of one clip.
    pub fn load_sample(&self, index: usize) -> Result<VideoSample> {
        let clip = &self.clips[index];
        let frames = clip.frames.iter().map(|p| decode(p)).collect::<Result<Vec<_>>>()?;
        VideoSample::new(clip.id.clone(), clip.label, frames)
    }
}

impl ClipSource for FolderDataset {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.clips[index].id
    }

    fn label(&self, index: usize) -> usize {
        self.clips[index].label
    }

    fn num_frames(&self, index: usize) -> usize {
        self.clips[index].frames.len()
    }

    fn frame(&self, index: usize, t: usize) -> Result<Frame> {
        let path = self.clips[index]
            .frames
            .get(t)
            .ok_or_else(|| Error::Input(format!("frame {t} out of range for clip {index}")))?;
        decode(path)
    }
}

fn encode(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height, frame.width);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| frame.pixels[(c * h + y as usize) * w + x as usize];
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ingestion(path, e.to_string()))
}

/// Writes clips in the frame-folder layout (PNG frames, lossless).
pub fn write_frame_folder(root: &Path, samples: &[VideoSample], class_names: &[String]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut classes = BufWriter::new(fs::File::create(root.join(CLASSES_FILE))?);
    for name in class_names {
        writeln!(classes, "{name}")?;
    }
    classes.flush()?;
    let mut labels = BufWriter::new(fs::File::create(root.join(LABELS_FILE))?);
    for sample in samples {
        let dir = root.join(&sample.id);
        fs::create_dir_all(&dir)?;
        for (t, frame) in sample.frames.iter().enumerate() {
            encode(frame, &dir.join(format!("frame_{t:05}.png")))?;
        }
        writeln!(labels, "{},{}", sample.id, sample.label)?;
    }
    labels.flush()?;
    Ok(())
}
