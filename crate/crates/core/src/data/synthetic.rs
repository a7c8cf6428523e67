//! Synthetic symmetric-gesture clips.
//!
//! Each clip shows one bright square on a dark canvas. Classes come in
//! pairs whose clips are exact time-reversals of each other: the second
//! member of a pair renders the first member's trajectory backwards, with
//! the noise of each rendered instant attached to that instant. A model that
//! ignores frame order sees the same set of frames for both members.
//!
//! Every pair has its own dominant colour channel, so a single frame tells
//! the pairs apart but not the two members of a pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Frame, VideoSample, CHANNELS};
use crate::error::{Error, Result};
use crate::util::{derive_seed, fnv1a64, rng_for};

const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionProgram {
    SwipeLeft,
    SwipeRight,
    SwipeUp,
    SwipeDown,
    Grow,
    Shrink,
}

impl MotionProgram {
    pub const ALL: [MotionProgram; 6] = [
        MotionProgram::SwipeLeft,
        MotionProgram::SwipeRight,
        MotionProgram::SwipeUp,
        MotionProgram::SwipeDown,
        MotionProgram::Grow,
        MotionProgram::Shrink,
    ];

    /// The program whose clips are this program's clips played backwards.
    pub fn mirror(self) -> MotionProgram {
        use MotionProgram::*;
        match self {
            SwipeLeft => SwipeRight,
            SwipeRight => SwipeLeft,
            SwipeUp => SwipeDown,
            SwipeDown => SwipeUp,
            Grow => Shrink,
            Shrink => Grow,
        }
    }

    /// Programs rendered forward; their mirrors render the same trajectory
    /// in reverse.
    fn is_forward(self) -> bool {
        matches!(
            self,
            MotionProgram::SwipeLeft | MotionProgram::SwipeUp | MotionProgram::Grow
        )
    }

    /// Colour channel that dominates this program's pair.
    pub fn pair_channel(self) -> usize {
        use MotionProgram::*;
        match self {
            SwipeLeft | SwipeRight => 0,
            SwipeUp | SwipeDown => 1,
            Grow | Shrink => 2,
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, MotionProgram::SwipeLeft | MotionProgram::SwipeRight)
    }

    pub fn name(self) -> &'static str {
        use MotionProgram::*;
        match self {
            SwipeLeft => "swipe_left",
            SwipeRight => "swipe_right",
            SwipeUp => "swipe_up",
            SwipeDown => "swipe_down",
            Grow => "grow",
            Shrink => "shrink",
        }
    }
}

impl fmt::Display for MotionProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionProgram {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MotionProgram::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown motion program '{s}'")))
    }
}

/// Relabeling that maps a clip's class to the class of its reversal, for
/// class lists laid out as adjacent symmetric pairs.
pub fn paired_class(class: usize) -> usize {
    class ^ 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub num_frames: usize,
    pub classes: Vec<MotionProgram>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_height: 64,
            image_width: 64,
            num_frames: 16,
            classes: MotionProgram::ALL.to_vec(),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 16 || self.image_width < 16 {
            return Err(Error::Config("synthetic canvas must be at least 16x16".into()));
        }
        if self.num_frames < 2 {
            return Err(Error::Config("synthetic clips need at least 2 frames".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std {} invalid", self.noise_std)));
        }
        if self.classes.is_empty() || self.classes.len() % 2 != 0 {
            return Err(Error::Config("classes must form symmetric pairs".into()));
        }
        for pair in self.classes.chunks(2) {
            if pair[1] != pair[0].mirror() {
                return Err(Error::Config(format!(
                    "classes {} and {} are not a reversal pair",
                    pair[0], pair[1]
                )));
            }
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::Config(format!("class {c} listed twice")));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name().to_string()).collect()
    }

    /// Seed path of clip `index` of class `class`.
    pub fn clip_seed(&self, class: usize, index: usize) -> u64 {
        derive_seed(self.seed, &[class as u64, index as u64])
    }
}

/// Square trajectory over normalized time `τ ∈ [0, 1]`.
#[derive(Clone, Copy, Debug)]
struct Trajectory {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    side0: f64,
    side1: f64,
    color: [f64; CHANNELS],
}

impl Trajectory {
    /// `(left, top, side)` in pixels at `τ`.
    fn square_at(&self, tau: f64) -> (i64, i64, i64) {
        let lerp = |a: f64, b: f64| a + (b - a) * tau;
        let side = lerp(self.side0, self.side1).round();
        let cx = lerp(self.x0, self.x1);
        let cy = lerp(self.y0, self.y1);
        (
            (cx - side / 2.0).round() as i64,
            (cy - side / 2.0).round() as i64,
            side as i64,
        )
    }

    fn fits(&self, spec: &SyntheticSpec) -> bool {
        (0..spec.num_frames).all(|u| {
            let (l, t, s) = self.square_at(tau(u, spec.num_frames));
            l >= 0 && t >= 0 && l + s <= spec.image_width as i64 && t + s <= spec.image_height as i64
        })
    }
}

fn tau(u: usize, frames: usize) -> f64 {
    u as f64 / (frames - 1) as f64
}

/// Draws initial conditions for a forward-rendered program (swipe left,
/// swipe up, grow), rejecting trajectories that leave the canvas.
fn sample_trajectory<R: Rng>(program: MotionProgram, spec: &SyntheticSpec, rng: &mut R) -> Result<Trajectory> {
    let (w, h) = (spec.image_width as f64, spec.image_height as f64);
    let short = w.min(h);
    for _ in 0..MAX_ATTEMPTS {
        let mut color = [0.0; CHANNELS];
        for (c, v) in color.iter_mut().enumerate() {
            *v = if c == program.pair_channel() {
                rng.random_range(0.75..1.0)
            } else {
                rng.random_range(0.15..0.45)
            };
        }
        let traj = match program {
            MotionProgram::SwipeLeft | MotionProgram::SwipeUp => {
                let side = rng.random_range(short * 0.125..=short * 0.22).round();
                let travel = rng.random_range(short * 0.3..short * 0.55);
                let cx = rng.random_range(side / 2.0..w - side / 2.0);
                let cy = rng.random_range(side / 2.0..h - side / 2.0);
                let (x1, y1) = if program == MotionProgram::SwipeLeft {
                    (cx - travel, cy)
                } else {
                    (cx, cy - travel)
                };
                Trajectory {
                    x0: cx,
                    y0: cy,
                    x1,
                    y1,
                    side0: side,
                    side1: side,
                    color,
                }
            }
            MotionProgram::Grow => {
                let side0 = rng.random_range(short * 0.09..short * 0.19);
                let side1 = side0 + rng.random_range(short * 0.22..short * 0.4);
                let cx = rng.random_range(side1 / 2.0..w - side1 / 2.0);
                let cy = rng.random_range(side1 / 2.0..h - side1 / 2.0);
                Trajectory {
                    x0: cx,
                    y0: cy,
                    x1: cx,
                    y1: cy,
                    side0,
                    side1,
                    color,
                }
            }
            other => unreachable!("{other} is rendered as a reversal"),
        };
        if traj.fits(spec) {
            return Ok(traj);
        }
    }
    Err(Error::Generation(format!(
        "{program}: no in-canvas trajectory after {MAX_ATTEMPTS} attempts"
    )))
}

fn render(traj: &Trajectory, spec: &SyntheticSpec, clip_seed: u64, u: usize) -> Result<Frame> {
    let (h, w) = (spec.image_height, spec.image_width);
    let (left, top, side) = traj.square_at(tau(u, spec.num_frames));
    let noise = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut rng = rng_for(clip_seed, &[1, u as u64]);
    let mut pixels = Vec::with_capacity(CHANNELS * h * w);
    for c in 0..CHANNELS {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let inside = x >= left && x < left + side && y >= top && y < top + side;
                let base = if inside { traj.color[c] } else { 0.0 };
                let v = base + noise.map_or(0.0, |n| n.sample(&mut rng));
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Frame::new(h, w, pixels)
}

/// Renders one clip of `program` from a seed path. The mirror program with
/// the same seed path yields exactly the reversed frame sequence.
pub fn generate_clip(
    spec: &SyntheticSpec,
    program: MotionProgram,
    clip_seed: u64,
    id: impl Into<String>,
    label: usize,
) -> Result<VideoSample> {
    let forward = if program.is_forward() {
        program
    } else {
        program.mirror()
    };
    let traj = sample_trajectory(forward, spec, &mut rng_for(clip_seed, &[0]))?;
    let n = spec.num_frames;
    let frames = (0..n)
        .map(|t| {
            let u = if program.is_forward() { t } else { n - 1 - t };
            render(&traj, spec, clip_seed, u)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoSample::new(id, label, frames)
}

/// `count_per_class` clips for every class, class-major order.
pub fn generate_synthetic(spec: &SyntheticSpec, count_per_class: usize) -> Result<Vec<VideoSample>> {
    spec.validate()?;
    if count_per_class == 0 {
        return Err(Error::Config("count per class must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(spec.classes.len() * count_per_class);
    for (label, &program) in spec.classes.iter().enumerate() {
        for i in 0..count_per_class {
            let id = format!("{}_{i:05}", program.name());
            out.push(generate_clip(spec, program, spec.clip_seed(label, i), id, label)?);
        }
    }
    Ok(out)
}

/// Splits by hashing clip ids: within each class the
/// `round(val_fraction · n)` ids with the smallest hash go to validation.
pub fn split_by_id_hash(
    samples: Vec<VideoSample>,
    val_fraction: f64,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} outside [0, 1)"
        )));
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut is_val = vec![false; samples.len()];
    for class in 0..num_classes {
        let mut members: Vec<(u64, usize)> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, s)| (fnv1a64(s.id.as_bytes()), i))
            .collect();
        members.sort_unstable();
        let quota = (val_fraction * members.len() as f64).round() as usize;
        for &(_, i) in &members[..quota] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, v) in samples.into_iter().zip(is_val) {
        if v {
            val.push(s)
        } else {
            train.push(s)
        }
    }
    Ok((train, val))
}
