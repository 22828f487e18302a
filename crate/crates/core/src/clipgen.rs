//! Procedural dark micro-videos.
//!
//! Each class is a motion program rendered as a bright primitive over a dim
//! textured background. The rendered scene is multiplied frame by frame by the
//! illumination level active at that frame, then additive Gaussian noise is
//! applied and the result clamped to `[0, 1]`.
//!
//! Motion programs (class id modulo 10):
//!
//! | id | program            | primitive |
//! |----|--------------------|-----------|
//! | 0  | translate left     | blob      |
//! | 1  | translate right    | blob      |
//! | 2  | translate up       | blob      |
//! | 3  | translate down     | blob      |
//! | 4  | rotate clockwise   | bar       |
//! | 5  | rotate counter-cw  | bar       |
//! | 6  | oscillate sideways | blob      |
//! | 7  | scale pulse        | blob      |
//! | 8  | oscillate vertical | blob      |
//! | 9  | orbit              | blob      |
//!
//! `class_id / 10` picks the primitive variant (disk / square / ring for
//! blobs, thin bar / thick bar / cross for bars), giving up to 30 classes.
//!
//! Datasets are stored as generation manifests; pixels are re-rendered from
//! the stored seeds on demand.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

pub const MIN_FRAMES: usize = 2;
pub const MIN_SIDE: usize = 8;
pub const NUM_PROGRAMS: usize = 10;
pub const MAX_CLASSES: usize = 30;
/// Train clips every class must keep so balanced batches with `n_v = 2` exist.
pub const MIN_TRAIN_PER_CLASS: usize = 2;
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_FPS: f64 = 8.0;

/// Clip extent `(frames, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < MIN_FRAMES || self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(invalid(format!(
                "clip dims {self} below minimum (frames >= {MIN_FRAMES}, height/width >= {MIN_SIDE})"
            )));
        }
        Ok(())
    }
}

impl Default for Dims {
    fn default() -> Self {
        Self::new(16, 32, 32)
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

impl FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(invalid(format!("dims must look like LxHxW, got {s:?}")));
        }
        let mut vals = [0usize; 3];
        for (v, p) in vals.iter_mut().zip(&parts) {
            *v = p
                .trim()
                .parse()
                .map_err(|_| invalid(format!("bad dimension {p:?} in {s:?}")))?;
        }
        Ok(Self::new(vals[0], vals[1], vals[2]))
    }
}

/// RGB video, `[3, frames, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub data: Array4<f64>,
    pub fps_tag: f64,
}

impl VideoClip {
    pub fn new(data: Array4<f64>, fps_tag: f64) -> Result<Self> {
        let clip = Self { data, fps_tag };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s[0] != 3 {
            return Err(Error::Shape(format!("clip must have 3 channels, got {}", s[0])));
        }
        self.dims().validate()?;
        if !(self.fps_tag > 0.0 && self.fps_tag.is_finite()) {
            return Err(invalid(format!("fps_tag must be positive, got {}", self.fps_tag)));
        }
        if let Some(v) = self.data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Invariant(format!("clip value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        let s = self.data.shape();
        Dims::new(s[1], s[2], s[3])
    }

    /// Frame `t` as `[3, H, W]`.
    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(1), t)
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn frame_means(&self) -> Vec<f64> {
        (0..self.dims().frames)
            .map(|t| self.frame(t).mean().unwrap_or(0.0))
            .collect()
    }
}

/// Interval `[t_start, t_end)` lit at `level` instead of the base level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: usize,
    pub t_end: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationProfile {
    pub base_level: f64,
    #[serde(default)]
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl IlluminationProfile {
    pub fn constant(level: f64, noise_sigma: f64) -> Self {
        Self { base_level: level, segments: Vec::new(), noise_sigma }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        let in_range = |l: f64| l > 0.0 && l <= 1.0;
        if !in_range(self.base_level) {
            return Err(invalid(format!("base_level {} not in (0, 1]", self.base_level)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        let mut prev_end = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if !in_range(s.level) {
                return Err(invalid(format!("segment {i} level {} not in (0, 1]", s.level)));
            }
            if s.t_start >= s.t_end || s.t_end > frames {
                return Err(invalid(format!(
                    "segment {i} [{}, {}) not a non-empty range within [0, {frames})",
                    s.t_start, s.t_end
                )));
            }
            if i > 0 && s.t_start < prev_end {
                return Err(invalid(format!("segment {i} overlaps or precedes segment {}", i - 1)));
            }
            prev_end = s.t_end;
        }
        Ok(())
    }

    pub fn level_at(&self, t: usize) -> f64 {
        self.segments
            .iter()
            .find(|s| (s.t_start..s.t_end).contains(&t))
            .map_or(self.base_level, |s| s.level)
    }

    pub fn has_transition(&self) -> bool {
        self.segments.iter().any(|s| s.level != self.base_level)
    }
}

/// Profile families. `A` is the labeled benchmark; `B` is a darker, noisier
/// capture setup used only to enlarge the unlabeled pretraining pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileFamily {
    A,
    B,
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Draws an illumination profile. About half the family-A draws carry a
/// transition segment that is either much darker or much brighter than the base.
pub fn sample_profile(family: ProfileFamily, frames: usize, rng: &mut Rng) -> IlluminationProfile {
    let (base_lo, base_hi, noise_lo, noise_hi, p_transition) = match family {
        ProfileFamily::A => (0.01, 0.5, 0.001, 0.003, 0.5),
        ProfileFamily::B => (0.005, 0.2, 0.002, 0.005, 0.7),
    };
    let base_level = log_uniform(rng, base_lo, base_hi);
    let noise_sigma = rng.random_range(noise_lo..noise_hi);
    let mut segments = Vec::new();
    if frames >= 4 && rng.random_bool(p_transition) {
        let len = rng.random_range(frames / 4..=frames / 2).max(1);
        let start = rng.random_range(0..=frames - len);
        let level = if rng.random_bool(0.5) {
            rng.random_range(0.002..0.01)
        } else {
            rng.random_range(0.6..1.0)
        };
        segments.push(Segment { t_start: start, t_end: start + len, level });
    }
    IlluminationProfile { base_level, segments, noise_sigma }
}

struct Nuisance {
    color: [f64; 3],
    size: f64,
    offset: (f64, f64),
    speed: f64,
    phase: f64,
    bg_level: f64,
    bg_freq: (f64, f64),
    bg_phase: (f64, f64),
}

impl Nuisance {
    fn draw(rng: &mut Rng) -> Self {
        let tint = [0.95, 0.9, 0.85];
        Self {
            color: tint.map(|c| c * rng.random_range(0.88..1.0)),
            size: rng.random_range(0.85..1.15),
            offset: (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06)),
            speed: rng.random_range(0.85..1.15),
            phase: rng.random_range(0.0..2.0 * PI),
            bg_level: rng.random_range(0.3..0.4),
            bg_freq: (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0)),
            bg_phase: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        }
    }
}

#[derive(Clone, Copy)]
enum Primitive {
    Disk { c: (f64, f64), r: f64 },
    Square { c: (f64, f64), h: f64 },
    Ring { c: (f64, f64), r: f64 },
    Bar { c: (f64, f64), half_len: f64, half_width: f64, angle: f64 },
    Cross { c: (f64, f64), half_len: f64, half_width: f64, angle: f64 },
}

fn bar_sd(p: (f64, f64), c: (f64, f64), hl: f64, hw: f64, angle: f64) -> f64 {
    let (dx, dy) = (p.0 - c.0, p.1 - c.1);
    let (s, co) = angle.sin_cos();
    let along = dx * co + dy * s;
    let across = -dx * s + dy * co;
    (along.abs() - hl).max(across.abs() - hw)
}

impl Primitive {
    fn signed_distance(&self, p: (f64, f64)) -> f64 {
        match *self {
            Primitive::Disk { c, r } => ((p.0 - c.0).hypot(p.1 - c.1)) - r,
            Primitive::Square { c, h } => (p.0 - c.0).abs().max((p.1 - c.1).abs()) - h,
            Primitive::Ring { c, r } => ((p.0 - c.0).hypot(p.1 - c.1) - 0.7 * r).abs() - 0.3 * r,
            Primitive::Bar { c, half_len, half_width, angle } => bar_sd(p, c, half_len, half_width, angle),
            Primitive::Cross { c, half_len, half_width, angle } => {
                bar_sd(p, c, half_len, half_width, angle).min(bar_sd(p, c, half_len, half_width, angle + PI / 2.0))
            }
        }
    }
}

fn primitive_at(class_id: usize, n: &Nuisance, progress: f64) -> Primitive {
    let program = class_id % NUM_PROGRAMS;
    // Neighbouring classes get different primitives; (program, variant) stays unique per class.
    let variant = (program + class_id / NUM_PROGRAMS) % 3;
    let sp = n.speed;
    let (ox, oy) = n.offset;
    let base_r = 0.16 * n.size;
    let blob = |c: (f64, f64), r: f64| match variant {
        0 => Primitive::Disk { c, r },
        1 => Primitive::Square { c, h: 0.9 * r },
        _ => Primitive::Ring { c, r: 1.2 * r },
    };
    let bar = |angle: f64| {
        let c = (0.5 + ox, 0.5 + oy);
        let half_len = 0.3 * n.size;
        match variant {
            0 => Primitive::Bar { c, half_len, half_width: 0.05 * n.size, angle },
            1 => Primitive::Bar { c, half_len, half_width: 0.09 * n.size, angle },
            _ => Primitive::Cross { c, half_len, half_width: 0.05 * n.size, angle },
        }
    };
    let sweep = 0.25 * sp;
    match program {
        0 => blob((0.5 + ox + sweep - 2.0 * sweep * progress, 0.5 + oy), base_r),
        1 => blob((0.5 + ox - sweep + 2.0 * sweep * progress, 0.5 + oy), base_r),
        2 => blob((0.5 + ox, 0.5 + oy + sweep - 2.0 * sweep * progress), base_r),
        3 => blob((0.5 + ox, 0.5 + oy - sweep + 2.0 * sweep * progress), base_r),
        4 => bar(n.phase + PI * sp * progress),
        5 => bar(n.phase - PI * sp * progress),
        6 => blob((0.5 + ox + 0.22 * (3.0 * PI * sp * progress + n.phase).sin(), 0.5 + oy), base_r),
        7 => blob((0.5 + ox, 0.5 + oy), base_r * (1.0 + 0.6 * (2.0 * PI * sp * progress + n.phase).sin())),
        8 => blob((0.5 + ox, 0.5 + oy + 0.22 * (3.0 * PI * sp * progress + n.phase).sin()), base_r),
        _ => {
            let a = 2.0 * PI * sp * progress + n.phase;
            blob((0.5 + ox + 0.2 * a.cos(), 0.5 + oy + 0.2 * a.sin()), base_r)
        }
    }
}

/// Renders one clip. Output is a pure function of the arguments.
pub fn generate_clip(class_id: usize, profile: &IlluminationProfile, seed: u64, dims: Dims) -> Result<VideoClip> {
    render(class_id, profile, seed, dims, true)
}

/// Same as [`generate_clip`] but stops before noise injection (no clamp needed).
pub fn render_noiseless(class_id: usize, profile: &IlluminationProfile, seed: u64, dims: Dims) -> Result<VideoClip> {
    render(class_id, profile, seed, dims, false)
}

fn render(class_id: usize, profile: &IlluminationProfile, seed: u64, dims: Dims, with_noise: bool) -> Result<VideoClip> {
    if class_id >= MAX_CLASSES {
        return Err(invalid(format!("class_id {class_id} exceeds the {MAX_CLASSES} available motion programs")));
    }
    dims.validate()?;
    profile.validate(dims.frames)?;

    let mut rng = rng::seeded(seed);
    let nuisance = Nuisance::draw(&mut rng);
    let Dims { frames, height, width } = dims;
    let aa = 1.0 / height.min(width) as f64;

    // Static background reflectance.
    let mut background = vec![0.0; height * width];
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64;
            let tex = (2.0 * PI * (nuisance.bg_freq.0 * u + nuisance.bg_phase.0)).sin()
                * (2.0 * PI * (nuisance.bg_freq.1 * v + nuisance.bg_phase.1)).sin();
            background[y * width + x] = nuisance.bg_level * (1.0 + 0.05 * tex);
        }
    }

    let mut data = Array4::<f64>::zeros((3, frames, height, width));
    let denom = (frames - 1).max(1) as f64;
    for t in 0..frames {
        let prim = primitive_at(class_id, &nuisance, t as f64 / denom);
        let level = profile.level_at(t);
        for y in 0..height {
            let v = (y as f64 + 0.5) / height as f64;
            for x in 0..width {
                let u = (x as f64 + 0.5) / width as f64;
                let alpha = (0.5 - prim.signed_distance((u, v)) / aa).clamp(0.0, 1.0);
                let bg = background[y * width + x];
                for c in 0..3 {
                    let refl = bg * (1.0 - alpha) + nuisance.color[c] * alpha;
                    data[[c, t, y, x]] = level * refl;
                }
            }
        }
    }

    if with_noise && profile.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, profile.noise_sigma).map_err(|e| invalid(e.to_string()))?;
        data.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(VideoClip { data, fps_tag: DEFAULT_FPS })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?} (train|val|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: u32,
    pub class_id: usize,
    pub seed: u64,
    pub profile: IlluminationProfile,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub format_version: u32,
    pub num_classes: usize,
    pub dims: Dims,
    pub fps_tag: f64,
    pub sampler_seed: u64,
    pub clips: Vec<ClipRecord>,
}

fn split_counts(n: usize) -> (usize, usize, usize) {
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    (n.saturating_sub(test + val), val, test)
}

/// Balanced dataset with a stratified, seeded 70/10/20 train/val/test split.
pub fn generate_dataset(num_classes: usize, clips_per_class: usize, dims: Dims, sampler_seed: u64) -> Result<SyntheticDataset> {
    if !(2..=MAX_CLASSES).contains(&num_classes) {
        return Err(invalid(format!("class count {num_classes} must be in [2, {MAX_CLASSES}]")));
    }
    dims.validate()?;
    let (train, _, _) = split_counts(clips_per_class);
    if clips_per_class < 4 || train < MIN_TRAIN_PER_CLASS {
        return Err(Error::Insufficient(format!(
            "clips_per_class {clips_per_class} too small: need >= 4 so every class keeps {MIN_TRAIN_PER_CLASS} train clips plus one val and one test clip"
        )));
    }

    let mut sampler = rng::seeded(sampler_seed);
    let mut split_rng = rng::derived(sampler_seed, "split");
    let mut clips = Vec::with_capacity(num_classes * clips_per_class);
    for class_id in 0..num_classes {
        let mut splits = Vec::with_capacity(clips_per_class);
        let (tr, va, te) = split_counts(clips_per_class);
        splits.extend(std::iter::repeat_n(Split::Train, tr));
        splits.extend(std::iter::repeat_n(Split::Val, va));
        splits.extend(std::iter::repeat_n(Split::Test, te));
        splits.shuffle(&mut split_rng);
        for split in splits {
            let id = clips.len() as u32;
            let seed = sampler.random::<u64>();
            let profile = sample_profile(ProfileFamily::A, dims.frames, &mut sampler);
            clips.push(ClipRecord { id, class_id, seed, profile, split });
        }
    }
    Ok(SyntheticDataset {
        format_version: MANIFEST_VERSION,
        num_classes,
        dims,
        fps_tag: DEFAULT_FPS,
        sampler_seed,
        clips,
    })
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Version { found: self.format_version, expected: MANIFEST_VERSION });
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Invariant(format!("class count {} out of range", self.num_classes)));
        }
        self.dims.validate()?;
        let mut seen = HashSet::new();
        let mut train_per_class = vec![0usize; self.num_classes];
        for c in &self.clips {
            if !seen.insert(c.id) {
                return Err(Error::Invariant(format!("duplicate clip_id {}", c.id)));
            }
            if c.class_id >= self.num_classes {
                return Err(Error::Invariant(format!(
                    "clip {} has class_id {} >= K = {}",
                    c.id, c.class_id, self.num_classes
                )));
            }
            c.profile
                .validate(self.dims.frames)
                .map_err(|e| Error::Invariant(format!("clip {}: {e}", c.id)))?;
            if c.split == Split::Train {
                train_per_class[c.class_id] += 1;
            }
        }
        if let Some((class, n)) = train_per_class.iter().enumerate().find(|(_, &n)| n < MIN_TRAIN_PER_CLASS) {
            return Err(Error::Invariant(format!(
                "class {class} has {n} train clips, needs >= {MIN_TRAIN_PER_CLASS}"
            )));
        }
        Ok(())
    }

    pub fn split_assignment(&self) -> BTreeMap<u32, Split> {
        self.clips.iter().map(|c| (c.id, c.split)).collect()
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records(split).count()
    }

    pub fn record(&self, id: u32) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn render(&self, record: &ClipRecord) -> Result<VideoClip> {
        let mut clip = generate_clip(record.class_id, &record.profile, record.seed, self.dims)?;
        clip.fps_tag = self.fps_tag;
        Ok(clip)
    }

    /// Writes the manifest as pretty-printed JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Corrupt { path: path.to_path_buf(), reason: j.to_string() },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        // Check the version before the schema so older layouts get a clear error.
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Invariant("manifest has no format_version".into()))? as u32;
        if found != MANIFEST_VERSION {
            return Err(Error::Version { found, expected: MANIFEST_VERSION });
        }
        let dataset: SyntheticDataset = serde_json::from_value(value)?;
        dataset.validate()?;
        Ok(dataset)
    }
}

/// Unlabeled clip spec for self-supervised pretraining. The class id is only
/// needed to render the motion; it never reaches a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledClip {
    pub render_class: usize,
    pub seed: u64,
    pub profile: IlluminationProfile,
}

impl UnlabeledClip {
    pub fn render(&self, dims: Dims) -> Result<VideoClip> {
        generate_clip(self.render_class, &self.profile, self.seed, dims)
    }
}

/// Train-split clips with labels stripped, plus `extra_b` clips drawn from the
/// family-B capture setup.
pub fn unlabeled_pool(dataset: &SyntheticDataset, extra_b: usize, seed: u64) -> Vec<UnlabeledClip> {
    let mut pool: Vec<UnlabeledClip> = dataset
        .records(Split::Train)
        .map(|r| UnlabeledClip { render_class: r.class_id, seed: r.seed, profile: r.profile.clone() })
        .collect();
    let mut rng = rng::derived(seed, "domain-b");
    for _ in 0..extra_b {
        let render_class = rng.random_range(0..dataset.num_classes);
        let clip_seed = rng.random::<u64>();
        let profile = sample_profile(ProfileFamily::B, dataset.dims.frames, &mut rng);
        pool.push(UnlabeledClip { render_class, seed: clip_seed, profile });
    }
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: Dims = Dims::new(8, 16, 16);

    #[test]
    fn generation_is_deterministic() {
        let p = IlluminationProfile::constant(1.0, 0.0);
        let a = generate_clip(0, &p, 7, SMALL).unwrap();
        let b = generate_clip(0, &p, 7, SMALL).unwrap();
        assert_eq!(a, b);
        let noisy = IlluminationProfile::constant(0.3, 0.02);
        assert_eq!(
            generate_clip(3, &noisy, 11, SMALL).unwrap(),
            generate_clip(3, &noisy, 11, SMALL).unwrap()
        );
    }

    #[test]
    fn dim_illumination_scales_brightness() {
        let bright = generate_clip(2, &IlluminationProfile::constant(1.0, 0.0), 5, SMALL).unwrap();
        let dark = generate_clip(2, &IlluminationProfile::constant(0.1, 0.01), 5, SMALL).unwrap();
        let b = bright.frame_means();
        for (t, m) in dark.frame_means().into_iter().enumerate() {
            // clamped zero-mean noise can only lift the mean by about sigma / sqrt(2 pi)
            assert!(m <= 0.1 * b[t] + 0.01, "frame {t}: {m} vs {}", b[t]);
        }
    }

    #[test]
    fn distinct_classes_differ_in_many_voxels() {
        let p = IlluminationProfile::constant(0.5, 0.0);
        let dims = Dims::default();
        let a = generate_clip(0, &p, 9, dims).unwrap();
        let b = generate_clip(1, &p, 9, dims).unwrap();
        let differing = a.data.iter().zip(b.data.iter()).filter(|(x, y)| x != y).count();
        assert!(differing as f64 >= 0.01 * a.data.len() as f64, "only {differing} voxels differ");
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = IlluminationProfile::constant(1.0, 0.0);
        assert!(generate_clip(MAX_CLASSES, &p, 0, SMALL).is_err());
        let err = generate_clip(0, &p, 0, Dims::new(1, 16, 16)).unwrap_err();
        assert!(err.to_string().contains("below minimum"));
        assert!(generate_clip(0, &p, 0, Dims::new(4, 7, 16)).is_err());
        let overlapping = IlluminationProfile {
            base_level: 0.5,
            segments: vec![
                Segment { t_start: 0, t_end: 4, level: 0.1 },
                Segment { t_start: 3, t_end: 6, level: 0.9 },
            ],
            noise_sigma: 0.0,
        };
        assert!(generate_clip(0, &overlapping, 0, SMALL).is_err());
    }

    #[test]
    fn segments_override_base_level() {
        let p = IlluminationProfile {
            base_level: 0.5,
            segments: vec![Segment { t_start: 2, t_end: 4, level: 0.05 }],
            noise_sigma: 0.0,
        };
        assert_eq!(p.level_at(1), 0.5);
        assert_eq!(p.level_at(2), 0.05);
        assert_eq!(p.level_at(4), 0.5);
        assert!(p.has_transition());
    }

    #[test]
    fn dataset_counts_and_splits() {
        let d = generate_dataset(10, 40, SMALL, 1).unwrap();
        assert_eq!(d.clips.len(), 400);
        assert_eq!(d.count(Split::Train), 280);
        assert_eq!(d.count(Split::Val), 40);
        assert_eq!(d.count(Split::Test), 80);
        let again = generate_dataset(10, 40, SMALL, 1).unwrap();
        assert_eq!(d.split_assignment(), again.split_assignment());
        let with_transition = d.clips.iter().filter(|c| c.profile.has_transition()).count();
        assert!((120..=280).contains(&with_transition), "{with_transition} clips with transitions");
    }

    #[test]
    fn minimal_dataset_covers_every_split() {
        let d = generate_dataset(2, 4, SMALL, 3).unwrap();
        for class in 0..2 {
            for split in [Split::Train, Split::Val, Split::Test] {
                assert!(d.records(split).any(|r| r.class_id == class), "class {class} missing from {split}");
            }
        }
        assert!(matches!(generate_dataset(2, 3, SMALL, 3), Err(Error::Insufficient(_))));
        assert!(generate_dataset(1, 10, SMALL, 3).is_err());
    }

    #[test]
    fn parses_dims() {
        assert_eq!("16x32x32".parse::<Dims>().unwrap(), Dims::new(16, 32, 32));
        assert!("16x32".parse::<Dims>().is_err());
        assert!("axbxc".parse::<Dims>().is_err());
    }
}
